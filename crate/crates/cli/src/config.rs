//! JSON run configuration. Every field is optional; command-line flags
//! override whatever the file sets.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use star_core::pipeline::{PruneSchedule, Strategy};
use star_core::toy::ToyConfig;

/// Bad flags, bad config files and invalid schedules. Maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Toy,
    Fixture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub system_tokens: usize,
    pub query_tokens: usize,
    /// Greedy decoding steps.
    pub steps: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            system_tokens: 4,
            query_tokens: 8,
            steps: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub strategies: Vec<Strategy>,
    #[serde(rename = "R")]
    pub stage1_ratios: Vec<f64>,
    #[serde(rename = "P")]
    pub stage2_ratios: Vec<f64>,
    #[serde(rename = "K")]
    pub pivots: Vec<usize>,
    /// Remaining-token budgets; when nonempty they replace the `P` axis.
    pub targets: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            strategies: vec![Strategy::Star],
            stage1_ratios: vec![0.1],
            stage2_ratios: vec![0.5],
            pivots: vec![4],
            targets: Vec::new(),
            seeds: vec![0],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlopsConfig {
    pub hidden: Option<u64>,
    pub layers: Option<u64>,
    pub visual_tokens: Option<u64>,
    pub text_tokens: Option<u64>,
}

fn cli_schedule() -> PruneSchedule {
    PruneSchedule::star(0.1, 0.5, 4)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Option<Mode>,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub toy: ToyConfig,
    /// Directory written by `gen-fixtures`.
    pub fixtures: Option<PathBuf>,
    pub schedule: PruneSchedule,
    pub prompt: PromptConfig,
    /// Patch grid as `HxW`.
    pub grid: Option<String>,
    pub sweep: SweepConfig,
    pub flops: FlopsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: None,
            seed: 0,
            out: None,
            toy: ToyConfig::default(),
            fixtures: None,
            schedule: cli_schedule(),
            prompt: PromptConfig::default(),
            grid: None,
            sweep: SweepConfig::default(),
            flops: FlopsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
    }

    /// Input mode after checking that exactly one was chosen.
    pub fn input_mode(&self) -> anyhow::Result<Mode> {
        match (self.mode, &self.fixtures) {
            (Some(Mode::Toy), Some(_)) => Err(usage("toy mode cannot also name a fixture directory")),
            (Some(Mode::Fixture), None) => Err(usage("fixture mode needs a fixture directory")),
            (_, Some(_)) => Ok(Mode::Fixture),
            (_, None) => Ok(Mode::Toy),
        }
    }
}

/// Parses `HxW`.
pub fn parse_grid(s: &str) -> anyhow::Result<(usize, usize)> {
    let parsed = s
        .split_once(['x', 'X'])
        .and_then(|(h, w)| Some((h.trim().parse().ok()?, w.trim().parse().ok()?)));
    match parsed {
        Some((h, w)) if h > 0 && w > 0 => Ok((h, w)),
        _ => Err(usage(format!("grid {s:?} is not of the form HxW"))),
    }
}

/// Square grid when `tokens` is a perfect square, else a single row.
pub fn default_grid(tokens: usize) -> (usize, usize) {
    let side = (tokens as f64).sqrt().round() as usize;
    if side * side == tokens {
        (side, side)
    } else {
        (1, tokens)
    }
}
