use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::scoring::{drop_count, keep_count};

use super::{PipelineError, Result};

/// Decoder layer after which FastV prunes.
pub const FASTV_LAYER: usize = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Encoder self-attention pruning, then cross-modal pruning at layer K.
    #[default]
    Star,
    /// Cross-modal pruning once, after decoder layer 2.
    Fastv,
    /// `[CLS]` attention pruning before the decoder.
    Fastervlm,
    /// Seeded uniform choice before the decoder.
    Random,
    None,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Star,
        Strategy::Fastv,
        Strategy::Fastervlm,
        Strategy::Random,
        Strategy::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Star => "star",
            Strategy::Fastv => "fastv",
            Strategy::Fastervlm => "fastervlm",
            Strategy::Random => "random",
            Strategy::None => "none",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                PipelineError::Argument(format!(
                    "unknown strategy {s:?} (expected star, fastv, fastervlm, random or none)"
                ))
            })
    }
}

fn default_pivot() -> usize {
    4
}

/// Requested pruning schedule.
///
/// `R` and `P` are fractions of the tokens entering their stage: stage 2
/// removes `floor(P · survivors)` of the tokens stage 1 kept. When
/// `target_remaining` is set it overrides `P`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    #[serde(rename = "R", default)]
    pub stage1_ratio: f64,
    #[serde(rename = "P", default)]
    pub stage2_ratio: f64,
    #[serde(rename = "K", default = "default_pivot")]
    pub pivot_layer: usize,
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_remaining: Option<usize>,
}

impl Default for PruneSchedule {
    fn default() -> Self {
        Self {
            stage1_ratio: 0.0,
            stage2_ratio: 0.0,
            pivot_layer: default_pivot(),
            strategy: Strategy::Star,
            seed: 0,
            target_remaining: None,
        }
    }
}

impl PruneSchedule {
    pub fn star(stage1_ratio: f64, stage2_ratio: f64, pivot_layer: usize) -> Self {
        Self {
            stage1_ratio,
            stage2_ratio,
            pivot_layer,
            ..Self::default()
        }
    }

    pub fn with_target(mut self, remaining: usize) -> Self {
        self.target_remaining = Some(remaining);
        self
    }

    pub fn with_strategy(mut self, strategy: Strategy) -> Self {
        self.strategy = strategy;
        self
    }

    pub fn none() -> Self {
        Self::default().with_strategy(Strategy::None)
    }
}

/// A schedule resolved against concrete token and layer counts.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResolvedSchedule {
    pub strategy: Strategy,
    #[serde(rename = "R")]
    pub stage1_ratio: f64,
    #[serde(rename = "P")]
    pub stage2_ratio: f64,
    /// Layer after which the decoder-side prune happens, if any.
    #[serde(rename = "K")]
    pub pivot_layer: Option<usize>,
    pub original_visual: usize,
    /// Visual tokens entering the decoder.
    pub stage1_keep: usize,
    /// Visual tokens after the last pruning point.
    pub final_keep: usize,
    /// Visual tokens removed at each decoder layer (`N_i`).
    pub pruned_per_layer: Vec<u64>,
    pub warnings: Vec<String>,
}

fn check_ratio(name: &str, v: f64) -> Result<()> {
    if !(0.0..1.0).contains(&v) {
        return Err(PipelineError::Argument(format!(
            "{name}={v} must lie in [0, 1)"
        )));
    }
    Ok(())
}

/// Resolves `(R, P, K)` and any target budget into per-stage keep counts and
/// per-layer pruned counts.
pub fn resolve_schedule(s: &PruneSchedule, visual_tokens: usize, layers: usize) -> Result<ResolvedSchedule> {
    check_ratio("R", s.stage1_ratio)?;
    check_ratio("P", s.stage2_ratio)?;
    if visual_tokens == 0 {
        return Err(PipelineError::Argument("no visual tokens to prune".into()));
    }
    let mut warnings = Vec::new();
    let mut at_least_one = |n: usize, stage: &str| {
        if n == 0 {
            warnings.push(format!(
                "{stage}: schedule would remove every visual token; keeping 1"
            ));
            1
        } else {
            n
        }
    };

    // Budget after a single prune of `from` tokens, via target or ratio.
    let single_stage = |from: usize, ratio: f64| -> Result<(usize, f64)> {
        match s.target_remaining {
            Some(t) if t > from => Err(PipelineError::Infeasible(format!(
                "target of {t} visual tokens exceeds the {from} available"
            ))),
            Some(t) => Ok((t, if from == 0 { 0.0 } else { 1.0 - t as f64 / from as f64 })),
            None => Ok((from - drop_count(ratio, from), ratio)),
        }
    };

    let (stage1_ratio, stage2_ratio, pivot, stage1_keep, final_keep) = match s.strategy {
        Strategy::None => (0.0, 0.0, None, visual_tokens, visual_tokens),
        Strategy::Star => {
            if s.pivot_layer == 0 || s.pivot_layer > layers {
                return Err(PipelineError::Argument(format!(
                    "pivot layer K={} must lie in 1..={layers}",
                    s.pivot_layer
                )));
            }
            let stage1 = at_least_one(keep_count(s.stage1_ratio, visual_tokens), "stage 1");
            let (final_keep, p) = single_stage(stage1, s.stage2_ratio)?;
            let final_keep = at_least_one(final_keep, "stage 2");
            if s.stage1_ratio > 0.0 && p > 0.0 && s.stage1_ratio >= p {
                return Err(PipelineError::Constraint {
                    stage1: s.stage1_ratio,
                    stage2: p,
                });
            }
            (s.stage1_ratio, p, Some(s.pivot_layer), stage1, final_keep)
        }
        Strategy::Fastv => {
            if layers < FASTV_LAYER {
                return Err(PipelineError::Argument(format!(
                    "fastv prunes after layer {FASTV_LAYER} but the decoder has {layers}"
                )));
            }
            let (final_keep, p) = single_stage(visual_tokens, s.stage2_ratio)?;
            let final_keep = at_least_one(final_keep, "fastv");
            (0.0, p, Some(FASTV_LAYER), visual_tokens, final_keep)
        }
        Strategy::Fastervlm | Strategy::Random => {
            let (keep, p) = single_stage(visual_tokens, s.stage2_ratio)?;
            let keep = at_least_one(keep, s.strategy.name());
            (p, 0.0, None, keep, keep)
        }
    };

    let pruned_per_layer = (1..=layers)
        .map(|i| {
            let kept = match pivot {
                Some(k) if i > k => final_keep,
                _ => stage1_keep,
            };
            (visual_tokens - kept) as u64
        })
        .collect();

    Ok(ResolvedSchedule {
        strategy: s.strategy,
        stage1_ratio,
        stage2_ratio,
        pivot_layer: pivot,
        original_visual: visual_tokens,
        stage1_keep,
        final_keep,
        pruned_per_layer,
        warnings,
    })
}
