use std::path::PathBuf;

use clap::Args;
use serde::Serialize;
use star_core::pipeline::{run_schedule, PipelineError, PruneSchedule, Strategy};
use star_core::toy::{run_with_schedule, FidelityMetrics, ToyError, ToyInputs, ToyModel};

use crate::config::{usage, Mode, RunConfig};
use crate::fixtures::load_backend;
use crate::output::{write_json, Output};
use crate::viz::{resolve_grid, write_masks};

/// Schedule flags shared by `prune`.
#[derive(Args, Debug, Default)]
pub struct ScheduleArgs {
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[arg(long = "R")]
    pub stage1_ratio: Option<f64>,
    #[arg(long = "P")]
    pub stage2_ratio: Option<f64>,
    #[arg(long = "K")]
    pub pivot: Option<usize>,
    /// Final visual token count; overrides P.
    #[arg(long)]
    pub target: Option<usize>,
}

impl ScheduleArgs {
    pub fn apply(&self, base: &PruneSchedule, seed: u64) -> PruneSchedule {
        PruneSchedule {
            strategy: self.strategy.unwrap_or(base.strategy),
            stage1_ratio: self.stage1_ratio.unwrap_or(base.stage1_ratio),
            stage2_ratio: self.stage2_ratio.unwrap_or(base.stage2_ratio),
            pivot_layer: self.pivot.unwrap_or(base.pivot_layer),
            target_remaining: self.target.or(base.target_remaining),
            seed,
        }
    }
}

#[derive(Args, Debug)]
pub struct PruneArgs {
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    /// Run on a fixture directory instead of the toy model.
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
    /// Toy model visual token count.
    #[arg(long)]
    pub lv: Option<usize>,
    /// Greedy decoding steps in toy mode.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Patch grid as HxW; defaults to square.
    #[arg(long)]
    pub grid: Option<String>,
}

/// Schedule errors are the caller's fault; everything else is a runtime
/// failure.
pub fn pipeline_error(e: PipelineError) -> anyhow::Error {
    match e {
        PipelineError::Constraint { .. } | PipelineError::Infeasible(_) | PipelineError::Argument(_) => {
            usage(e.to_string())
        }
        other => other.into(),
    }
}

pub fn toy_error(e: ToyError) -> anyhow::Error {
    match e {
        ToyError::Pipeline(p) => pipeline_error(p),
        ToyError::Config(_) => usage(e.to_string()),
        other => other.into(),
    }
}

#[derive(Serialize)]
struct FidelityReport<'a> {
    #[serde(flatten)]
    metrics: FidelityMetrics,
    generated: &'a [u32],
    reference: &'a [u32],
}

pub fn run(args: &PruneArgs, cfg: &RunConfig, out: &Output) -> anyhow::Result<()> {
    let mut cfg = cfg.clone();
    if args.fixtures.is_some() {
        cfg.fixtures = args.fixtures.clone();
    }
    let schedule = args.schedule.apply(&cfg.schedule, cfg.seed);

    let (trace, resolved, fidelity) = match cfg.input_mode()? {
        Mode::Fixture => {
            if args.lv.is_some() || args.steps.is_some() {
                return Err(usage("--lv and --steps apply to toy mode only"));
            }
            let dir = cfg.fixtures.as_ref().expect("fixture mode has a directory");
            let (backend, manifest) = load_backend(dir)?;
            if cfg.grid.is_none() && args.grid.is_none() {
                cfg.grid = Some(format!("{}x{}", manifest.grid[0], manifest.grid[1]));
            }
            let run = run_schedule(&backend, &schedule).map_err(pipeline_error)?;
            (run.trace, run.resolved, None)
        }
        Mode::Toy => {
            let mut toy = cfg.toy.clone();
            toy.seed = cfg.seed;
            if let Some(lv) = args.lv {
                toy.visual_tokens = lv;
            }
            let model = ToyModel::init_seeded(toy).map_err(toy_error)?;
            let inputs = ToyInputs::seeded(&model, cfg.seed, cfg.prompt.system_tokens, cfg.prompt.query_tokens);
            let steps = args.steps.unwrap_or(cfg.prompt.steps);
            let run = run_with_schedule(&model, &inputs, &schedule, steps).map_err(toy_error)?;
            (run.trace, run.resolved, Some((run.fidelity, run.generated, run.reference)))
        }
    };

    let dir = out.dir();
    write_json(&dir.join("trace.json"), &trace)?;
    write_json(&dir.join("schedule.json"), &resolved)?;
    let grid = resolve_grid(args.grid.as_deref(), &cfg, trace.original_count())?;
    write_masks(dir, &trace, grid)?;
    for w in &trace.warnings {
        eprintln!("warning: {w}");
    }
    out.say(format!(
        "{}: {} visual tokens -> {} after stage 1 -> {} final",
        resolved.strategy,
        trace.original_count(),
        trace.stage1.kept.len(),
        trace.final_count
    ));
    if let Some((metrics, generated, reference)) = fidelity {
        write_json(
            &dir.join("fidelity.json"),
            &FidelityReport {
                metrics,
                generated: &generated,
                reference: &reference,
            },
        )?;
        out.say(format!(
            "fidelity: top-1 {:.3}, KL {:.6} nats, cosine {:.6}",
            metrics.top1_agreement, metrics.kl_nats, metrics.cosine
        ));
    }
    Ok(())
}
