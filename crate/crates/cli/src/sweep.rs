//! Grid sweeps over schedules and seeds on the toy model.
//!
//! Cells run in parallel, one worker task per seed; rows are placed by cell
//! and seed index before anything is written, so the CSV does not depend on
//! the worker count.

use std::cmp::Ordering;

use anyhow::Context;
use clap::Args;
use rayon::prelude::*;
use star_core::cost::{report_from_counts, ModelDims};
use star_core::pipeline::{PipelineError, PruneSchedule, Strategy, FASTV_LAYER};
use star_core::toy::{reference_run, run_against, ToyError, ToyInputs, ToyModel};

use crate::config::{usage, RunConfig, SweepConfig};
use crate::output::Output;
use crate::prune::toy_error;

pub const COLUMNS: [&str; 13] = [
    "strategy",
    "R",
    "P",
    "K",
    "target_remaining",
    "seed",
    "final_tokens",
    "delta_total_flops",
    "relative_reduction",
    "top1_agreement",
    "kl_nats",
    "cosine",
    "status",
];

pub const THREADS_ENV: &str = "STAR_PRUNE_THREADS";

#[derive(Args, Debug, Default)]
pub struct SweepArgs {
    /// Comma-separated strategies.
    #[arg(long, value_delimiter = ',')]
    pub strategies: Option<Vec<Strategy>>,
    #[arg(long = "R", value_delimiter = ',')]
    pub stage1_ratios: Option<Vec<f64>>,
    #[arg(long = "P", value_delimiter = ',')]
    pub stage2_ratios: Option<Vec<f64>>,
    #[arg(long = "K", value_delimiter = ',')]
    pub pivots: Option<Vec<usize>>,
    /// Remaining-token budgets; replace the P axis when given.
    #[arg(long, value_delimiter = ',')]
    pub targets: Option<Vec<usize>>,
    /// Explicit seeds.
    #[arg(long, value_delimiter = ',', conflicts_with = "num_seeds")]
    pub seeds: Option<Vec<u64>>,
    /// Seeds `--seed .. --seed + N`.
    #[arg(long)]
    pub num_seeds: Option<u64>,
    /// Greedy decoding steps per run.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Toy model visual token count.
    #[arg(long)]
    pub lv: Option<usize>,
}

/// One point of the schedule grid. Axes that do not apply to a strategy are
/// `None` and print as empty cells.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub strategy: Strategy,
    pub stage1_ratio: Option<f64>,
    pub stage2_ratio: Option<f64>,
    pub pivot: Option<usize>,
    pub target: Option<usize>,
}

fn cmp_opt_f64(a: Option<f64>, b: Option<f64>) -> Ordering {
    match (a, b) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        _ => a.is_some().cmp(&b.is_some()),
    }
}

impl Cell {
    fn cmp(&self, o: &Self) -> Ordering {
        self.strategy
            .name()
            .cmp(o.strategy.name())
            .then(cmp_opt_f64(self.stage1_ratio, o.stage1_ratio))
            .then(cmp_opt_f64(self.stage2_ratio, o.stage2_ratio))
            .then(self.pivot.cmp(&o.pivot))
            .then(self.target.cmp(&o.target))
    }

    pub fn schedule(&self, seed: u64) -> PruneSchedule {
        PruneSchedule {
            strategy: self.strategy,
            stage1_ratio: self.stage1_ratio.unwrap_or(0.0),
            stage2_ratio: self.stage2_ratio.unwrap_or(0.0),
            pivot_layer: self.pivot.unwrap_or(FASTV_LAYER),
            target_remaining: self.target,
            seed,
        }
    }
}

/// Expands the grid into sorted, distinct cells.
pub fn cells(sw: &SweepConfig) -> Vec<Cell> {
    let budgets: Vec<(Option<f64>, Option<usize>)> = if sw.targets.is_empty() {
        sw.stage2_ratios.iter().map(|&p| (Some(p), None)).collect()
    } else {
        sw.targets.iter().map(|&t| (None, Some(t))).collect()
    };
    let mut out = Vec::new();
    for &strategy in &sw.strategies {
        let cell = |r, (p, t): (Option<f64>, Option<usize>), k| Cell {
            strategy,
            stage1_ratio: r,
            stage2_ratio: p,
            pivot: k,
            target: t,
        };
        match strategy {
            Strategy::Star => {
                for &r in &sw.stage1_ratios {
                    for &b in &budgets {
                        for &k in &sw.pivots {
                            out.push(cell(Some(r), b, Some(k)));
                        }
                    }
                }
            }
            Strategy::Fastv => out.extend(budgets.iter().map(|&b| cell(None, b, Some(FASTV_LAYER)))),
            Strategy::Fastervlm | Strategy::Random => out.extend(budgets.iter().map(|&b| cell(None, b, None))),
            Strategy::None => out.push(cell(None, (None, None), None)),
        }
    }
    out.sort_by(Cell::cmp);
    out.dedup_by(|a, b| a.cmp(b) == Ordering::Equal);
    out
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metrics {
    pub final_tokens: f64,
    pub delta_total: u128,
    pub relative_reduction: f64,
    pub top1: f64,
    pub kl: f64,
    pub cosine: f64,
}

/// `None` when the schedule is infeasible for this model.
type CellResult = Option<Metrics>;

fn is_skip(e: &ToyError) -> bool {
    matches!(
        e,
        ToyError::Pipeline(PipelineError::Constraint { .. } | PipelineError::Infeasible(_))
    )
}

fn run_seed(cfg: &RunConfig, cells: &[Cell], seed: u64, steps: usize) -> anyhow::Result<Vec<CellResult>> {
    let mut toy = cfg.toy.clone();
    toy.seed = seed;
    let model = ToyModel::init_seeded(toy).map_err(toy_error)?;
    let inputs = ToyInputs::seeded(&model, seed, cfg.prompt.system_tokens, cfg.prompt.query_tokens);
    let reference = reference_run(&model, &inputs, steps).map_err(toy_error)?;
    let dims = ModelDims {
        hidden: model.cfg.d_dec as u64,
        layers: model.cfg.decoder_layers as u64,
        visual_tokens: model.cfg.visual_tokens as u64,
        text_tokens: (inputs.system.len() + inputs.query.len()) as u64,
    };
    cells
        .iter()
        .map(|cell| {
            let run = match run_against(&model, &inputs, &cell.schedule(seed), &reference) {
                Ok(run) => run,
                Err(e) if is_skip(&e) => return Ok(None),
                Err(e) => return Err(toy_error(e)),
            };
            let pivot = run.resolved.pivot_layer.unwrap_or(model.cfg.decoder_layers) as u64;
            let report = report_from_counts(
                run.resolved.pruned_per_layer.clone(),
                pivot,
                run.resolved.stage1_ratio,
                run.resolved.stage2_ratio,
                dims,
            )?;
            Ok(Some(Metrics {
                final_tokens: run.trace.final_count as f64,
                delta_total: report.delta_total,
                relative_reduction: report.relative_reduction,
                top1: run.fidelity.top1_agreement,
                kl: run.fidelity.kl_nats,
                cosine: run.fidelity.cosine,
            }))
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Per-metric medians over the feasible seeds.
pub fn aggregate(results: &[&Metrics]) -> Option<Metrics> {
    if results.is_empty() {
        return None;
    }
    let col = |f: fn(&Metrics) -> f64| median(results.iter().map(|m| f(m)).collect());
    let mut deltas: Vec<u128> = results.iter().map(|m| m.delta_total).collect();
    deltas.sort_unstable();
    Some(Metrics {
        final_tokens: col(|m| m.final_tokens),
        // Lower median keeps the column integral.
        delta_total: deltas[(deltas.len() - 1) / 2],
        relative_reduction: col(|m| m.relative_reduction),
        top1: col(|m| m.top1),
        kl: col(|m| m.kl),
        cosine: col(|m| m.cosine),
    })
}

fn fmt_opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn record(cell: &Cell, seed: &str, m: Option<&Metrics>, status: &str) -> Vec<String> {
    let mut row = vec![
        cell.strategy.name().to_string(),
        fmt_opt(cell.stage1_ratio),
        fmt_opt(cell.stage2_ratio),
        fmt_opt(cell.pivot),
        fmt_opt(cell.target),
        seed.to_string(),
    ];
    match m {
        Some(m) => row.extend([
            m.final_tokens.to_string(),
            m.delta_total.to_string(),
            format!("{:.9}", m.relative_reduction),
            format!("{:.9}", m.top1),
            format!("{:.9}", m.kl),
            format!("{:.9}", m.cosine),
        ]),
        None => row.extend(std::iter::repeat_n(String::new(), 6)),
    }
    row.push(status.to_string());
    row
}

fn worker_count() -> anyhow::Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(usage(format!("{THREADS_ENV}={s:?} is not a positive integer"))),
        },
        Err(_) => Ok(None),
    }
}

/// Runs every cell for every seed and returns CSV rows in output order.
pub fn sweep_rows(cfg: &RunConfig, steps: usize) -> anyhow::Result<Vec<Vec<String>>> {
    let sw = &cfg.sweep;
    let cells = cells(sw);
    if cells.is_empty() {
        return Err(usage("the sweep grid is empty"));
    }
    let mut seeds = sw.seeds.clone();
    seeds.sort_unstable();
    seeds.dedup();
    if seeds.is_empty() {
        return Err(usage("the sweep needs at least one seed"));
    }

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = worker_count()? {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().context("starting worker pool")?;
    let per_seed: Vec<Vec<CellResult>> = pool.install(|| {
        seeds
            .par_iter()
            .map(|&seed| run_seed(cfg, &cells, seed, steps))
            .collect::<anyhow::Result<_>>()
    })?;

    let mut rows = Vec::new();
    for (ci, cell) in cells.iter().enumerate() {
        let mut ok = Vec::new();
        for (si, &seed) in seeds.iter().enumerate() {
            let result = per_seed[si][ci].as_ref();
            let status = if result.is_some() { "ok" } else { "skipped" };
            rows.push(record(cell, &seed.to_string(), result, status));
            ok.extend(result);
        }
        let agg = aggregate(&ok);
        let status = if agg.is_some() { "aggregate" } else { "skipped" };
        rows.push(record(cell, "median", agg.as_ref(), status));
    }
    Ok(rows)
}

pub fn run(args: &SweepArgs, cfg: &RunConfig, out: &Output) -> anyhow::Result<()> {
    let mut cfg = cfg.clone();
    let sw = &mut cfg.sweep;
    macro_rules! take {
        ($field:ident, $arg:ident) => {
            if let Some(v) = &args.$arg {
                sw.$field = v.clone();
            }
        };
    }
    take!(strategies, strategies);
    take!(stage1_ratios, stage1_ratios);
    take!(stage2_ratios, stage2_ratios);
    take!(pivots, pivots);
    take!(targets, targets);
    take!(seeds, seeds);
    if let Some(n) = args.num_seeds {
        sw.seeds = (cfg.seed..cfg.seed + n).collect();
    }
    if let Some(lv) = args.lv {
        cfg.toy.visual_tokens = lv;
    }
    let steps = args.steps.unwrap_or(cfg.prompt.steps);

    let rows = sweep_rows(&cfg, steps)?;
    let path = out.dir().join("sweep.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(COLUMNS)?;
    for r in &rows {
        w.write_record(r)?;
    }
    w.flush()?;
    let skipped = rows.iter().filter(|r| r[12] == "skipped" && r[5] != "median").count();
    out.say(format!(
        "{} rows ({} skipped) written to {}",
        rows.len(),
        skipped,
        path.display()
    ));
    Ok(())
}
