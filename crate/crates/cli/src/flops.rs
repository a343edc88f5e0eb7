use std::path::Path;

use clap::Args;
use star_core::cost::{budget_solve, delta_total, measured_reduction, BudgetSolution, BudgetTarget, CostError, FlopsReport, Grid, ModelDims};

use crate::config::{usage, RunConfig};
use crate::output::{write_json, Output};

/// Text tokens assumed when neither flag nor config gives a count.
pub const DEFAULT_TEXT_TOKENS: u64 = 64;

#[derive(Args, Debug, Default)]
pub struct FlopsArgs {
    /// Hidden width.
    #[arg(long = "D")]
    pub hidden: Option<u64>,
    /// Decoder layer count.
    #[arg(long)]
    pub omega: Option<u64>,
    /// Original visual token count.
    #[arg(long)]
    pub lv: Option<u64>,
    /// Non-visual token count.
    #[arg(long)]
    pub ltext: Option<u64>,
    #[arg(long = "R")]
    pub stage1_ratio: Option<f64>,
    #[arg(long = "P")]
    pub stage2_ratio: Option<f64>,
    #[arg(long = "K")]
    pub pivot: Option<u64>,
    /// Print `(A - B) / A` for two measured FLOPs totals and exit.
    #[arg(long, num_args = 2, value_names = ["BASELINE", "METHOD"])]
    pub ratio_check: Option<Vec<f64>>,
    /// Search the standard grid for schedules leaving exactly this many
    /// visual tokens.
    #[arg(long, conflicts_with = "min_reduction")]
    pub target_remaining: Option<u64>,
    /// Search the standard grid for schedules saving at least this fraction.
    #[arg(long)]
    pub min_reduction: Option<f64>,
}

fn cost_error(e: CostError) -> anyhow::Error {
    match e {
        CostError::Overflow => e.into(),
        other => usage(other.to_string()),
    }
}

pub fn run(args: &FlopsArgs, cfg: &RunConfig, out: &Output) -> anyhow::Result<()> {
    if let Some(pair) = &args.ratio_check {
        let ratio = measured_reduction(pair[0], pair[1]).map_err(cost_error)?;
        out.say(format!("relative reduction: {:.2}%", ratio * 100.0));
        return Ok(());
    }
    let need = |flag: Option<u64>, file: Option<u64>, name: &str| {
        flag.or(file).ok_or_else(|| usage(format!("missing required flag --{name}")))
    };
    let dims = ModelDims {
        hidden: need(args.hidden, cfg.flops.hidden, "D")?,
        layers: need(args.omega, cfg.flops.layers, "omega")?,
        visual_tokens: need(args.lv, cfg.flops.visual_tokens, "lv")?,
        text_tokens: args.ltext.or(cfg.flops.text_tokens).unwrap_or(DEFAULT_TEXT_TOKENS),
    };
    dims.validate().map_err(cost_error)?;

    let target = match (args.target_remaining, args.min_reduction) {
        (Some(t), _) => Some(BudgetTarget::Remaining(t)),
        (None, Some(m)) => Some(BudgetTarget::MinReduction(m)),
        (None, None) => None,
    };
    let reports = match target {
        Some(target) => match budget_solve(dims, target, &Grid::standard(dims.layers)).map_err(cost_error)? {
            BudgetSolution::Feasible(r) => r,
            BudgetSolution::Infeasible => {
                return Err(usage(format!("no schedule on the standard grid meets {target:?}")));
            }
        },
        None => {
            let r = args.stage1_ratio.unwrap_or(cfg.schedule.stage1_ratio);
            let p = args.stage2_ratio.unwrap_or(cfg.schedule.stage2_ratio);
            let k = args.pivot.unwrap_or(cfg.schedule.pivot_layer as u64);
            vec![delta_total(r, p, k, dims).map_err(cost_error)?]
        }
    };

    write_report(out.dir(), &reports)?;
    let best = &reports[0];
    out.say(format!(
        "R={} P={:.6} K={}: baseline {} FLOPs, saved {} (stage 1 {}, stage 2 {}), relative reduction {:.2}%",
        best.stage1_ratio,
        best.stage2_ratio,
        best.pivot_layer,
        best.baseline_total,
        best.delta_total,
        best.delta_stage1,
        best.delta_stage2,
        best.relative_reduction * 100.0
    ));
    if reports.len() > 1 {
        out.say(format!("{} feasible schedules written, best first", reports.len()));
    }
    Ok(())
}

fn write_report(dir: &Path, reports: &[FlopsReport]) -> anyhow::Result<()> {
    if reports.len() == 1 {
        write_json(&dir.join("flops.json"), &reports[0])?;
    } else {
        write_json(&dir.join("flops.json"), &reports)?;
    }
    let mut w = csv::Writer::from_path(dir.join("flops.csv"))?;
    w.write_record(FlopsReport::CSV_HEADER)?;
    for r in reports {
        w.write_record(r.csv_record())?;
    }
    w.flush()?;
    Ok(())
}
