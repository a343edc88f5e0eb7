use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use star_core::mask::{encode_pgm, KeepMask};
use star_core::pipeline::PruneTrace;

use crate::config::{default_grid, parse_grid, usage, RunConfig};
use crate::output::{write_bytes, write_json, Output};

#[derive(Args, Debug)]
pub struct VizArgs {
    /// Trace JSON written by `prune`.
    #[arg(long)]
    pub trace: PathBuf,
    /// Patch grid as HxW; defaults to square.
    #[arg(long)]
    pub grid: Option<String>,
}

/// Writes `mask.json` and one PGM per stage plus the combined image.
pub fn write_masks(dir: &Path, trace: &PruneTrace, grid: (usize, usize)) -> anyhow::Result<KeepMask> {
    let (h, w) = grid;
    let mask = KeepMask::from_trace(trace, h, w).map_err(|e| usage(e.to_string()))?;
    write_json(&dir.join("mask.json"), &mask)?;
    write_bytes(&dir.join("mask_stage1.pgm"), &encode_pgm(w, h, &mask.stage1_pixels()))?;
    write_bytes(&dir.join("mask_stage2.pgm"), &encode_pgm(w, h, &mask.stage2_pixels()))?;
    write_bytes(&dir.join("mask_combined.pgm"), &encode_pgm(w, h, &mask.combined_pixels()))?;
    Ok(mask)
}

pub fn resolve_grid(flag: Option<&str>, cfg: &RunConfig, tokens: usize) -> anyhow::Result<(usize, usize)> {
    match flag.or(cfg.grid.as_deref()) {
        Some(s) => parse_grid(s),
        None => Ok(default_grid(tokens)),
    }
}

pub fn run(args: &VizArgs, cfg: &RunConfig, out: &Output) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&args.trace).with_context(|| format!("reading {}", args.trace.display()))?;
    let trace: PruneTrace =
        serde_json::from_str(&text).map_err(|e| usage(format!("invalid trace {}: {e}", args.trace.display())))?;
    let grid = resolve_grid(args.grid.as_deref(), cfg, trace.original_count())?;
    let mask = write_masks(out.dir(), &trace, grid)?;
    out.say(format!(
        "{}x{} grid: {} kept after stage 1, {} after stage 2",
        grid.0,
        grid.1,
        mask.kept_count(1),
        mask.kept_count(2)
    ));
    Ok(())
}
