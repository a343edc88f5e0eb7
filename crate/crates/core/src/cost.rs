//! Analytical FLOPs model for a pruned decoder.
//!
//! One FLOP per multiply-accumulate. A decoder layer over `L` tokens of width
//! `D` (FFN inner width `D`) costs `6·L·D² + 2·L²·D`: six `D×D` projections
//! (Q, K, V, O and the two FFN matrices) plus the two attention products.
//! Removing `N` tokens from a layer saves `6·N·D² + 2·N²·D`; pruned tokens
//! are never recycled.
//!
//! All counts are exact `u128` integers; overflow is reported, never wrapped.

use serde::{Deserialize, Serialize};

use crate::scoring::keep_count;

pub type Flops = u128;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CostError {
    #[error("FLOPs count overflows 128-bit arithmetic")]
    Overflow,
    #[error("stage-1 ratio R={stage1} must be below stage-2 ratio P={stage2} (we enforce R < P)")]
    Constraint { stage1: f64, stage2: f64 },
    #[error("{0}")]
    Argument(String),
}

pub type Result<T> = std::result::Result<T, CostError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Hidden width `D`.
    pub hidden: u64,
    /// Decoder layer count `Ω`.
    pub layers: u64,
    /// Original visual token count `L_v0`.
    pub visual_tokens: u64,
    /// Non-visual token count.
    pub text_tokens: u64,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers == 0 || self.visual_tokens == 0 || self.text_tokens == 0 {
            return Err(CostError::Argument(format!(
                "model dims must all be positive: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn sequence_len(&self) -> u64 {
        self.visual_tokens + self.text_tokens
    }
}

fn mul(a: u128, b: u128) -> Result<u128> {
    a.checked_mul(b).ok_or(CostError::Overflow)
}

/// `6·N·D² + 2·N²·D` without any range check on `n`.
fn layer_cost(n: u64, d: u64) -> Result<Flops> {
    let (n, d) = (n as u128, d as u128);
    let linear = mul(mul(6, n)?, mul(d, d)?)?;
    let attn = mul(mul(2, mul(n, n)?)?, d)?;
    linear.checked_add(attn).ok_or(CostError::Overflow)
}

/// Unpruned cost of one decoder layer over `len` tokens of width `hidden`.
pub fn f_base(len: u64, hidden: u64) -> Result<Flops> {
    if len == 0 || hidden == 0 {
        return Err(CostError::Argument(format!(
            "f_base needs L, D >= 1 (got L={len}, D={hidden})"
        )));
    }
    layer_cost(len, hidden)
}

/// Savings in one layer from removing `pruned` tokens.
pub fn delta_layer(pruned: u64, hidden: u64) -> Result<Flops> {
    layer_cost(pruned, hidden)
}

/// Per-layer and stage-wise savings for one schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    #[serde(rename = "R")]
    pub stage1_ratio: f64,
    #[serde(rename = "P")]
    pub stage2_ratio: f64,
    #[serde(rename = "K")]
    pub pivot_layer: u64,
    pub dims: ModelDims,
    /// Tokens removed at each decoder layer, `N_i`.
    pub pruned_per_layer: Vec<u64>,
    pub per_layer_baseline: Vec<Flops>,
    pub per_layer_savings: Vec<Flops>,
    pub baseline_total: Flops,
    pub delta_stage1: Flops,
    pub delta_stage2: Flops,
    pub delta_total: Flops,
    pub relative_reduction: f64,
}

impl FlopsReport {
    pub const CSV_HEADER: [&'static str; 7] = [
        "R",
        "P",
        "K",
        "delta_stage1",
        "delta_stage2",
        "delta_total",
        "relative_reduction",
    ];

    pub fn csv_record(&self) -> Vec<String> {
        vec![
            self.stage1_ratio.to_string(),
            format!("{:.6}", self.stage2_ratio),
            self.pivot_layer.to_string(),
            self.delta_stage1.to_string(),
            self.delta_stage2.to_string(),
            self.delta_total.to_string(),
            format!("{:.6}", self.relative_reduction),
        ]
    }
}

/// Builds a report from explicit per-layer pruned counts. Layers `1..=pivot`
/// count toward stage 1, the rest toward stage 2.
pub fn report_from_counts(
    pruned_per_layer: Vec<u64>,
    pivot_layer: u64,
    stage1_ratio: f64,
    stage2_ratio: f64,
    dims: ModelDims,
) -> Result<FlopsReport> {
    dims.validate()?;
    if pruned_per_layer.len() as u64 != dims.layers {
        return Err(CostError::Argument(format!(
            "{} per-layer counts for {} layers",
            pruned_per_layer.len(),
            dims.layers
        )));
    }
    if pivot_layer > dims.layers {
        return Err(CostError::Argument(format!(
            "pivot layer {pivot_layer} exceeds layer count {}",
            dims.layers
        )));
    }
    if let Some(&n) = pruned_per_layer.iter().find(|&&n| n > dims.visual_tokens) {
        return Err(CostError::Argument(format!(
            "cannot prune {n} of {} visual tokens",
            dims.visual_tokens
        )));
    }
    let base = f_base(dims.sequence_len(), dims.hidden)?;
    let savings = pruned_per_layer
        .iter()
        .map(|&n| delta_layer(n, dims.hidden))
        .collect::<Result<Vec<_>>>()?;
    let sum = |s: &[Flops]| {
        s.iter()
            .try_fold(0u128, |acc, &v| acc.checked_add(v))
            .ok_or(CostError::Overflow)
    };
    let split = pivot_layer as usize;
    let delta_stage1 = sum(&savings[..split])?;
    let delta_stage2 = sum(&savings[split..])?;
    let delta_total = delta_stage1.checked_add(delta_stage2).ok_or(CostError::Overflow)?;
    let baseline_total = mul(base, dims.layers as u128)?;
    Ok(FlopsReport {
        stage1_ratio,
        stage2_ratio,
        pivot_layer,
        dims,
        pruned_per_layer,
        per_layer_baseline: vec![base; dims.layers as usize],
        per_layer_savings: savings,
        baseline_total,
        delta_stage1,
        delta_stage2,
        delta_total,
        relative_reduction: delta_total as f64 / baseline_total as f64,
    })
}

/// Ratio-form savings: `round(R·L_v0)` tokens pruned in layers `1..=K` and
/// `round(P·L_v0)` in layers `K+1..=Ω`.
pub fn delta_total(
    stage1_ratio: f64,
    stage2_ratio: f64,
    pivot_layer: u64,
    dims: ModelDims,
) -> Result<FlopsReport> {
    dims.validate()?;
    if !(0.0..1.0).contains(&stage1_ratio) || !(0.0..1.0).contains(&stage2_ratio) {
        return Err(CostError::Argument(format!(
            "ratios must lie in [0, 1): R={stage1_ratio}, P={stage2_ratio}"
        )));
    }
    if stage1_ratio >= stage2_ratio {
        return Err(CostError::Constraint {
            stage1: stage1_ratio,
            stage2: stage2_ratio,
        });
    }
    if pivot_layer == 0 || pivot_layer > dims.layers {
        return Err(CostError::Argument(format!(
            "pivot layer K={pivot_layer} must lie in 1..={}",
            dims.layers
        )));
    }
    let n1 = (stage1_ratio * dims.visual_tokens as f64).round() as u64;
    let n2 = (stage2_ratio * dims.visual_tokens as f64).round() as u64;
    let counts = (1..=dims.layers)
        .map(|i| if i <= pivot_layer { n1 } else { n2 })
        .collect();
    report_from_counts(counts, pivot_layer, stage1_ratio, stage2_ratio, dims)
}

/// Relative reduction `(baseline - method) / baseline`.
pub fn measured_reduction(baseline_total: f64, method_total: f64) -> Result<f64> {
    if !baseline_total.is_finite() || baseline_total <= 0.0 || !method_total.is_finite() {
        return Err(CostError::Argument(format!(
            "baseline must be positive and finite (got {baseline_total}, {method_total})"
        )));
    }
    Ok((baseline_total - method_total) / baseline_total)
}

/// Search grid for [`budget_solve`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub stage1_ratios: Vec<f64>,
    pub stage2_ratios: Vec<f64>,
    pub pivots: Vec<u64>,
}

impl Grid {
    /// `R ∈ {0, 0.05, …, 0.95}`, `P ∈ {0.05, …, 0.95}`, `K ∈ 1..=Ω`.
    pub fn standard(layers: u64) -> Self {
        Self {
            stage1_ratios: (0..20).map(|i| i as f64 / 20.0).collect(),
            stage2_ratios: (1..20).map(|i| i as f64 / 20.0).collect(),
            pivots: (1..=layers).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetTarget {
    /// Relative reduction at least this large (ratio-form model).
    MinReduction(f64),
    /// Exactly this many visual tokens after stage 2. `P` is resolved
    /// against the stage-1 survivors for each grid `R`, and the report uses
    /// the resulting integer counts.
    Remaining(u64),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum BudgetSolution {
    Feasible(Vec<FlopsReport>),
    Infeasible,
}

/// Enumerates the grid, keeps schedules meeting `target` with `R < P`, and
/// sorts by savings descending, then `(R, P, K)` ascending.
pub fn budget_solve(dims: ModelDims, target: BudgetTarget, grid: &Grid) -> Result<BudgetSolution> {
    dims.validate()?;
    let mut found = Vec::new();
    for &r in &grid.stage1_ratios {
        match target {
            BudgetTarget::MinReduction(min) => {
                for &p in &grid.stage2_ratios {
                    if r >= p {
                        continue;
                    }
                    for &k in grid.pivots.iter().filter(|&&k| k >= 1 && k <= dims.layers) {
                        let report = delta_total(r, p, k, dims)?;
                        if report.relative_reduction >= min {
                            found.push(report);
                        }
                    }
                }
            }
            BudgetTarget::Remaining(tokens) => {
                let survivors = keep_count(r, dims.visual_tokens as usize) as u64;
                if tokens == 0 || tokens > survivors {
                    continue;
                }
                let p = 1.0 - tokens as f64 / survivors as f64;
                if r > 0.0 && p > 0.0 && r >= p {
                    continue;
                }
                for &k in grid.pivots.iter().filter(|&&k| k >= 1 && k <= dims.layers) {
                    let counts = (1..=dims.layers)
                        .map(|i| {
                            if i <= k {
                                dims.visual_tokens - survivors
                            } else {
                                dims.visual_tokens - tokens
                            }
                        })
                        .collect();
                    found.push(report_from_counts(counts, k, r, p, dims)?);
                }
            }
        }
    }
    if found.is_empty() {
        return Ok(BudgetSolution::Infeasible);
    }
    found.sort_by(|a, b| {
        b.delta_total
            .cmp(&a.delta_total)
            .then(a.stage1_ratio.total_cmp(&b.stage1_ratio))
            .then(a.stage2_ratio.total_cmp(&b.stage2_ratio))
            .then(a.pivot_layer.cmp(&b.pivot_layer))
    });
    Ok(BudgetSolution::Feasible(found))
}
