use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

use super::{Result, ToyError};

/// Agreement between a pruned run and the unpruned reference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityMetrics {
    /// Fraction of decoding steps whose argmax token matches the reference.
    pub top1_agreement: f64,
    /// Mean over steps of `KL(reference || pruned)` on next-token
    /// distributions, in nats.
    pub kl_nats: f64,
    /// Cosine similarity of the last-step final hidden state.
    pub cosine: f64,
}

/// Next-token logits for each decoding step plus the final hidden state of
/// the last step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutputs {
    /// `[steps, vocab]`
    pub logits: Tensor,
    pub final_hidden: Vec<f32>,
}

pub fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `sum p ln(p / q)`; terms with `p = 0` contribute nothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "distributions must have equal support");
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| if qi > 0.0 { pi * (pi.ln() - qi.ln()) } else { f64::INFINITY })
        .sum()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn cosine_similarity(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "vectors must have equal length");
    if a == b {
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

pub fn fidelity(reference: &StepOutputs, pruned: &StepOutputs) -> Result<FidelityMetrics> {
    if reference.logits.shape() != pruned.logits.shape() || reference.logits.rank() != 2 {
        return Err(ToyError::Argument(format!(
            "step logits differ in shape: {:?} vs {:?}",
            reference.logits.shape(),
            pruned.logits.shape()
        )));
    }
    let steps = reference.logits.shape()[0];
    if steps == 0 {
        return Err(ToyError::Argument("fidelity needs at least one step".into()));
    }
    let mut agree = 0usize;
    let mut kl = 0.0;
    for (r, p) in reference.logits.rows().zip(pruned.logits.rows()) {
        agree += (argmax(r) == argmax(p)) as usize;
        kl += kl_divergence(&softmax(r), &softmax(p));
    }
    Ok(FidelityMetrics {
        top1_agreement: agree as f64 / steps as f64,
        kl_nats: kl / steps as f64,
        cosine: cosine_similarity(&reference.final_hidden, &pruned.final_hidden),
    })
}
