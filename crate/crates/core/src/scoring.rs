//! Importance indicators for visual tokens and the selection rules that turn
//! them into keep sets.

use serde::Serialize;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum ScoringError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Argument(String),
    #[error("row {row} of the attention map sums to {sum}, expected 1")]
    NotStochastic { row: usize, sum: f64 },
    #[error("importance score {value} at index {index} is negative or non-finite")]
    BadScore { index: usize, value: f32 },
}

pub type Result<T> = std::result::Result<T, ScoringError>;

/// Row-sum tolerance accepted for attention inputs.
pub const STOCHASTIC_TOL: f64 = 1e-5;

/// Slack absorbed when flooring `ratio * len`, so that e.g. `(1 - 0.9) * 10`
/// counts as one token rather than `0.999..`.
const COUNT_EPS: f64 = 1e-9;

/// `floor((1 - ratio) * len)`: tokens retained at a given pruning ratio.
pub fn keep_count(ratio: f64, len: usize) -> usize {
    (((1.0 - ratio) * len as f64 + COUNT_EPS).floor().max(0.0) as usize).min(len)
}

/// `floor(ratio * len)`: tokens dropped at a given pruning ratio.
pub fn drop_count(ratio: f64, len: usize) -> usize {
    ((ratio * len as f64 + COUNT_EPS).floor().max(0.0) as usize).min(len)
}

/// Non-negative per-token scores.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceVector {
    scores: Tensor,
}

impl ImportanceVector {
    pub fn new(scores: Vec<f32>) -> Result<Self> {
        if let Some((index, &value)) = scores
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(ScoringError::BadScore { index, value });
        }
        let n = scores.len();
        Ok(Self {
            scores: Tensor::new(vec![n], scores)?,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        self.scores.data()
    }

    pub fn get(&self, i: usize) -> f32 {
        self.scores.data()[i]
    }

    /// Rank-1 tensor form, e.g. for STT export.
    pub fn to_tensor(&self) -> Tensor {
        self.scores.clone()
    }
}

/// Sorted indices of the retained tokens, plus the threshold that produced
/// them when threshold-derived.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct KeepSet {
    indices: Vec<usize>,
    #[serde(skip)]
    pub threshold: Option<f32>,
}

impl KeepSet {
    /// Builds a keep set from indices, sorting and rejecting duplicates or
    /// indices `>= len`.
    pub fn from_indices(mut indices: Vec<usize>, len: usize) -> Result<Self> {
        indices.sort_unstable();
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(ScoringError::Argument("duplicate keep index".into()));
        }
        if let Some(&last) = indices.last() {
            if last >= len {
                return Err(ScoringError::Argument(format!(
                    "keep index {last} out of range for {len} tokens"
                )));
            }
        }
        Ok(Self {
            indices,
            threshold: None,
        })
    }

    pub fn all(len: usize) -> Self {
        Self {
            indices: (0..len).collect(),
            threshold: None,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    /// Indices in `0..len` not in the set, ascending.
    pub fn complement(&self, len: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(len.saturating_sub(self.len()));
        let mut it = self.indices.iter().peekable();
        for i in 0..len {
            if it.peek() == Some(&&i) {
                it.next();
            } else {
                out.push(i);
            }
        }
        out
    }
}

fn check_stochastic(a: &Tensor) -> Result<()> {
    for (row, r) in a.rows().enumerate() {
        let sum: f64 = r.iter().map(|&v| v as f64).sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(ScoringError::NotStochastic { row, sum });
        }
    }
    Ok(())
}

/// Mean attention each visual token receives from all visual queries:
/// `r_i = (1/L) Σ_j a[j, i]`.
///
/// The literal row mean of a row-stochastic map is `1/L` for every token and
/// carries no information, so tokens are scored by the column mean instead.
pub fn visual_self_attn_scores(a: &Tensor) -> Result<ImportanceVector> {
    let (rows, cols) = a.dims2("visual_self_attn_scores")?;
    if rows != cols {
        return Err(TensorError::Shape {
            op: "visual_self_attn_scores",
            left: vec![rows, cols],
            right: vec![cols, rows],
        }
        .into());
    }
    check_stochastic(a)?;
    let mut acc = vec![0.0f64; cols];
    for r in a.rows() {
        for (s, &v) in acc.iter_mut().zip(r) {
            *s += v as f64;
        }
    }
    ImportanceVector::new(acc.into_iter().map(|s| (s / rows as f64) as f32).collect())
}

/// FasterVLM-style scores: the `[CLS]` row of the encoder map, restricted to
/// the patch tokens (every position other than `cls_index`, in order).
pub fn cls_attention_scores(a: &Tensor, cls_index: usize) -> Result<ImportanceVector> {
    let (rows, cols) = a.dims2("cls_attention_scores")?;
    if rows != cols || rows < 2 || cls_index >= rows {
        return Err(TensorError::Shape {
            op: "cls_attention_scores",
            left: vec![rows, cols],
            right: vec![cls_index],
        }
        .into());
    }
    check_stochastic(a)?;
    let row = a.row(cls_index);
    ImportanceVector::new(
        row.iter()
            .enumerate()
            .filter(|&(j, _)| j != cls_index)
            .map(|(_, &v)| v)
            .collect(),
    )
}

/// Mean attention each visual token receives across text positions, from a
/// `[L_v, L_text]` cross-modal block.
pub fn cross_modal_scores(c: &Tensor) -> Result<ImportanceVector> {
    let (_, text) = c.dims2("cross_modal_scores")?;
    if text == 0 {
        return Err(ScoringError::Argument(
            "cross-modal scores need at least one text position".into(),
        ));
    }
    ImportanceVector::new(
        c.rows()
            .map(|r| (r.iter().map(|&v| v as f64).sum::<f64>() / text as f64) as f32)
            .collect(),
    )
}

/// Smallest score `τ` such that at most `floor((1 - ratio) * L)` tokens score
/// `>= τ`. Returns `+inf` when no observed score qualifies (e.g. all tied).
pub fn dynamic_threshold(r: &ImportanceVector, ratio: f64) -> f32 {
    threshold_for_count(r, keep_count(ratio, r.len()))
}

/// Smallest observed score `τ` with at most `budget` tokens scoring `>= τ`,
/// or `+inf` if none qualifies.
pub fn threshold_for_count(r: &ImportanceVector, budget: usize) -> f32 {
    let n = r.len();
    if n == 0 {
        return f32::INFINITY;
    }
    let mut sorted = r.as_slice().to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    if budget >= n {
        return sorted[n - 1];
    }
    // Candidates with count <= budget are exactly the values strictly above
    // the (budget+1)-th largest score; take the smallest of them.
    let pivot = sorted[budget];
    let first_tied = sorted.partition_point(|&v| v > pivot);
    if first_tied == 0 {
        f32::INFINITY
    } else {
        sorted[first_tied - 1]
    }
}

/// Indices with `r_i >= tau`, ascending.
pub fn keep_by_threshold(r: &ImportanceVector, tau: f32) -> KeepSet {
    KeepSet {
        indices: (0..r.len()).filter(|&i| r.get(i) >= tau).collect(),
        threshold: Some(tau),
    }
}

/// The `count` highest-scoring indices, ties broken toward the lower index,
/// returned ascending.
pub fn select_keep(r: &ImportanceVector, count: usize) -> Result<KeepSet> {
    let n = r.len();
    if count > n {
        return Err(ScoringError::Argument(format!(
            "cannot keep {count} of {n} tokens"
        )));
    }
    let s = r.as_slice();
    let mut order: Vec<usize> = (0..n).collect();
    let by_rank = |a: &usize, b: &usize| s[*b].total_cmp(&s[*a]).then(a.cmp(b));
    if count < n {
        if count > 0 {
            order.select_nth_unstable_by(count - 1, by_rank);
        }
        order.truncate(count);
    }
    order.sort_unstable();
    Ok(KeepSet {
        indices: order,
        threshold: None,
    })
}

/// Threshold selection that always yields exactly
/// `floor((1 - ratio) * L)` tokens: the dynamic threshold is recorded, and
/// the count-based top-k resolves ties the threshold cannot split.
pub fn select_by_ratio(r: &ImportanceVector, ratio: f64) -> Result<KeepSet> {
    let tau = dynamic_threshold(r, ratio);
    let mut keep = select_keep(r, keep_count(ratio, r.len()))?;
    keep.threshold = Some(tau);
    Ok(keep)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(v: &[f32]) -> ImportanceVector {
        ImportanceVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn counts() {
        assert_eq!(keep_count(0.1, 576), 518);
        assert_eq!(keep_count(0.9, 10), 1);
        assert_eq!(keep_count(0.0, 7), 7);
        assert_eq!(drop_count(0.5, 5), 2);
        assert_eq!(drop_count(0.0, 5), 0);
    }

    #[test]
    fn uniform_map_scores_equal() {
        let a = Tensor::full(vec![4, 4], 0.25);
        let r = visual_self_attn_scores(&a).unwrap();
        assert!(r.as_slice().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn column_mean_hand_case() {
        let a = Tensor::from_rows(&[&[1.0, 0.0], &[1.0, 0.0]]).unwrap();
        assert_eq!(visual_self_attn_scores(&a).unwrap().as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn self_scores_reject_non_square_and_non_stochastic() {
        assert!(visual_self_attn_scores(&Tensor::full(vec![2, 3], 1.0 / 3.0)).is_err());
        assert!(matches!(
            visual_self_attn_scores(&Tensor::full(vec![2, 2], 0.4)),
            Err(ScoringError::NotStochastic { .. })
        ));
    }

    #[test]
    fn cls_scores() {
        let a = Tensor::from_rows(&[&[0.4, 0.6, 0.0], &[0.2, 0.3, 0.5], &[0.1, 0.1, 0.8]]).unwrap();
        assert_eq!(cls_attention_scores(&a, 0).unwrap().as_slice(), &[0.6, 0.0]);

        let u = Tensor::full(vec![3, 3], 1.0 / 3.0);
        let r = cls_attention_scores(&u, 0).unwrap();
        assert_eq!(r.get(0), r.get(1));

        let two = Tensor::from_rows(&[&[0.3, 0.7], &[0.5, 0.5]]).unwrap();
        assert_eq!(cls_attention_scores(&two, 0).unwrap().as_slice(), &[0.7]);
    }

    #[test]
    fn cross_modal_means() {
        let c = Tensor::from_rows(&[&[0.2, 0.4], &[0.1, 0.1]]).unwrap();
        let r = cross_modal_scores(&c).unwrap();
        assert!((r.get(0) - 0.3).abs() < 1e-7 && (r.get(1) - 0.1).abs() < 1e-7);

        let single = Tensor::from_rows(&[&[0.25], &[0.5]]).unwrap();
        assert_eq!(cross_modal_scores(&single).unwrap().as_slice(), &[0.25, 0.5]);

        assert!(matches!(
            cross_modal_scores(&Tensor::zeros(vec![2, 0])),
            Err(ScoringError::Argument(_))
        ));
    }

    #[test]
    fn threshold_hand_case() {
        let r = iv(&[0.1, 0.3, 0.2, 0.4]);
        let tau = dynamic_threshold(&r, 0.5);
        assert_eq!(tau, 0.3);
        assert_eq!(keep_by_threshold(&r, tau).indices(), &[1, 3]);
    }

    #[test]
    fn threshold_tiny_ratio_keeps_all() {
        let r = iv(&[0.5, 0.1, 0.9, 0.3]);
        assert_eq!(dynamic_threshold(&r, 1e-12), 0.1);
    }

    #[test]
    fn threshold_all_ties_is_infinite() {
        let r = iv(&[0.25; 4]);
        assert_eq!(dynamic_threshold(&r, 0.5), f32::INFINITY);
        let keep = select_by_ratio(&r, 0.5).unwrap();
        assert_eq!(keep.indices(), &[0, 1]);
        assert_eq!(keep.threshold, Some(f32::INFINITY));
    }

    #[test]
    fn select_keep_edges() {
        let r = iv(&[0.5, 0.5, 0.1]);
        assert_eq!(select_keep(&r, 1).unwrap().indices(), &[0]);
        assert_eq!(select_keep(&r, 3).unwrap().indices(), &[0, 1, 2]);
        assert!(select_keep(&r, 0).unwrap().is_empty());
        assert!(select_keep(&r, 4).is_err());
    }

    #[test]
    fn keep_set_complement_and_json() {
        let k = KeepSet::from_indices(vec![3, 0], 5).unwrap();
        assert_eq!(k.complement(5), vec![1, 2, 4]);
        assert_eq!(serde_json::to_string(&k).unwrap(), "[0,3]");
        assert!(KeepSet::from_indices(vec![1, 1], 5).is_err());
        assert!(KeepSet::from_indices(vec![5], 5).is_err());
    }

    #[test]
    fn rejects_negative_scores() {
        assert!(ImportanceVector::new(vec![0.1, -0.1]).is_err());
    }
}
