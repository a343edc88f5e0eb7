//! Scaled dot-product self-attention with per-head maps, head averaging and
//! extraction of the text-to-visual block of a decoder attention map.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::tensor::{matmul, softmax_rows, AdditiveMask, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum AttentionError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid head config: {0}")]
    HeadConfig(String),
    #[error("{0}")]
    Argument(String),
    #[error("attention row (head {head}, query {query}) sums to {sum}")]
    NotStochastic { head: usize, query: usize, sum: f64 },
}

pub type Result<T> = std::result::Result<T, AttentionError>;

/// Role of a token position in a multimodal sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    /// Encoder summary token.
    Cls,
    System,
    Visual,
    Query,
    Response,
}

impl Modality {
    pub fn is_text(self) -> bool {
        matches!(self, Modality::Query | Modality::Response)
    }
}

/// A contiguous run of positions sharing a modality.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleSpan {
    pub modality: Modality,
    pub start: usize,
    pub end: usize,
}

/// Collapses a per-position modality list into spans.
pub fn role_spans(modalities: &[Modality]) -> Vec<RoleSpan> {
    let mut spans: Vec<RoleSpan> = Vec::new();
    for (i, &m) in modalities.iter().enumerate() {
        match spans.last_mut() {
            Some(s) if s.modality == m && s.end == i => s.end = i + 1,
            _ => spans.push(RoleSpan {
                modality: m,
                start: i,
                end: i + 1,
            }),
        }
    }
    spans
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub num_heads: usize,
    pub head_dim: usize,
}

impl HeadConfig {
    pub fn new(num_heads: usize, head_dim: usize) -> Result<Self> {
        if num_heads == 0 || head_dim == 0 {
            return Err(AttentionError::HeadConfig(format!(
                "num_heads={num_heads}, head_dim={head_dim} must both be positive"
            )));
        }
        Ok(Self {
            num_heads,
            head_dim,
        })
    }

    /// Splits a model width evenly across heads.
    pub fn for_width(model_dim: usize, num_heads: usize) -> Result<Self> {
        if num_heads == 0 || !model_dim.is_multiple_of(num_heads) {
            return Err(AttentionError::HeadConfig(format!(
                "width {model_dim} is not divisible by {num_heads} heads"
            )));
        }
        Self::new(num_heads, model_dim / num_heads)
    }

    pub fn model_dim(&self) -> usize {
        self.num_heads * self.head_dim
    }
}

/// Attention weights `[heads, L_q, L_k]` with optional modality spans for the
/// query and key axes.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    weights: Tensor,
    pub query_roles: Vec<RoleSpan>,
    pub key_roles: Vec<RoleSpan>,
}

impl AttentionMap {
    /// Wraps a rank-3 weight tensor, checking that every row sums to one
    /// within `tol` and that entries lie in `[0, 1]`.
    pub fn from_weights(weights: Tensor, tol: f64) -> Result<Self> {
        if weights.rank() != 3 {
            return Err(AttentionError::Tensor(TensorError::Shape {
                op: "attention map",
                left: weights.shape().to_vec(),
                right: vec![],
            }));
        }
        let map = Self {
            weights,
            query_roles: Vec::new(),
            key_roles: Vec::new(),
        };
        map.check_stochastic(tol)?;
        Ok(map)
    }

    pub fn with_roles(mut self, query: Vec<RoleSpan>, key: Vec<RoleSpan>) -> Self {
        self.query_roles = query;
        self.key_roles = key;
        self
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn num_heads(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn query_len(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn key_len(&self) -> usize {
        self.weights.shape()[2]
    }

    /// Weight from query `q` to key `k` in head `h`.
    pub fn weight(&self, h: usize, q: usize, k: usize) -> f32 {
        let (lq, lk) = (self.query_len(), self.key_len());
        self.weights.data()[(h * lq + q) * lk + k]
    }

    pub fn check_stochastic(&self, tol: f64) -> Result<()> {
        let lk = self.key_len();
        for (r, row) in self.weights.data().chunks(lk.max(1)).enumerate() {
            if lk == 0 {
                break;
            }
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            let in_range = row.iter().all(|&v| (0.0..=1.0).contains(&v));
            if (sum - 1.0).abs() > tol || !in_range {
                return Err(AttentionError::NotStochastic {
                    head: r / self.query_len(),
                    query: r % self.query_len(),
                    sum,
                });
            }
        }
        Ok(())
    }

    /// Restricts a square map to the given positions on both axes, keeping
    /// raw weights (no renormalisation).
    pub fn select(&self, positions: &[usize]) -> Result<Tensor> {
        let (h, lq, lk) = (self.num_heads(), self.query_len(), self.key_len());
        if lq != lk {
            return Err(AttentionError::Argument(format!(
                "select needs a square map, got {lq}x{lk}"
            )));
        }
        if let Some(&bad) = positions.iter().find(|&&p| p >= lq) {
            return Err(AttentionError::Argument(format!(
                "position {bad} out of range for length {lq}"
            )));
        }
        let n = positions.len();
        let mut data = Vec::with_capacity(h * n * n);
        for head in 0..h {
            for &q in positions {
                for &k in positions {
                    data.push(self.weight(head, q, k));
                }
            }
        }
        Ok(Tensor::new(vec![h, n, n], data)?)
    }
}

/// Multi-head scaled dot-product self-attention.
///
/// Returns the head outputs concatenated along the width axis (no output
/// projection) and the per-head attention map.
pub fn self_attention(
    h: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    cfg: HeadConfig,
    causal: bool,
) -> Result<(Tensor, AttentionMap)> {
    let (len, d) = h.dims2("self_attention")?;
    if d != cfg.model_dim() {
        return Err(AttentionError::HeadConfig(format!(
            "input width {d} does not match {} heads x {}",
            cfg.num_heads, cfg.head_dim
        )));
    }
    for w in [wq, wk, wv] {
        if w.shape() != [d, d] {
            return Err(TensorError::Shape {
                op: "self_attention weights",
                left: vec![d, d],
                right: w.shape().to_vec(),
            }
            .into());
        }
    }
    if len == 0 {
        return Err(AttentionError::Argument("empty sequence".into()));
    }
    let q = matmul(h, wq)?;
    let k = matmul(h, wk)?;
    let v = matmul(h, wv)?;
    let mask = causal.then(|| AdditiveMask::causal(len));
    let inv_sqrt = 1.0 / (cfg.head_dim as f32).sqrt();

    let mut out = Tensor::zeros(vec![len, d]);
    let mut maps = Vec::with_capacity(cfg.num_heads);
    for head in 0..cfg.num_heads {
        let (lo, hi) = (head * cfg.head_dim, (head + 1) * cfg.head_dim);
        let qh = q.slice_cols(lo, hi)?;
        let kh = k.slice_cols(lo, hi)?;
        let vh = v.slice_cols(lo, hi)?;
        let scores = matmul(&qh, &kh.transpose()?)?.scale(inv_sqrt);
        let probs = softmax_rows(&scores, mask.as_ref())?;
        out.set_cols(lo, &matmul(&probs, &vh)?)?;
        maps.push(probs);
    }
    let map = AttentionMap {
        weights: Tensor::stack(&maps)?,
        query_roles: Vec::new(),
        key_roles: Vec::new(),
    };
    Ok((out, map))
}

/// Mean over the head axis, `[L_q, L_k]`.
pub fn head_average(map: &AttentionMap) -> Tensor {
    let (h, lq, lk) = (map.num_heads(), map.query_len(), map.key_len());
    let mut acc = vec![0.0f64; lq * lk];
    for head_block in map.weights.data().chunks(lq * lk).take(h) {
        for (a, &w) in acc.iter_mut().zip(head_block) {
            *a += w as f64;
        }
    }
    let data = acc.into_iter().map(|s| (s / h as f64) as f32).collect();
    Tensor::from_kernel(vec![lq, lk], data)
}

/// Text-to-visual block of a square decoder map, head-averaged and
/// transposed to `[L_v, L_text]`: entry `[i, j]` is the attention text
/// position `j` pays to visual position `i`. No renormalisation.
pub fn extract_cross_modal(
    decoder_map: &AttentionMap,
    visual: Range<usize>,
    text: Range<usize>,
) -> Result<Tensor> {
    let len = decoder_map.query_len();
    if decoder_map.key_len() != len {
        return Err(AttentionError::Argument(format!(
            "decoder map must be square, got {}x{}",
            len,
            decoder_map.key_len()
        )));
    }
    if visual.start >= visual.end || text.start >= text.end {
        return Err(AttentionError::Argument(format!(
            "empty index range (visual {visual:?}, text {text:?})"
        )));
    }
    if visual.end > len || text.end > len {
        return Err(AttentionError::Argument(format!(
            "index ranges visual {visual:?}, text {text:?} exceed sequence length {len}"
        )));
    }
    if visual.start < text.end && text.start < visual.end {
        return Err(AttentionError::Argument(format!(
            "visual range {visual:?} overlaps text range {text:?}"
        )));
    }
    if text.start < visual.end {
        return Err(AttentionError::Argument(format!(
            "text range {text:?} must follow visual range {visual:?}"
        )));
    }
    let avg = head_average(decoder_map);
    let (lv, lt) = (visual.len(), text.len());
    let mut data = Vec::with_capacity(lv * lt);
    for i in visual {
        for j in text.clone() {
            data.push(avg.at(j, i));
        }
    }
    Ok(Tensor::from_kernel(vec![lv, lt], data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{random_tensor, Prng};

    fn weights(d: usize, seed: u64) -> [Tensor; 3] {
        let mut p = Prng::new(seed);
        [
            random_tensor(vec![d, d], &mut p, 0.5),
            random_tensor(vec![d, d], &mut p, 0.5),
            random_tensor(vec![d, d], &mut p, 0.5),
        ]
    }

    #[test]
    fn single_token_attends_to_itself() {
        let cfg = HeadConfig::new(2, 2).unwrap();
        let h = random_tensor(vec![1, 4], &mut Prng::new(1), 1.0);
        let [wq, wk, wv] = weights(4, 2);
        for causal in [false, true] {
            let (_, map) = self_attention(&h, &wq, &wk, &wv, cfg, causal).unwrap();
            assert_eq!(map.weights().shape(), &[2, 1, 1]);
            assert!(map.weights().data().iter().all(|&w| w == 1.0));
        }
    }

    #[test]
    fn causal_upper_triangle_is_exact_zero() {
        let cfg = HeadConfig::new(2, 3).unwrap();
        let h = random_tensor(vec![3, 6], &mut Prng::new(5), 1.0);
        let [wq, wk, wv] = weights(6, 6);
        let (_, map) = self_attention(&h, &wq, &wk, &wv, cfg, true).unwrap();
        for head in 0..2 {
            for i in 0..3 {
                for j in i + 1..3 {
                    assert_eq!(map.weight(head, i, j), 0.0);
                }
            }
        }
        map.check_stochastic(1e-6).unwrap();
    }

    #[test]
    fn zero_input_gives_uniform_rows() {
        let cfg = HeadConfig::new(2, 2).unwrap();
        let [wq, wk, wv] = weights(4, 3);
        let (out, map) = self_attention(&Tensor::zeros(vec![5, 4]), &wq, &wk, &wv, cfg, false).unwrap();
        assert!(map.weights().data().iter().all(|&w| (w - 0.2).abs() < 1e-7));
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_weight_shape() {
        let cfg = HeadConfig::new(1, 4).unwrap();
        let h = Tensor::zeros(vec![2, 4]);
        let bad = Tensor::zeros(vec![4, 3]);
        let ok = Tensor::zeros(vec![4, 4]);
        assert!(self_attention(&h, &ok, &bad, &ok, cfg, false).is_err());
        assert!(HeadConfig::for_width(10, 4).is_err());
    }

    fn map_from(heads: &[&[&[f32]]]) -> AttentionMap {
        let slices: Vec<Tensor> = heads.iter().map(|h| Tensor::from_rows(h).unwrap()).collect();
        AttentionMap::from_weights(Tensor::stack(&slices).unwrap(), 1e-6).unwrap()
    }

    #[test]
    fn head_average_cases() {
        let one = map_from(&[&[&[0.25, 0.75]]]);
        assert_eq!(head_average(&one).data(), &[0.25, 0.75]);

        let two = map_from(&[&[&[1.0, 0.0]], &[&[0.0, 1.0]]]);
        assert_eq!(head_average(&two).data(), &[0.5, 0.5]);

        let same = map_from(&[&[&[0.3, 0.7], &[0.9, 0.1]], &[&[0.3, 0.7], &[0.9, 0.1]]]);
        assert_eq!(head_average(&same).data(), &[0.3, 0.7, 0.9, 0.1]);
    }

    #[test]
    fn cross_modal_single_entry() {
        let map = map_from(&[&[&[1.0, 0.0], &[0.4, 0.6]]]);
        let c = extract_cross_modal(&map, 0..1, 1..2).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.data(), &[0.4]);
    }

    #[test]
    fn cross_modal_uniform_text_row() {
        // Two visual tokens then one text token attending uniformly over all
        // three positions: each visual entry is 1/(v+1) = 1/3.
        let t = 1.0 / 3.0;
        let map = map_from(&[&[&[1.0, 0.0, 0.0], &[0.5, 0.5, 0.0], &[t, t, t]]]);
        let c = extract_cross_modal(&map, 0..2, 2..3).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert!(c.data().iter().all(|&v| (v - t).abs() < 1e-7));
    }

    #[test]
    fn cross_modal_rejects_overlap() {
        let map = map_from(&[&[&[1.0, 0.0, 0.0], &[0.5, 0.5, 0.0], &[0.2, 0.3, 0.5]]]);
        assert!(matches!(
            extract_cross_modal(&map, 0..2, 1..3),
            Err(AttentionError::Argument(_))
        ));
        assert!(extract_cross_modal(&map, 1..3, 0..1).is_err());
        assert!(extract_cross_modal(&map, 0..2, 2..4).is_err());
    }

    #[test]
    fn spans_from_modalities() {
        use Modality::*;
        let spans = role_spans(&[System, Visual, Visual, Query]);
        assert_eq!(spans.len(), 3);
        assert_eq!((spans[1].start, spans[1].end), (1, 3));
    }
}
