//! Two-stage pruning orchestration and the single-stage baselines.
//!
//! A run resolves the schedule into keep counts, prunes the visual block
//! before the decoder (stage 1), projects and concatenates it with the text,
//! runs the decoder to the pivot layer and prunes again on cross-modal
//! attention (stage 2). Pruning is physical removal: dropped tokens no longer
//! occupy sequence positions downstream.
//!
//! Models plug in through [`PruneBackend`]; the crate ships the seeded toy
//! model (`crate::toy`) and an offline attention-dump backend
//! ([`fixture::FixtureBackend`]).

pub mod fixture;
mod schedule;
mod sequence;
mod trace;

use std::ops::Range;

pub use schedule::{resolve_schedule, PruneSchedule, ResolvedSchedule, Strategy, FASTV_LAYER};
pub use sequence::{project_and_concat, TokenSequence};
pub use trace::{PruneTrace, ScoredIndex, StageTrace};

use crate::attention::{extract_cross_modal, AttentionError, AttentionMap, Modality};
use crate::scoring::{
    cls_attention_scores, cross_modal_scores, select_keep, threshold_for_count, visual_self_attn_scores,
    ImportanceVector, KeepSet, ScoringError,
};
use crate::tensor::{Prng, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error("stage-1 ratio R={stage1} must be below stage-2 ratio P={stage2:.6} (we enforce R < P)")]
    Constraint { stage1: f64, stage2: f64 },
    #[error("infeasible schedule: {0}")]
    Infeasible(String),
    #[error("{0}")]
    Argument(String),
    #[error("shape error: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// What a model must expose for a pruning run.
pub trait PruneBackend {
    fn num_layers(&self) -> usize;

    /// Encoder output for the visual tokens, origins `0..L_v0`.
    fn visual_tokens(&self) -> Result<TokenSequence>;

    /// Encoder self-attention over patches only, `[L_v0, L_v0]`,
    /// row-stochastic.
    fn encoder_attention(&self) -> Result<Tensor>;

    /// Head-averaged encoder attention including `[CLS]` at index 0,
    /// `[L_v0 + 1, L_v0 + 1]`.
    fn cls_attention(&self) -> Result<Tensor>;

    /// Decoder input for the given (possibly pruned) visual tokens: system
    /// prefix, projected visual block, then text.
    fn decoder_input(&self, visual: &TokenSequence) -> Result<TokenSequence>;

    /// Runs decoder layers `layers` (0-based) and returns the hidden states
    /// with the attention map of each layer.
    fn run_layers(&self, seq: TokenSequence, layers: Range<usize>) -> Result<(TokenSequence, Vec<AttentionMap>)>;
}

/// Patch-to-patch block of a head-averaged encoder map with `[CLS]` at
/// index 0, rows renormalised so the block is row-stochastic again.
pub fn patch_block(with_cls: &Tensor) -> Result<Tensor> {
    let (n, m) = with_cls.dims2("patch_block")?;
    if n != m || n < 2 {
        return Err(PipelineError::Shape(format!(
            "encoder map must be square with a [CLS] row, got {n}x{m}"
        )));
    }
    let mut data = Vec::with_capacity((n - 1) * (n - 1));
    for i in 1..n {
        let row = &with_cls.row(i)[1..];
        let sum: f64 = row.iter().map(|&v| v as f64).sum();
        if sum <= 0.0 {
            return Err(PipelineError::Argument(format!(
                "patch {} attends only to [CLS]",
                i - 1
            )));
        }
        data.extend(row.iter().map(|&v| (v as f64 / sum) as f32));
    }
    Ok(Tensor::new(vec![n - 1, n - 1], data)?)
}

/// Keeps the visual tokens whose local (within-visual-block) index is in
/// `keep`, logging scores for the dropped ones. Non-visual tokens pass
/// through untouched.
fn apply_keep(
    seq: &TokenSequence,
    scores: Option<&ImportanceVector>,
    keep: &KeepSet,
) -> Result<(TokenSequence, StageTrace)> {
    let visual = seq.positions(Modality::Visual);
    let origins = seq.visual_origins();
    let mut positions = Vec::with_capacity(seq.len());
    let mut dropped = Vec::new();
    let mut v = 0;
    for p in 0..seq.len() {
        if seq.modalities()[p] != Modality::Visual {
            positions.push(p);
            continue;
        }
        debug_assert_eq!(visual[v], p);
        if keep.contains(v) {
            positions.push(p);
        } else {
            dropped.push(ScoredIndex {
                idx: origins[v],
                score: scores.map_or(0.0, |s| s.get(v)),
            });
        }
        v += 1;
    }
    let out = seq.gather(&positions)?;
    let kept = out.visual_origins();
    Ok((
        out,
        StageTrace {
            tau: keep.threshold,
            kept,
            dropped,
        },
    ))
}

fn clamp_keep(requested: usize, available: usize, stage: &str, warnings: &mut Vec<String>) -> usize {
    if requested == 0 && available > 0 {
        warnings.push(format!(
            "{stage}: schedule would remove every visual token; keeping 1"
        ));
        1
    } else {
        requested.min(available)
    }
}

fn top_k_with_threshold(scores: &ImportanceVector, count: usize) -> Result<KeepSet> {
    let mut keep = select_keep(scores, count)?;
    keep.threshold = Some(threshold_for_count(scores, count));
    Ok(keep)
}

/// Stage 1 on an all-visual sequence: score by attention received in the
/// encoder, keep exactly `count` tokens.
pub fn stage1_prune_to(
    visual: &TokenSequence,
    encoder_attention: &Tensor,
    count: usize,
) -> Result<(TokenSequence, StageTrace)> {
    if visual.count(Modality::Visual) != visual.len() {
        return Err(PipelineError::Argument(
            "stage 1 operates on visual tokens only".into(),
        ));
    }
    let (n, m) = encoder_attention.dims2("stage1_prune")?;
    if n != m || n != visual.len() {
        return Err(PipelineError::Shape(format!(
            "encoder attention is {n}x{m} but there are {} visual tokens",
            visual.len()
        )));
    }
    let scores = visual_self_attn_scores(encoder_attention)?;
    let keep = top_k_with_threshold(&scores, count)?;
    apply_keep(visual, Some(&scores), &keep)
}

/// Stage 1 at ratio `R`: keeps `floor((1 - R) · L_v)` tokens, at least one.
/// A clamp is reported in the returned warnings.
pub fn stage1_prune(
    visual: &TokenSequence,
    encoder_attention: &Tensor,
    ratio: f64,
) -> Result<(TokenSequence, StageTrace, Vec<String>)> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(PipelineError::Argument(format!("R={ratio} must lie in [0, 1)")));
    }
    let mut warnings = Vec::new();
    let count = clamp_keep(
        crate::scoring::keep_count(ratio, visual.len()),
        visual.len(),
        "stage 1",
        &mut warnings,
    );
    let (out, trace) = stage1_prune_to(visual, encoder_attention, count)?;
    Ok((out, trace, warnings))
}

/// Stage 2: score visual tokens by the attention text positions pay them in
/// `map` and keep exactly `count` of them.
pub fn stage2_prune_to(
    seq: &TokenSequence,
    map: &AttentionMap,
    count: usize,
) -> Result<(TokenSequence, StageTrace)> {
    if map.query_len() != seq.len() || map.key_len() != seq.len() {
        return Err(PipelineError::Shape(format!(
            "decoder map is {}x{} but the sequence has {} tokens",
            map.query_len(),
            map.key_len(),
            seq.len()
        )));
    }
    let text = seq.text_range()?;
    let visual = seq.visual_range();
    if visual.is_empty() {
        return Err(PipelineError::Argument("sequence has no visual tokens".into()));
    }
    let block = extract_cross_modal(map, visual, text)?;
    let scores = cross_modal_scores(&block)?;
    let keep = top_k_with_threshold(&scores, count)?;
    apply_keep(seq, Some(&scores), &keep)
}

/// Stage 2 at ratio `P`: drops `floor(P · L_v)` of the visual tokens present,
/// always keeping at least one. A clamp is reported in the returned
/// warnings.
pub fn stage2_prune(
    seq: &TokenSequence,
    map: &AttentionMap,
    ratio: f64,
) -> Result<(TokenSequence, StageTrace, Vec<String>)> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(PipelineError::Argument(format!("P={ratio} must lie in [0, 1)")));
    }
    let lv = seq.count(Modality::Visual);
    let mut warnings = Vec::new();
    let count = clamp_keep(
        lv - crate::scoring::drop_count(ratio, lv),
        lv,
        "stage 2",
        &mut warnings,
    );
    let (out, trace) = stage2_prune_to(seq, map, count)?;
    Ok((out, trace, warnings))
}

/// Result of a pruning run up to its last pruning point.
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub resolved: ResolvedSchedule,
    pub trace: PruneTrace,
    /// Sequence right after the last pruning point: decoder input for
    /// pre-decoder strategies, hidden states at the pivot layer otherwise.
    pub sequence: TokenSequence,
    /// Original visual indices entering the decoder.
    pub stage1_kept: Vec<usize>,
    /// Original visual indices after the decoder-side prune, with its layer.
    pub stage2: Option<(usize, Vec<usize>)>,
}

fn random_keep(len: usize, count: usize, seed: u64) -> KeepSet {
    let mut prng = Prng::new(seed);
    let mut pool: Vec<usize> = (0..len).collect();
    for i in 0..count {
        let j = i + prng.next_below(len - i);
        pool.swap(i, j);
    }
    pool.truncate(count);
    KeepSet::from_indices(pool, len).expect("partial shuffle yields distinct indices")
}

/// Runs `schedule` on `backend` through its last pruning point.
pub fn run_schedule(backend: &impl PruneBackend, schedule: &PruneSchedule) -> Result<PipelineOutput> {
    let visual = backend.visual_tokens()?;
    let lv0 = visual.len();
    let resolved = resolve_schedule(schedule, lv0, backend.num_layers())?;

    let (visual1, stage1) = match resolved.strategy {
        Strategy::Star if resolved.stage1_keep < lv0 => {
            stage1_prune_to(&visual, &backend.encoder_attention()?, resolved.stage1_keep)?
        }
        Strategy::Fastervlm => {
            let scores = cls_attention_scores(&backend.cls_attention()?, 0)?;
            let keep = top_k_with_threshold(&scores, resolved.stage1_keep)?;
            apply_keep(&visual, Some(&scores), &keep)?
        }
        Strategy::Random => {
            let keep = random_keep(lv0, resolved.stage1_keep, schedule.seed);
            apply_keep(&visual, None, &keep)?
        }
        _ => {
            let kept = visual.visual_origins();
            (visual, StageTrace::passthrough(kept))
        }
    };
    let stage1_kept = stage1.kept.clone();

    let input = backend.decoder_input(&visual1)?;
    let (sequence, stage2, stage2_keep) = match resolved.pivot_layer {
        Some(k) if resolved.final_keep < resolved.stage1_keep => {
            let (hidden, maps) = backend.run_layers(input, 0..k)?;
            let map = maps.last().ok_or_else(|| {
                PipelineError::Argument("decoder returned no attention maps".into())
            })?;
            let (seq, trace) = stage2_prune_to(&hidden, map, resolved.final_keep)?;
            let kept = trace.kept.clone();
            (seq, trace, Some((k, kept)))
        }
        _ => (input, StageTrace::passthrough(stage1_kept.clone()), None),
    };

    let trace = PruneTrace {
        final_count: stage2.kept.len(),
        stage1,
        stage2,
        warnings: resolved.warnings.clone(),
    };
    Ok(PipelineOutput {
        resolved,
        trace,
        sequence,
        stage1_kept,
        stage2: stage2_keep,
    })
}

/// Single-stage baseline with a remaining-token budget.
pub fn run_baseline(
    backend: &impl PruneBackend,
    strategy: Strategy,
    budget: usize,
    seed: u64,
) -> Result<(TokenSequence, PruneTrace)> {
    if strategy == Strategy::Star {
        return Err(PipelineError::Argument(
            "run_baseline takes a baseline strategy, not star".into(),
        ));
    }
    let schedule = PruneSchedule {
        strategy,
        seed,
        target_remaining: (strategy != Strategy::None).then_some(budget),
        ..PruneSchedule::default()
    };
    let out = run_schedule(backend, &schedule)?;
    Ok((out.sequence, out.trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::random_tensor;

    fn uniform(n: usize) -> Tensor {
        Tensor::full(vec![n, n], 1.0 / n as f32)
    }

    #[test]
    fn stage1_identity_at_zero_ratio() {
        let v = TokenSequence::visual(Tensor::zeros(vec![576, 2])).unwrap();
        let (out, trace, _) = stage1_prune(&v, &uniform(576), 0.0).unwrap();
        assert_eq!(out.len(), 576);
        assert!(trace.dropped.is_empty());
    }

    #[test]
    fn stage1_count_at_ten_percent() {
        let v = TokenSequence::visual(Tensor::zeros(vec![576, 2])).unwrap();
        let (out, _, _) = stage1_prune(&v, &uniform(576), 0.1).unwrap();
        assert_eq!(out.len(), 518);
    }

    #[test]
    fn stage1_uniform_tie_break() {
        let v = TokenSequence::visual(random_tensor(vec![4, 3], &mut Prng::new(1), 1.0)).unwrap();
        let (out, trace, _) = stage1_prune(&v, &uniform(4), 0.5).unwrap();
        assert_eq!(trace.kept, vec![0, 1]);
        assert_eq!(trace.tau, Some(f32::INFINITY));
        assert_eq!(out.embeddings(), &v.embeddings().gather_rows(&[0, 1]).unwrap());
        assert!(stage1_prune(&v, &uniform(5), 0.5).is_err());
    }

    fn small_decoder_case() -> (TokenSequence, AttentionMap) {
        // system, 3 visual, 2 query; text rows favour visual origin 2 then 0.
        use Modality::*;
        let seq = TokenSequence::new(
            Tensor::zeros(vec![6, 2]),
            vec![0, 0, 1, 2, 0, 1],
            vec![System, Visual, Visual, Visual, Query, Query],
        )
        .unwrap();
        let rows: [&[f32]; 6] = [
            &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            &[0.5, 0.5, 0.0, 0.0, 0.0, 0.0],
            &[0.4, 0.3, 0.3, 0.0, 0.0, 0.0],
            &[0.25, 0.25, 0.25, 0.25, 0.0, 0.0],
            &[0.1, 0.3, 0.1, 0.4, 0.1, 0.0],
            &[0.1, 0.2, 0.0, 0.5, 0.1, 0.1],
        ];
        let map = AttentionMap::from_weights(
            Tensor::from_rows(&rows).unwrap().reshape(vec![1, 6, 6]).unwrap(),
            1e-6,
        )
        .unwrap();
        (seq, map)
    }

    #[test]
    fn stage2_keeps_text_and_top_visual() {
        let (seq, map) = small_decoder_case();
        let (out, trace) = stage2_prune_to(&seq, &map, 2).unwrap();
        assert_eq!(trace.kept, vec![0, 2]);
        assert_eq!(trace.dropped.len(), 1);
        assert_eq!(trace.dropped[0].idx, 1);
        assert!((trace.dropped[0].score - 0.05).abs() < 1e-7);
        assert_eq!(out.count(Modality::System), 1);
        assert_eq!(out.count(Modality::Query), 2);
    }

    #[test]
    fn stage2_identity_at_zero_and_clamp() {
        let (seq, map) = small_decoder_case();
        let (out, trace, warn) = stage2_prune(&seq, &map, 0.0).unwrap();
        assert_eq!(out, seq);
        assert!(trace.dropped.is_empty() && warn.is_empty());

        let (out, _, warn) = stage2_prune(&seq, &map, 0.99).unwrap();
        // floor(0.99 * 3) = 2 dropped, so no clamp needed yet.
        assert_eq!(out.count(Modality::Visual), 1);
        assert!(warn.is_empty());
    }

    #[test]
    fn stage2_needs_text() {
        use Modality::*;
        let seq = TokenSequence::new(Tensor::zeros(vec![2, 1]), vec![0, 1], vec![Visual, Visual]).unwrap();
        let map = AttentionMap::from_weights(
            Tensor::from_rows(&[&[1.0, 0.0], &[0.5, 0.5]]).unwrap().reshape(vec![1, 2, 2]).unwrap(),
            1e-6,
        )
        .unwrap();
        assert!(matches!(stage2_prune_to(&seq, &map, 1), Err(PipelineError::Argument(_))));
    }

    #[test]
    fn patch_block_renormalises() {
        let with_cls = Tensor::from_rows(&[&[0.5, 0.25, 0.25], &[0.5, 0.25, 0.25], &[0.2, 0.2, 0.6]]).unwrap();
        let b = patch_block(&with_cls).unwrap();
        assert_eq!(b.data(), &[0.5, 0.5, 0.25, 0.75]);
    }

    #[test]
    fn random_keep_is_seeded() {
        assert_eq!(random_keep(64, 10, 9), random_keep(64, 10, 9));
        assert_ne!(random_keep(64, 10, 9), random_keep(64, 10, 10));
        assert_eq!(random_keep(5, 5, 1).indices(), &[0, 1, 2, 3, 4]);
    }
}
