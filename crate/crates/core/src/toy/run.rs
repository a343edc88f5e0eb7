use std::ops::Range;

use serde::Serialize;

use crate::attention::{head_average, role_spans, AttentionMap, Modality};
use crate::pipeline::{
    patch_block, project_and_concat, run_schedule, PipelineError, PruneBackend, PruneSchedule, PruneTrace,
    ResolvedSchedule, TokenSequence,
};
use crate::tensor::{random_tensor, Prng, Tensor};

use super::fidelity::{argmax, fidelity, FidelityMetrics, StepOutputs};
use super::{Encoded, Result, ToyError, ToyModel};

/// One image plus its text prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyInputs {
    /// `[L_v0, patch_dim]`
    pub patches: Tensor,
    pub system: Vec<u32>,
    pub query: Vec<u32>,
}

impl ToyInputs {
    /// Uniform patches in `[-1, 1)` and uniform token ids, all from `seed`.
    pub fn seeded(model: &ToyModel, seed: u64, system_len: usize, query_len: usize) -> Self {
        let cfg = &model.cfg;
        let mut prng = Prng::new(seed);
        let patches = random_tensor(vec![cfg.visual_tokens, cfg.patch_dim], &mut prng.fork(), 1.0);
        let mut ids = prng.fork();
        let mut draw = |n: usize| -> Vec<u32> { (0..n).map(|_| ids.next_below(cfg.vocab) as u32).collect() };
        let system = draw(system_len);
        let query = draw(query_len);
        Self { patches, system, query }
    }
}

/// [`PruneBackend`] over the toy model for one encoded image and prompt.
#[derive(Clone, Debug)]
pub struct ToyBackend<'m> {
    model: &'m ToyModel,
    encoded: Encoded,
    system: Vec<u32>,
    query: Vec<u32>,
    response: Vec<u32>,
}

impl<'m> ToyBackend<'m> {
    pub fn new(model: &'m ToyModel, inputs: &ToyInputs) -> Result<Self> {
        if inputs.query.is_empty() {
            return Err(ToyError::Argument("the query must contain at least one token".into()));
        }
        Ok(Self {
            model,
            encoded: model.encode_image(&inputs.patches)?,
            system: inputs.system.clone(),
            query: inputs.query.clone(),
            response: Vec::new(),
        })
    }

    pub fn encoded(&self) -> &Encoded {
        &self.encoded
    }

    /// Same image and prompt with `response` appended after the query.
    pub fn with_response(&self, response: &[u32]) -> Self {
        Self {
            response: response.to_vec(),
            ..self.clone()
        }
    }

    fn scoring_map(&self) -> Tensor {
        head_average(&self.encoded.maps[self.model.cfg.scoring_layer()])
    }

    fn text(&self, ids: &[u32], m: Modality) -> Result<TokenSequence> {
        Ok(TokenSequence::uniform(self.model.embed_tokens(ids)?, m)?)
    }

    /// Next-token logits and final hidden state at the last position, with
    /// the given visual survivors entering the decoder and, optionally, a
    /// second keep set applied after decoder layer `k`.
    fn last_step(&self, stage1_kept: &[usize], stage2: Option<&(usize, Vec<usize>)>) -> Result<(Vec<f32>, Vec<f32>)> {
        let visual = self.visual_tokens()?.gather(stage1_kept)?;
        let seq = self.decoder_input(&visual)?;
        let layers = self.model.decoder.len();
        let hidden = match stage2 {
            Some((k, keep)) => {
                let (h, _) = self.model.run_decoder_layers(seq.embeddings(), 0..*k)?;
                let seq = seq.with_embeddings(h)?;
                let positions: Vec<usize> = (0..seq.len())
                    .filter(|&i| seq.modalities()[i] != Modality::Visual || keep.contains(&seq.origins()[i]))
                    .collect();
                let pruned = seq.gather(&positions)?;
                self.model.run_decoder_layers(pruned.embeddings(), *k..layers)?.0
            }
            None => self.model.run_decoder_layers(seq.embeddings(), 0..layers)?.0,
        };
        let last = hidden.gather_rows(&[hidden.shape()[0] - 1])?;
        let logits = self.model.logits(&last)?;
        Ok((logits.into_data(), last.into_data()))
    }
}

impl PruneBackend for ToyBackend<'_> {
    fn num_layers(&self) -> usize {
        self.model.decoder.len()
    }

    fn visual_tokens(&self) -> crate::pipeline::Result<TokenSequence> {
        TokenSequence::visual(self.encoded.tokens.clone())
    }

    fn encoder_attention(&self) -> crate::pipeline::Result<Tensor> {
        patch_block(&self.scoring_map())
    }

    fn cls_attention(&self) -> crate::pipeline::Result<Tensor> {
        Ok(self.scoring_map())
    }

    fn decoder_input(&self, visual: &TokenSequence) -> crate::pipeline::Result<TokenSequence> {
        let system = self.text(&self.system, Modality::System)?;
        let query = self.text(&self.query, Modality::Query)?;
        let response = self.text(&self.response, Modality::Response)?;
        let text = TokenSequence::concat(&[&query, &response])?;
        let tail = project_and_concat(visual, &self.model.projector, &text)?;
        TokenSequence::concat(&[&system, &tail])
    }

    fn run_layers(
        &self,
        seq: TokenSequence,
        layers: Range<usize>,
    ) -> crate::pipeline::Result<(TokenSequence, Vec<AttentionMap>)> {
        let (hidden, maps) = self
            .model
            .run_decoder_layers(seq.embeddings(), layers)
            .map_err(PipelineError::from)?;
        let spans = role_spans(seq.modalities());
        let maps = maps
            .into_iter()
            .map(|m| m.with_roles(spans.clone(), spans.clone()))
            .collect();
        Ok((seq.with_embeddings(hidden)?, maps))
    }
}

/// Outcome of one pruned generation compared with the unpruned reference.
#[derive(Clone, Debug, Serialize)]
pub struct ToyRun {
    /// Greedy tokens generated by the pruned model.
    pub generated: Vec<u32>,
    /// Greedy tokens generated without pruning.
    pub reference: Vec<u32>,
    pub trace: PruneTrace,
    pub resolved: ResolvedSchedule,
    pub fidelity: FidelityMetrics,
}

/// Unpruned greedy continuation and its per-step outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Reference {
    pub tokens: Vec<u32>,
    pub outputs: StepOutputs,
}

/// Greedy decoding of `steps` tokens with every visual token kept.
pub fn reference_run(model: &ToyModel, inputs: &ToyInputs, steps: usize) -> Result<Reference> {
    if steps == 0 {
        return Err(ToyError::Argument("generation needs at least one step".into()));
    }
    let backend = ToyBackend::new(model, inputs)?;
    let all: Vec<usize> = (0..model.cfg.visual_tokens).collect();
    let mut tokens = Vec::with_capacity(steps);
    let mut logits = Vec::with_capacity(steps * model.cfg.vocab);
    let mut final_hidden = Vec::new();
    for _ in 0..steps {
        let (step_logits, hidden) = backend.with_response(&tokens).last_step(&all, None)?;
        tokens.push(argmax(&step_logits) as u32);
        logits.extend(step_logits);
        final_hidden = hidden;
    }
    Ok(Reference {
        tokens,
        outputs: StepOutputs {
            logits: Tensor::new(vec![steps, model.cfg.vocab], logits)?,
            final_hidden,
        },
    })
}

/// Prunes once on the prompt, then decodes `steps` tokens greedily and
/// compares against a fresh unpruned run.
pub fn run_with_schedule(
    model: &ToyModel,
    inputs: &ToyInputs,
    schedule: &PruneSchedule,
    steps: usize,
) -> Result<ToyRun> {
    let reference = reference_run(model, inputs, steps)?;
    run_against(model, inputs, schedule, &reference)
}

/// [`run_with_schedule`] with a precomputed reference.
///
/// Keep sets are fixed at prefill and reused for every generated token, as
/// a KV cache would. Fidelity is teacher-forced: the pruned model scores the
/// reference continuation, so step `t` compares next-token distributions on
/// the same prefix.
pub fn run_against(
    model: &ToyModel,
    inputs: &ToyInputs,
    schedule: &PruneSchedule,
    reference: &Reference,
) -> Result<ToyRun> {
    let steps = reference.tokens.len();
    let backend = ToyBackend::new(model, inputs)?;
    let out = run_schedule(&backend, schedule)?;
    let stage2 = out.stage2.as_ref();

    let mut logits = Vec::with_capacity(steps * model.cfg.vocab);
    let mut final_hidden = Vec::new();
    for t in 0..steps {
        let (step_logits, hidden) = backend
            .with_response(&reference.tokens[..t])
            .last_step(&out.stage1_kept, stage2)?;
        logits.extend(step_logits);
        final_hidden = hidden;
    }

    let mut generated = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (step_logits, _) = backend
            .with_response(&generated)
            .last_step(&out.stage1_kept, stage2)?;
        generated.push(argmax(&step_logits) as u32);
    }

    let pruned = StepOutputs {
        logits: Tensor::new(vec![steps, model.cfg.vocab], logits)?,
        final_hidden,
    };
    Ok(ToyRun {
        generated,
        reference: reference.tokens.clone(),
        trace: out.trace,
        resolved: out.resolved,
        fidelity: fidelity(&reference.outputs, &pruned)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::Strategy;
    use crate::toy::ToyConfig;

    fn model() -> ToyModel {
        ToyModel::init_seeded(ToyConfig {
            d_enc: 16,
            d_dec: 16,
            heads: 2,
            encoder_layers: 3,
            decoder_layers: 4,
            visual_tokens: 16,
            patch_dim: 8,
            vocab: 40,
            seed: 9,
            encoder_attention_layer: None,
        })
        .unwrap()
    }

    #[test]
    fn unpruned_run_matches_reference_exactly() {
        let m = model();
        let inputs = ToyInputs::seeded(&m, 3, 2, 4);
        let run = run_with_schedule(&m, &inputs, &PruneSchedule::none(), 4).unwrap();
        assert_eq!(run.generated, run.reference);
        assert_eq!(run.fidelity.top1_agreement, 1.0);
        assert_eq!(run.fidelity.kl_nats, 0.0);
        assert_eq!(run.fidelity.cosine, 1.0);
        assert_eq!(run.trace.final_count, 16);
    }

    #[test]
    fn star_run_respects_counts() {
        let m = model();
        let inputs = ToyInputs::seeded(&m, 3, 2, 4);
        let schedule = PruneSchedule::star(0.25, 0.5, 2);
        let run = run_with_schedule(&m, &inputs, &schedule, 3).unwrap();
        assert_eq!(run.trace.stage1.kept.len(), 12);
        assert_eq!(run.trace.final_count, 6);
        assert!(run.trace.stage2.kept.iter().all(|i| run.trace.stage1.kept.contains(i)));
        assert_eq!(run.generated.len(), 3);
        assert!(run.fidelity.kl_nats >= 0.0);
    }

    #[test]
    fn runs_are_deterministic() {
        let m = model();
        let inputs = ToyInputs::seeded(&m, 4, 2, 4);
        for strategy in [Strategy::Star, Strategy::Fastv, Strategy::Fastervlm, Strategy::Random] {
            let s = PruneSchedule::default().with_strategy(strategy).with_target(5);
            let a = run_with_schedule(&m, &inputs, &s, 2).unwrap();
            let b = run_with_schedule(&m, &inputs, &s, 2).unwrap();
            assert_eq!(a.trace, b.trace);
            assert_eq!(a.generated, b.generated);
            assert_eq!(a.trace.final_count, 5, "{strategy}");
        }
    }

    #[test]
    fn empty_query_is_rejected() {
        let m = model();
        let mut inputs = ToyInputs::seeded(&m, 4, 2, 4);
        inputs.query.clear();
        assert!(run_with_schedule(&m, &inputs, &PruneSchedule::none(), 1).is_err());
    }
}
