//! Offline backend over recorded attention dumps.
//!
//! The decoder maps are recorded once on the unpruned sequence (including any
//! generated response tokens). After pruning, the map for the surviving
//! tokens is the recorded one restricted to their positions, with each row
//! renormalised over the keys that remain.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::attention::{head_average, role_spans, AttentionMap, Modality};
use crate::tensor::Tensor;

use super::{patch_block, project_and_concat, PipelineError, PruneBackend, Result, TokenSequence};

/// Token counts of the recorded sequence, laid out
/// `[system; visual; query; response]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureLayout {
    pub system: usize,
    pub visual: usize,
    pub query: usize,
    pub response: usize,
}

impl FixtureLayout {
    pub fn total(&self) -> usize {
        self.system + self.visual + self.query + self.response
    }

    pub fn text(&self) -> usize {
        self.system + self.query + self.response
    }

    fn position(&self, m: Modality, origin: usize) -> Result<usize> {
        let (base, count) = match m {
            Modality::System => (0, self.system),
            Modality::Visual => (self.system, self.visual),
            Modality::Query => (self.system + self.visual, self.query),
            Modality::Response => (self.system + self.visual + self.query, self.response),
            Modality::Cls => (0, 0),
        };
        if origin >= count {
            return Err(PipelineError::Argument(format!(
                "{m:?} token {origin} not present in fixture layout {self:?}"
            )));
        }
        Ok(base + origin)
    }
}

#[derive(Clone, Debug)]
pub struct FixtureBackend {
    layout: FixtureLayout,
    encoder_with_cls: Tensor,
    visual_embeddings: Tensor,
    projector: Tensor,
    text_embeddings: Tensor,
    decoder_maps: Vec<AttentionMap>,
}

fn expect_shape(name: &str, t: &Tensor, want: &[usize]) -> Result<()> {
    if t.shape() != want {
        return Err(PipelineError::Shape(format!(
            "{name} has shape {:?}, expected {want:?}",
            t.shape()
        )));
    }
    Ok(())
}

impl FixtureBackend {
    /// * `encoder_attention`: `[heads, L_v0 + 1, L_v0 + 1]`, `[CLS]` first
    /// * `visual_embeddings`: `[L_v0, d_enc]`
    /// * `projector`: `[d_enc, d_dec]`
    /// * `text_embeddings`: `[system + query + response, d_dec]`, in that order
    /// * `decoder_maps`: one `[heads, L, L]` map per layer over the full layout
    pub fn new(
        layout: FixtureLayout,
        encoder_attention: AttentionMap,
        visual_embeddings: Tensor,
        projector: Tensor,
        text_embeddings: Tensor,
        decoder_maps: Vec<AttentionMap>,
    ) -> Result<Self> {
        let lv = layout.visual;
        let enc = encoder_attention.weights();
        if enc.shape()[1..] != [lv + 1, lv + 1] {
            return Err(PipelineError::Shape(format!(
                "encoder attention has shape {:?}, expected [heads, {}, {}]",
                enc.shape(),
                lv + 1,
                lv + 1
            )));
        }
        let (_, d_enc) = visual_embeddings.dims2("visual embeddings")?;
        expect_shape("visual embeddings", &visual_embeddings, &[lv, d_enc])?;
        let (_, d_dec) = projector.dims2("projector")?;
        expect_shape("projector", &projector, &[d_enc, d_dec])?;
        expect_shape("text embeddings", &text_embeddings, &[layout.text(), d_dec])?;
        if layout.query + layout.response == 0 {
            return Err(PipelineError::Argument("fixture has no text tokens".into()));
        }
        if decoder_maps.is_empty() {
            return Err(PipelineError::Argument("fixture has no decoder layers".into()));
        }
        let total = layout.total();
        for (i, m) in decoder_maps.iter().enumerate() {
            if m.query_len() != total || m.key_len() != total {
                return Err(PipelineError::Shape(format!(
                    "decoder layer {} map has shape {:?}, expected [heads, {total}, {total}]",
                    i + 1,
                    m.weights().shape()
                )));
            }
        }
        Ok(Self {
            layout,
            encoder_with_cls: head_average(&encoder_attention),
            visual_embeddings,
            projector,
            text_embeddings,
            decoder_maps,
        })
    }

    pub fn layout(&self) -> FixtureLayout {
        self.layout
    }

    fn text_block(&self, range: Range<usize>, m: Modality) -> Result<TokenSequence> {
        let rows: Vec<usize> = range.collect();
        TokenSequence::uniform(self.text_embeddings.gather_rows(&rows)?, m)
    }
}

fn renormalised(map: &AttentionMap, positions: &[usize]) -> Result<AttentionMap> {
    let sub = map.select(positions)?;
    let n = positions.len();
    let mut data = sub.into_data();
    for row in data.chunks_mut(n.max(1)) {
        let sum: f64 = row.iter().map(|&v| v as f64).sum();
        if sum <= 0.0 {
            return Err(PipelineError::Argument(
                "a recorded attention row has no mass on the surviving tokens".into(),
            ));
        }
        row.iter_mut().for_each(|v| *v = (*v as f64 / sum) as f32);
    }
    let heads = map.num_heads();
    Ok(AttentionMap::from_weights(Tensor::new(vec![heads, n, n], data)?, 1e-5)?)
}

impl PruneBackend for FixtureBackend {
    fn num_layers(&self) -> usize {
        self.decoder_maps.len()
    }

    fn visual_tokens(&self) -> Result<TokenSequence> {
        TokenSequence::visual(self.visual_embeddings.clone())
    }

    fn encoder_attention(&self) -> Result<Tensor> {
        patch_block(&self.encoder_with_cls)
    }

    fn cls_attention(&self) -> Result<Tensor> {
        Ok(self.encoder_with_cls.clone())
    }

    fn decoder_input(&self, visual: &TokenSequence) -> Result<TokenSequence> {
        let l = self.layout;
        let system = self.text_block(0..l.system, Modality::System)?;
        let query = self.text_block(l.system..l.system + l.query, Modality::Query)?;
        let response = self.text_block(l.system + l.query..l.text(), Modality::Response)?;
        let text = TokenSequence::concat(&[&query, &response])?;
        let tail = project_and_concat(visual, &self.projector, &text)?;
        TokenSequence::concat(&[&system, &tail])
    }

    fn run_layers(&self, seq: TokenSequence, layers: Range<usize>) -> Result<(TokenSequence, Vec<AttentionMap>)> {
        if layers.end > self.decoder_maps.len() {
            return Err(PipelineError::Argument(format!(
                "layers {layers:?} exceed the {} recorded",
                self.decoder_maps.len()
            )));
        }
        let positions = seq
            .modalities()
            .iter()
            .zip(seq.origins())
            .map(|(&m, &o)| self.layout.position(m, o))
            .collect::<Result<Vec<_>>>()?;
        let spans = role_spans(seq.modalities());
        let maps = layers
            .map(|l| {
                renormalised(&self.decoder_maps[l], &positions)
                    .map(|m| m.with_roles(spans.clone(), spans.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((seq, maps))
    }
}
