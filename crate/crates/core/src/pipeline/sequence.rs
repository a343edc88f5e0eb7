use std::ops::Range;

use crate::attention::Modality;
use crate::tensor::{matmul, Tensor};

use super::{PipelineError, Result};

/// Embeddings with per-token provenance.
///
/// `origin` is the token's index within its modality in the unpruned input;
/// it survives every gather so traces can always name original tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    embeddings: Tensor,
    origin: Vec<usize>,
    modality: Vec<Modality>,
}

impl TokenSequence {
    pub fn new(embeddings: Tensor, origin: Vec<usize>, modality: Vec<Modality>) -> Result<Self> {
        let (len, _) = embeddings.dims2("token sequence")?;
        if origin.len() != len || modality.len() != len {
            return Err(PipelineError::Argument(format!(
                "sequence of {len} embeddings has {} origins and {} modality tags",
                origin.len(),
                modality.len()
            )));
        }
        let seq = Self {
            embeddings,
            origin,
            modality,
        };
        seq.validate()?;
        Ok(seq)
    }

    /// All-visual sequence with origins `0..L`.
    pub fn visual(embeddings: Tensor) -> Result<Self> {
        Self::uniform(embeddings, Modality::Visual)
    }

    /// Sequence of one modality with origins `0..L`.
    pub fn uniform(embeddings: Tensor, modality: Modality) -> Result<Self> {
        let (len, _) = embeddings.dims2("token sequence")?;
        Self::new(embeddings, (0..len).collect(), vec![modality; len])
    }

    fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (o, m) in self.origin.iter().zip(&self.modality) {
            if !seen.insert((*m, *o)) {
                return Err(PipelineError::Argument(format!(
                    "duplicate origin {o} within {m:?} tokens"
                )));
            }
        }
        let visual: Vec<usize> = self.positions(Modality::Visual);
        if let (Some(&first), Some(&last)) = (visual.first(), visual.last()) {
            if last - first + 1 != visual.len() {
                return Err(PipelineError::Argument(
                    "visual tokens must form one contiguous block".into(),
                ));
            }
            if self.modality[..first].iter().any(|m| m.is_text()) {
                return Err(PipelineError::Argument(
                    "visual tokens must precede query and response tokens".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.origin.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origin.is_empty()
    }

    pub fn width(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn origins(&self) -> &[usize] {
        &self.origin
    }

    pub fn modalities(&self) -> &[Modality] {
        &self.modality
    }

    pub fn positions(&self, m: Modality) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.modality[i] == m).collect()
    }

    pub fn count(&self, m: Modality) -> usize {
        self.modality.iter().filter(|&&x| x == m).count()
    }

    /// Origins of the visual tokens, in sequence order.
    pub fn visual_origins(&self) -> Vec<usize> {
        self.positions(Modality::Visual)
            .into_iter()
            .map(|p| self.origin[p])
            .collect()
    }

    /// Position range of the visual block (empty range if none).
    pub fn visual_range(&self) -> Range<usize> {
        let pos = self.positions(Modality::Visual);
        match (pos.first(), pos.last()) {
            (Some(&a), Some(&b)) => a..b + 1,
            _ => 0..0,
        }
    }

    /// Position range of the query/response tokens, which must be contiguous.
    pub fn text_range(&self) -> Result<Range<usize>> {
        let pos: Vec<usize> = (0..self.len()).filter(|&i| self.modality[i].is_text()).collect();
        match (pos.first(), pos.last()) {
            (Some(&a), Some(&b)) if b - a + 1 == pos.len() => Ok(a..b + 1),
            (Some(_), Some(_)) => Err(PipelineError::Argument(
                "query/response tokens must be contiguous".into(),
            )),
            _ => Err(PipelineError::Argument(
                "sequence has no query or response tokens".into(),
            )),
        }
    }

    /// Tokens at `positions`, in the given order.
    pub fn gather(&self, positions: &[usize]) -> Result<Self> {
        Self::new(
            self.embeddings.gather_rows(positions)?,
            positions.iter().map(|&p| self.origin[p]).collect(),
            positions.iter().map(|&p| self.modality[p]).collect(),
        )
    }

    /// Same provenance, new embeddings (e.g. hidden states after a layer).
    pub fn with_embeddings(&self, embeddings: Tensor) -> Result<Self> {
        Self::new(embeddings, self.origin.clone(), self.modality.clone())
    }

    pub fn concat(parts: &[&TokenSequence]) -> Result<Self> {
        let tensors: Vec<&Tensor> = parts.iter().map(|p| &p.embeddings).collect();
        Self::new(
            Tensor::concat_rows(&tensors)?,
            parts.iter().flat_map(|p| p.origin.iter().copied()).collect(),
            parts.iter().flat_map(|p| p.modality.iter().copied()).collect(),
        )
    }
}

/// Projects the visual tokens into decoder width and appends the query
/// block: `[g(visual); query]`.
pub fn project_and_concat(
    visual: &TokenSequence,
    projector: &Tensor,
    query: &TokenSequence,
) -> Result<TokenSequence> {
    let (d_in, d_out) = projector.dims2("projector")?;
    if visual.width() != d_in {
        return Err(PipelineError::Shape(format!(
            "projector expects width {d_in}, visual tokens have width {}",
            visual.width()
        )));
    }
    if !query.is_empty() && query.width() != d_out {
        return Err(PipelineError::Shape(format!(
            "projector output width {d_out} does not match query width {}",
            query.width()
        )));
    }
    let projected = visual.with_embeddings(matmul(visual.embeddings(), projector)?)?;
    if query.is_empty() {
        return Ok(projected);
    }
    TokenSequence::concat(&[&projected, query])
}
