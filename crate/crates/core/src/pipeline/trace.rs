use serde::{Deserialize, Serialize, Serializer};

/// An original visual token index with the score it had when judged.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredIndex {
    pub idx: usize,
    pub score: f32,
}

/// One pruning stage: threshold (if any), kept original indices ascending,
/// and the dropped tokens with their scores.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    #[serde(serialize_with = "finite_or_null")]
    pub tau: Option<f32>,
    pub kept: Vec<usize>,
    pub dropped: Vec<ScoredIndex>,
}

impl StageTrace {
    /// A stage that removed nothing.
    pub fn passthrough(kept: Vec<usize>) -> Self {
        Self {
            tau: None,
            kept,
            dropped: Vec::new(),
        }
    }
}

/// Provenance of a full run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PruneTrace {
    pub stage1: StageTrace,
    pub stage2: StageTrace,
    pub final_count: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl PruneTrace {
    pub fn original_count(&self) -> usize {
        self.stage1.kept.len() + self.stage1.dropped.len()
    }
}

// JSON has no infinity; an all-ties threshold is written as null.
fn finite_or_null<S: Serializer>(tau: &Option<f32>, s: S) -> Result<S::Ok, S::Error> {
    match tau {
        Some(t) if t.is_finite() => s.serialize_some(t),
        _ => s.serialize_none(),
    }
}
