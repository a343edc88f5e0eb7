//! Attention-dump fixtures on disk: STT tensors plus `manifest.json`.

use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use star_core::attention::AttentionMap;
use star_core::pipeline::fixture::{FixtureBackend, FixtureLayout};
use star_core::pipeline::PruneBackend;
use star_core::tensor::stt;
use star_core::toy::{reference_run, ToyBackend, ToyConfig, ToyInputs, ToyModel};
use star_core::Tensor;

use crate::config::PromptConfig;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub layout: FixtureLayout,
    /// Patch grid `[height, width]`.
    pub grid: [usize; 2],
    pub toy: ToyConfig,
    /// 1-based encoder layer the encoder attention was taken from.
    pub encoder_layer: usize,
    /// Generated response token ids included in the decoder dumps.
    pub response_ids: Vec<u32>,
    pub encoder_attention: FileEntry,
    pub visual_embeddings: FileEntry,
    pub projector: FileEntry,
    pub text_embeddings: FileEntry,
    pub decoder_attention: Vec<FileEntry>,
}

fn entry(dir: &Path, name: String, t: &Tensor) -> anyhow::Result<FileEntry> {
    let path = dir.join(&name);
    stt::write(t, &path).with_context(|| format!("writing {}", path.display()))?;
    Ok(FileEntry {
        path: name,
        shape: t.shape().to_vec(),
    })
}

/// Runs the toy model unpruned (prompt plus a greedy response) and dumps
/// the tensors a [`FixtureBackend`] needs.
pub fn generate(
    dir: &Path,
    cfg: ToyConfig,
    prompt: &PromptConfig,
    grid: (usize, usize),
) -> anyhow::Result<Manifest> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let seed = cfg.seed;
    let model = ToyModel::init_seeded(cfg)?;
    let inputs = ToyInputs::seeded(&model, seed, prompt.system_tokens, prompt.query_tokens);
    let reference = reference_run(&model, &inputs, prompt.steps)?;
    let backend = ToyBackend::new(&model, &inputs)?.with_response(&reference.tokens);
    let seq = backend.decoder_input(&backend.visual_tokens()?)?;
    let decoded = model.decode(&seq)?;

    let ids: Vec<u32> = inputs
        .system
        .iter()
        .chain(&inputs.query)
        .chain(&reference.tokens)
        .copied()
        .collect();
    let layer = model.cfg.scoring_layer();
    let manifest = Manifest {
        seed,
        layout: FixtureLayout {
            system: inputs.system.len(),
            visual: model.cfg.visual_tokens,
            query: inputs.query.len(),
            response: reference.tokens.len(),
        },
        grid: [grid.0, grid.1],
        encoder_layer: layer + 1,
        response_ids: reference.tokens.clone(),
        encoder_attention: entry(
            dir,
            "encoder_attention.stt".into(),
            backend.encoded().maps[layer].weights(),
        )?,
        visual_embeddings: entry(dir, "visual_embeddings.stt".into(), &backend.encoded().tokens)?,
        projector: entry(dir, "projector.stt".into(), &model.projector)?,
        text_embeddings: entry(dir, "text_embeddings.stt".into(), &model.embed_tokens(&ids)?)?,
        decoder_attention: decoded
            .maps
            .iter()
            .enumerate()
            .map(|(i, m)| entry(dir, format!("decoder_attention_{:02}.stt", i + 1), m.weights()))
            .collect::<anyhow::Result<_>>()?,
        toy: model.cfg,
    };
    let json = serde_json::to_string_pretty(&manifest)? + "\n";
    std::fs::write(dir.join(MANIFEST), json).with_context(|| format!("writing manifest in {}", dir.display()))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> anyhow::Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load(dir: &Path, e: &FileEntry, expected: &[usize]) -> anyhow::Result<Tensor> {
    let path = dir.join(&e.path);
    let t = stt::read(&path).with_context(|| format!("reading {}", path.display()))?;
    if t.shape() != expected {
        bail!(
            "{} has shape {:?}, expected {:?}",
            path.display(),
            t.shape(),
            expected
        );
    }
    if e.shape != expected {
        bail!(
            "manifest lists {} with shape {:?}, expected {:?}",
            e.path,
            e.shape,
            expected
        );
    }
    Ok(t)
}

/// Loads a fixture directory, checking every file against the shapes the
/// manifest's layout and widths imply.
pub fn load_backend(dir: &Path) -> anyhow::Result<(FixtureBackend, Manifest)> {
    let m = read_manifest(dir)?;
    let l = m.layout;
    let (h, d_enc, d_dec) = (m.toy.heads, m.toy.d_enc, m.toy.d_dec);
    let total = l.total();
    let enc = load(dir, &m.encoder_attention, &[h, l.visual + 1, l.visual + 1])?;
    let visual = load(dir, &m.visual_embeddings, &[l.visual, d_enc])?;
    let projector = load(dir, &m.projector, &[d_enc, d_dec])?;
    let text = load(dir, &m.text_embeddings, &[l.text(), d_dec])?;
    if m.decoder_attention.is_empty() {
        bail!("{} lists no decoder attention files", dir.join(MANIFEST).display());
    }
    let decoder = m
        .decoder_attention
        .iter()
        .map(|e| {
            let t = load(dir, e, &[h, total, total])?;
            AttentionMap::from_weights(t, 1e-5).with_context(|| format!("{} is not an attention map", e.path))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let enc = AttentionMap::from_weights(enc, 1e-5)
        .with_context(|| format!("{} is not an attention map", m.encoder_attention.path))?;
    let backend = FixtureBackend::new(l, enc, visual, projector, text, decoder)?;
    Ok((backend, m))
}
