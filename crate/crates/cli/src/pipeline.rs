//! Corpus, hook activations and checkpoint loading shared by the commands.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use steerlab_core::checkpoint::{model_from_bytes, sae_from_bytes, LoadedModel};
use steerlab_core::lm::{generate_corpus, CorpusConfig, ToyLm, TranscriptCorpus, Vocabulary};
use steerlab_core::sae::HookCorpus;
use steerlab_core::{Result, SaeModel};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::output::RunOutput;

pub fn corpus(cfg: &RunConfig) -> Result<TranscriptCorpus> {
    generate_corpus(&cfg.corpus, &Vocabulary::game(), cfg.model.context_window, cfg.seed)
}

/// Where an SAE's training activations came from. Stored in the SAE
/// checkpoint so later commands can rebuild the same rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HookSource {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub held_out_fraction: f64,
    pub transcripts: usize,
    pub layer: usize,
}

impl HookSource {
    pub fn from_config(cfg: &RunConfig, layer: usize) -> Self {
        HookSource {
            seed: cfg.seed,
            corpus: cfg.corpus.clone(),
            held_out_fraction: cfg.train.held_out_fraction,
            transcripts: cfg.hook.transcripts,
            layer,
        }
    }

    pub fn from_meta(meta: &serde_json::Value) -> Option<Self> {
        serde_json::from_value(meta.get("hook")?.clone()).ok()
    }

    /// Leading transcripts of the training split, run through `model`.
    pub fn collect(&self, model: &ToyLm) -> Result<HookCorpus> {
        let corpus = generate_corpus(&self.corpus, model.vocab(), model.config().context_window, self.seed)?;
        self.collect_from(model, &corpus)
    }

    pub fn collect_from(&self, model: &ToyLm, corpus: &TranscriptCorpus) -> Result<HookCorpus> {
        let (train, _) = corpus.split(self.held_out_fraction);
        HookCorpus::collect(model, &train[..self.transcripts.min(train.len())], self.layer)
    }
}

fn read_input(run: &mut RunOutput, path: Option<&PathBuf>, what: &str) -> CliResult<(PathBuf, Vec<u8>)> {
    let path = path.ok_or_else(|| CliError::input(format!("no {what} checkpoint configured (set checkpoints.{what})")))?;
    let bytes = std::fs::read(path).map_err(|e| CliError::input(format!("cannot read {what} checkpoint {}: {e}", path.display())))?;
    run.input(path, &bytes);
    Ok((path.clone(), bytes))
}

pub fn load_model(run: &mut RunOutput, path: Option<&PathBuf>) -> CliResult<LoadedModel> {
    let (path, bytes) = read_input(run, path, "model")?;
    model_from_bytes(&bytes).map_err(|e| CliError::from(e).with_context(&path.display().to_string()))
}

pub fn load_sae(run: &mut RunOutput, path: Option<&PathBuf>, model: &ToyLm) -> CliResult<(SaeModel, serde_json::Value)> {
    let (path, bytes) = read_input(run, path, "sae")?;
    let (sae, meta) = sae_from_bytes(&bytes).map_err(|e| CliError::from(e).with_context(&path.display().to_string()))?;
    if sae.d_in() != model.d_model() {
        return Err(CliError::input(format!(
            "SAE input width {} does not match the model width {}",
            sae.d_in(),
            model.d_model()
        )));
    }
    Ok((sae, meta))
}

/// Rebuilds the activation corpus an SAE was trained on, falling back to
/// the run config for checkpoints without provenance.
pub fn hook_corpus_for(cfg: &RunConfig, model: &ToyLm, sae_meta: &serde_json::Value, layer: usize) -> CliResult<HookCorpus> {
    let source = HookSource::from_meta(sae_meta).unwrap_or_else(|| HookSource::from_config(cfg, layer));
    if source.layer != layer {
        return Err(CliError::input(format!(
            "SAE was trained at residual boundary {} but the configured layer is {layer}",
            source.layer
        )));
    }
    Ok(source.collect(model)?)
}
