//! The run configuration: one TOML file, every field defaulted, unknown keys
//! rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use steerlab_core::checkpoint::hex_digest;
use steerlab_core::game::{Action, GameLengths};
use steerlab_core::lm::{CorpusConfig, ModelConfig, TrainConfig};
use steerlab_core::sae::{DensityConfig, SaeTrainConfig};
use steerlab_core::stats::GmmConfig;
use steerlab_core::{PolicySpec, ScreeningConfig};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub checkpoints: CheckpointPaths,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub hook: HookConfig,
    pub sae: SaeTrainConfig,
    pub screen: ScreeningConfig,
    pub simulate: SimulateConfig,
    pub dashboard: DashboardConfig,
    pub sweep: SweepConfig,
}

/// Relative paths resolve against the directory holding the config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckpointPaths {
    pub model: Option<PathBuf>,
    pub sae: Option<PathBuf>,
    /// A model checkpoint with optimiser state to continue training from.
    pub resume: Option<PathBuf>,
}

/// Which transcripts feed the SAE's activation corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HookConfig {
    /// Leading transcripts of the training split.
    pub transcripts: usize,
}

impl Default for HookConfig {
    fn default() -> Self {
        HookConfig { transcripts: 2000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub n_games: usize,
    pub lengths: GameLengths,
    pub p1: PolicySpec,
    pub p2: PolicySpec,
    /// When `p2` is a random defector, spread its defection probability
    /// evenly over this range across the games.
    pub opponent_sweep: Option<[f64; 2]>,
    pub gmm: GmmConfig,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            n_games: 250,
            lengths: GameLengths { min: 5, max: 30 },
            p1: PolicySpec::WinStayLoseChange { start: Action::Cooperate },
            p2: PolicySpec::RandomDefector { p_defect: 0.5 },
            opponent_sweep: Some([0.0, 1.0]),
            gmm: GmmConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DashboardConfig {
    pub feature_id: Option<usize>,
    pub k: usize,
    pub context_len: usize,
    pub density: DensityConfig,
}

impl Default for DashboardConfig {
    fn default() -> Self {
        DashboardConfig {
            feature_id: None,
            k: 20,
            context_len: 8,
            density: DensityConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub feature_id: Option<usize>,
    /// Sweep bounds; calibrated with the screening settings when unset.
    pub omega_minus: Option<f64>,
    pub omega_plus: Option<f64>,
    pub grid_side: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            feature_id: None,
            omega_minus: None,
            omega_plus: None,
            grid_side: 8,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<RunConfig> {
        toml::from_str(text).map_err(|e| CliError::input(format!("config: {}", e.message())))
    }

    /// Reads the file and makes checkpoint paths absolute.
    pub fn load(path: &Path) -> CliResult<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::input(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.checkpoints.model, &mut cfg.checkpoints.sae, &mut cfg.checkpoints.resume]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex_digest(&serde_json::to_vec(self).expect("config serialises"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("sed = 3").is_err());
        assert!(RunConfig::parse("[screen]\nomega_cpa = 3.0").is_err());
    }

    #[test]
    fn policies_parse_and_empty_policy_fails() {
        let cfg = RunConfig::parse("[simulate]\np1 = { kind = \"always\", action = \"defect\" }").unwrap();
        assert_eq!(cfg.simulate.p1, PolicySpec::Always { action: Action::Defect });
        let err = RunConfig::parse("[simulate]\np1 = {}").unwrap_err();
        assert_eq!(err.code, crate::error::exit::INPUT);
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 9;
        assert_ne!(a.hash(), b.hash());
    }
}
