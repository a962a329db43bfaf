//! Experiment configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use simloss_core::analysis::RobustnessProbe;
use simloss_core::synth::DatasetSpec;
use simloss_core::training::{EvalConfig, LossVariant, SgdConfig, TrainConfig};
use simloss_core::{BatchSpec, LossConfig};

/// Training settings that are not already covered by another section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub variant: LossVariant,
    pub total_iters: usize,
    pub eval_interval: usize,
    pub embed_dim: usize,
    pub hidden_dim: Option<usize>,
    pub optimizer: SgdConfig,
    pub eval: EvalConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let r = TrainConfig::reference();
        Self {
            variant: r.variant,
            total_iters: r.total_iters,
            eval_interval: r.eval_interval,
            embed_dim: r.embed_dim,
            hidden_dim: r.hidden_dim,
            optimizer: r.optimizer,
            eval: r.eval,
        }
    }
}

/// Everything a run needs. Missing sections take the reference experiment's
/// values; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds model initialization, batch sampling and the numerical checks.
    /// The dataset has its own `dataset.seed`.
    pub seed: u64,
    pub out: PathBuf,
    pub dataset: DatasetSpec,
    pub batch: BatchSpec,
    pub loss: LossConfig,
    pub train: TrainSection,
    pub robustness: RobustnessProbe,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let r = TrainConfig::reference();
        Self {
            seed: r.seed,
            out: PathBuf::from("out"),
            dataset: r.dataset,
            batch: r.batch,
            loss: r.loss,
            train: TrainSection::default(),
            robustness: RobustnessProbe::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| simloss_core::Error::Parse(format!("{}: {e}", path.display())).into())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            dataset: self.dataset.clone(),
            batch: self.batch,
            loss: self.loss,
            variant: self.train.variant,
            optimizer: self.train.optimizer,
            embed_dim: self.train.embed_dim,
            hidden_dim: self.train.hidden_dim,
            total_iters: self.train.total_iters,
            eval_interval: self.train.eval_interval,
            eval: self.train.eval.clone(),
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> simloss_core::Result<()> {
        self.train_config().validate()?;
        self.robustness.validate()
    }

    /// Hex SHA-256 of the canonical JSON form. The output directory is left
    /// out so identical experiments hash the same wherever they are written.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out = PathBuf::new();
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_sections_fill_from_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"seed": 4, "loss": {"margin": 0.3}}"#).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.loss.margin, 0.3);
        assert_eq!(cfg.train.total_iters, TrainConfig::reference().total_iters);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sead": 4}"#).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"batch": {"clases": 4}}"#).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.out = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
