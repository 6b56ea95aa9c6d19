//! Experiment configuration files (TOML). Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::drloc::LossVariantSpec;
use crate::error::{Error, Result};
use crate::trainer::{OptimSpec, RunSpec};
use crate::vit::VitConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub eval_interval: usize,
    pub checkpoint_every: usize,
    pub grad_chunks: usize,
    /// Write per-epoch backbone gradient norms of each loss term.
    pub record_grad_norms: bool,
    pub model: VitConfig,
    pub loss: LossVariantSpec,
    pub optim: OptimSpec,
    pub dataset: DatasetSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: vec![0],
            output_dir: PathBuf::from("runs"),
            eval_interval: 1,
            checkpoint_every: 0,
            grad_chunks: 1,
            record_grad_norms: false,
            model: VitConfig::default(),
            loss: LossVariantSpec::default(),
            optim: OptimSpec::default(),
            dataset: DatasetSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.eval_interval == 0 || self.grad_chunks == 0 {
            return Err(Error::Config("eval_interval and grad_chunks must be positive".into()));
        }
        self.model.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        self.dataset.validate(self.model.image_side, self.model.classes)
    }

    pub fn run_spec(&self, seed: u64, jobs: usize, record_timing: bool) -> RunSpec {
        let mut spec = RunSpec::new(
            self.model.clone(),
            self.loss.clone(),
            self.optim.clone(),
            self.dataset.id(),
            seed,
        );
        spec.eval_interval = self.eval_interval;
        spec.checkpoint_every = self.checkpoint_every;
        spec.grad_chunks = self.grad_chunks;
        spec.record_grad_norms = self.record_grad_norms;
        spec.jobs = jobs;
        spec.record_timing = record_timing;
        spec
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let text = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), c);
    }

    #[test]
    fn unknown_key_is_config_error() {
        let err = ExperimentConfig::parse("[loss]\nlamda = 0.5\n").unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("lamda"), "{err}");
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = ExperimentConfig::parse("seeds = [1, 2]\n[loss]\nvariant = \"ce\"\nlambda = 0.5\n").unwrap();
        assert_eq!(c.seeds, vec![1, 2]);
        assert_eq!(c.loss.lambda, 0.5);
        assert_eq!(c.loss.m, 64);
    }

    #[test]
    fn empty_seed_list_rejected() {
        let c = ExperimentConfig {
            seeds: vec![],
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
