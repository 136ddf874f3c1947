//! The experiment configuration document: a single JSON object that pins
//! every knob of a run, so that identical configs reproduce identical
//! outputs. Any field left out of the file falls back to the shipped
//! default experiment.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::GenSpec;
use crate::error::{Error, Result};
use crate::priors::{PriorConfig, PriorGlobals};
use crate::train_eval::{TrainConfig, SEEDS};

/// Optimizer and schedule settings. The data-dependent prior table is built
/// at run time from the dataset, the loss globals, and the multiplier, so it
/// is not part of the document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_frac: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub hidden_dims: Vec<usize>,
    pub d_emb: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
            warmup_frac: 0.06,
            seed: SEEDS[0],
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            hidden_dims: vec![64, 64],
            d_emb: 32,
        }
    }
}

/// The grid the sweep command trains over: one cell per (multiplier, seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSettings {
    pub multipliers: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings {
            multipliers: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            seeds: SEEDS.to_vec(),
        }
    }
}

/// Everything a run needs: data generation, training, loss globals, the
/// prior multiplier, the sweep grid, and where outputs land. `gen.seed`
/// draws the training dataset; `eval_seed` draws the held-out one from the
/// same spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub gen: GenSpec,
    pub eval_seed: u64,
    pub train: TrainSettings,
    pub loss: PriorGlobals,
    pub prior_multiplier: f64,
    pub sweep: SweepSettings,
    pub out_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let k = 8;
        ExperimentConfig {
            gen: GenSpec {
                n: 5000,
                d_in: 32,
                k,
                pi_true: vec![0.1; k],
                erasure: vec![0.7; k],
                separation: 1.5,
                noise: 0.45,
                seed: 1,
            },
            eval_seed: 2,
            train: TrainSettings::default(),
            loss: PriorGlobals::default(),
            prior_multiplier: 3.0,
            sweep: SweepSettings::default(),
            out_dir: "out".into(),
        }
    }
}

impl ExperimentConfig {
    /// Reads and validates a config document. Parse errors carry the
    /// offending field and position as reported by the JSON parser.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path)?;
        let config: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.loss.validate()?;
        if self.eval_seed == self.gen.seed {
            return Err(Error::Config(
                "eval_seed must differ from gen.seed, or the held-out set is the training set"
                    .into(),
            ));
        }
        if !(self.prior_multiplier.is_finite() && self.prior_multiplier >= 1.0) {
            return Err(Error::Config(format!(
                "prior_multiplier must be >= 1, got {}",
                self.prior_multiplier
            )));
        }
        if self.sweep.multipliers.is_empty() || self.sweep.seeds.is_empty() {
            return Err(Error::Config(
                "sweep.multipliers and sweep.seeds must be nonempty".into(),
            ));
        }
        // Placeholder prior table: TrainConfig::validate ignores it, and the
        // real one needs a dataset.
        self.train_config(self.placeholder_priors()).validate()
    }

    /// Assembles the runnable training configuration around a prior table
    /// built from a dataset.
    pub fn train_config(&self, priors: PriorConfig) -> TrainConfig {
        TrainConfig {
            variant: self.loss.variant,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            warmup_frac: self.train.warmup_frac,
            seed: self.train.seed,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            adam_eps: self.train.adam_eps,
            hidden_dims: self.train.hidden_dims.clone(),
            d_emb: self.train.d_emb,
            priors,
        }
    }

    /// The held-out dataset is the same spec drawn with `eval_seed`.
    pub fn eval_gen_spec(&self) -> GenSpec {
        GenSpec {
            seed: self.eval_seed,
            ..self.gen.clone()
        }
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    fn placeholder_priors(&self) -> PriorConfig {
        PriorConfig {
            classes: Vec::new(),
            lambda: self.loss.lambda,
            alpha: self.loss.alpha,
            nu: self.loss.nu,
            dropout_rate: self.loss.dropout_rate,
            prior_multiplier: self.prior_multiplier,
            variant: self.loss.variant,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::Variant;

    fn write_config(text: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        fs::write(&path, text).unwrap();
        (dir, path)
    }

    #[test]
    fn default_validates_and_round_trips() {
        let config = ExperimentConfig::default();
        config.validate().unwrap();
        let json = config.to_json_pretty().unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn empty_document_is_the_default() {
        let (_dir, path) = write_config("{}");
        let config = ExperimentConfig::load(&path).unwrap();
        assert_eq!(config, ExperimentConfig::default());
    }

    #[test]
    fn partial_document_overrides_only_named_fields() {
        let (_dir, path) = write_config(r#"{"prior_multiplier": 4.0, "eval_seed": 9}"#);
        let config = ExperimentConfig::load(&path).unwrap();
        assert_eq!(config.prior_multiplier, 4.0);
        assert_eq!(config.eval_seed, 9);
        assert_eq!(config.gen, ExperimentConfig::default().gen);
        assert_eq!(config.train, ExperimentConfig::default().train);
    }

    #[test]
    fn unknown_field_is_named_in_the_error() {
        let (_dir, path) = write_config(r#"{"epochz": 3}"#);
        match ExperimentConfig::load(&path) {
            Err(Error::Config(msg)) => assert!(msg.contains("epochz"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn incomplete_section_names_the_missing_field() {
        let (_dir, path) = write_config(r#"{"train": {"epochs": 5}}"#);
        match ExperimentConfig::load(&path) {
            Err(Error::Config(msg)) => assert!(msg.contains("missing field"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn semantic_checks_reject_bad_values() {
        let mut config = ExperimentConfig::default();
        config.eval_seed = config.gen.seed;
        assert!(matches!(config.validate(), Err(Error::Config(_))));

        let mut config = ExperimentConfig::default();
        config.prior_multiplier = 0.5;
        assert!(matches!(config.validate(), Err(Error::Config(_))));

        let mut config = ExperimentConfig::default();
        config.sweep.multipliers.clear();
        assert!(matches!(config.validate(), Err(Error::Config(_))));

        let mut config = ExperimentConfig::default();
        config.train.batch_size = 1;
        assert!(matches!(config.validate(), Err(Error::Config(_))));

        let mut config = ExperimentConfig::default();
        config.gen.pi_true[0] = 1.5;
        assert!(matches!(config.validate(), Err(Error::Usage(_))));
    }

    #[test]
    fn train_config_carries_the_variant_from_loss_globals() {
        let mut config = ExperimentConfig::default();
        config.loss.variant = Variant::P2m;
        let tc = config.train_config(config.placeholder_priors());
        assert_eq!(tc.variant, Variant::P2m);
        assert_eq!(tc.epochs, config.train.epochs);
        assert_eq!(tc.d_emb, config.train.d_emb);
    }

    #[test]
    fn eval_gen_spec_differs_only_in_seed() {
        let config = ExperimentConfig::default();
        let spec = config.eval_gen_spec();
        assert_eq!(spec.seed, config.eval_seed);
        assert_eq!(
            GenSpec { seed: config.gen.seed, ..spec },
            config.gen
        );
    }
}
