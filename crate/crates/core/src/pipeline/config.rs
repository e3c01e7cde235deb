use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{Op, TaskSpec};
use crate::ekfac::Damping;
use crate::error::{Error, Result};
use crate::pruning::{Baseline, PruneFractions, Strategy};
use crate::tinymodel::{LayerFilter, ModelConfig, SamplingConfig, TrainConfig};

/// Pretraining of the base model on a separate clean corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub n_examples: usize,
    pub train: TrainConfig,
    /// Seed of the pretraining corpus; shared by every run seed.
    pub data_seed: u64,
    /// Operations seen in pretraining; `None` means the fine-tuning task's set.
    pub ops: Option<Vec<Op>>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            n_examples: 2000,
            train: TrainConfig { epochs: 20, snapshot_every: 20, peak_lr: 5e-3, ..TrainConfig::default() },
            data_seed: 1_000_003,
            ops: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InfluenceConfig {
    pub damping: Damping,
    /// Layers whose parameters enter gradients and curvature; empty means every MLP block.
    pub layers: Vec<String>,
}

impl Default for InfluenceConfig {
    fn default() -> Self {
        Self { damping: Damping::default(), layers: Vec::new() }
    }
}

impl InfluenceConfig {
    pub fn filter(&self, model: &ModelConfig) -> Result<LayerFilter> {
        if self.layers.is_empty() {
            Ok(LayerFilter::mlp(model))
        } else {
            LayerFilter::new(model, &self.layers)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Samples per query for pass@1.
    pub n_samples: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: Option<usize>,
    pub max_len: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_samples: 8, temperature: 0.6, top_p: 0.95, top_k: None, max_len: 64 }
    }
}

impl EvalConfig {
    pub fn sampling(&self, seed: u64) -> SamplingConfig {
        SamplingConfig {
            temperature: self.temperature,
            top_k: self.top_k,
            top_p: self.top_p,
            max_len: self.max_len,
            seed,
            ..SamplingConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LooMode {
    /// Features frozen at the tuned model; only the readout is refit.
    ConvexHead,
    /// The full model is fine-tuned again from the base checkpoint.
    FullRetrain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LooConfig {
    pub mode: LooMode,
    /// L2 strength of the convex-head objective; also the damping of its influence.
    pub l2: f64,
    /// Number of candidates (training examples with the lowest ids).
    pub candidates: usize,
    pub tolerance: f64,
    pub max_iters: usize,
}

impl Default for LooConfig {
    fn default() -> Self {
        Self { mode: LooMode::ConvexHead, l2: 1e-2, candidates: 200, tolerance: 1e-12, max_iters: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub influence: InfluenceConfig,
    pub strategies: Vec<Strategy>,
    pub baselines: Vec<Baseline>,
    pub fractions: PruneFractions,
    /// Fraction pruned by every baseline.
    pub baseline_fraction: f64,
    pub eval: EvalConfig,
    pub seeds: Vec<u64>,
    pub histogram_bins: usize,
    pub loo: LooConfig,
    pub outdir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskSpec::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig { epochs: 20, ..TrainConfig::default() },
            influence: InfluenceConfig::default(),
            strategies: Strategy::ALL.to_vec(),
            baselines: Baseline::ALL.to_vec(),
            fractions: PruneFractions::default(),
            baseline_fraction: 0.10,
            eval: EvalConfig::default(),
            seeds: vec![0, 1, 2],
            histogram_bins: 30,
            loo: LooConfig::default(),
            outdir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.pretrain.train.validate()?;
        if self.model.vocab_size != crate::datagen::VOCAB_SIZE {
            return Err(Error::Config(format!("model vocab_size must be {}", crate::datagen::VOCAB_SIZE)));
        }
        if self.model.context_len < self.task.task.max_sequence_len() {
            return Err(Error::Config(format!(
                "context_len {} is shorter than the longest task sequence ({})",
                self.model.context_len,
                self.task.task.max_sequence_len()
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.histogram_bins == 0 {
            return Err(Error::Config("histogram_bins must be at least 1".into()));
        }
        if self.eval.n_samples == 0 {
            return Err(Error::Config("eval.n_samples must be at least 1".into()));
        }
        if self.task.n_val == 0 {
            return Err(Error::Config("a validation split is required".into()));
        }
        for f in [self.fractions.correct, self.fractions.incorrect, self.fractions.combined, self.fractions.aggressive_keep, self.baseline_fraction] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!("fraction {f} must lie in (0, 1)")));
            }
        }
        if !(self.loo.l2 > 0.0) {
            return Err(Error::Config("loo.l2 must be positive".into()));
        }
        self.influence.filter(&self.model)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The model config with its initialization seed set to `seed`.
    pub fn model_for(&self, seed: u64) -> ModelConfig {
        ModelConfig { seed, ..self.model.clone() }
    }

    pub fn train_for(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.train.clone() }
    }

    pub fn needs_influence(&self) -> bool {
        !self.strategies.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_validates_and_round_trips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&text).unwrap(), cfg);
        let partial: ExperimentConfig = serde_json::from_str(r#"{"seeds":[5],"strategies":["combined"],"baselines":["random"]}"#).unwrap();
        assert_eq!(partial.seeds, [5]);
        assert_eq!(partial.model, cfg.model);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ExperimentConfig { seeds: vec![], ..ExperimentConfig::default() };
        assert!(cfg.validate().is_err());
        cfg.seeds = vec![0];
        cfg.model.context_len = 5;
        assert!(cfg.validate().is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"strategies":["magic"]}"#).is_err());
    }
}
