//! A small cached experiment shared by the examples.

use ifprune::pipeline::{ExperimentConfig, PretrainConfig};


pub fn small_config(name: &str) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.task.n_train = 200;
    cfg.task.n_val = 80;
    cfg.task.n_test = 40;
    cfg.model.hidden_dim = 32;
    cfg.pretrain = PretrainConfig { n_examples: 1500, ..PretrainConfig::default() };
    cfg.train.epochs = 10;
    cfg.eval.n_samples = 4;
    cfg.seeds = vec![0];
    cfg.outdir = std::env::temp_dir().join("ifprune-examples").join(name);
    cfg
}
