//! A deterministic small sequence model: token embedding, a causal
//! concatenated-context input projection, a stack of residual MLP blocks and
//! a softmax readout.
//!
//! For a prediction at position `t` the input vector holds one slot per
//! context position; slot `j <= t` is `embed[token_j] + pe(j)` with a fixed
//! sinusoidal offset `pe`, and slots after `t` are zero:
//!
//! ```text
//! h0      = act(W_in x_t + b_in)                      "in_proj"
//! h_{k+1} = h_k + act(W_k h_k + b_k)                  "mlp.k"
//! logits  = W_out h_N + b_out                         "readout"
//! ```
//!
//! Parameters live in one flat `f64` vector. The fixed layer order is
//! `embed, in_proj, mlp.0, .., mlp.{N-1}, readout`; inside a linear layer the
//! weight matrix comes first (row-major, `out x in`) followed by the bias.

mod decode;
mod network;
mod train;

pub use decode::{decode, DecodeMode, SamplingConfig};
pub use network::{log_softmax, masked_cross_entropy, softmax, Network, PreactGrads, Trace};
pub use train::{cosine_lr, mean_loss, train, CheckpointSeries, Optimizer, Schedule, TrainConfig};

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::datagen::Example;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    pub fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub embed_dim: usize,
    pub mlp_layers: usize,
    pub hidden_dim: usize,
    pub seed: u64,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: crate::datagen::VOCAB_SIZE,
            context_len: 24,
            embed_dim: 8,
            mlp_layers: 2,
            hidden_dim: 64,
            seed: 0,
            activation: Activation::Tanh,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("context_len", self.context_len),
            ("embed_dim", self.embed_dim),
            ("mlp_layers", self.mlp_layers),
            ("hidden_dim", self.hidden_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> Vec<LayerSpec> {
        let mut layers = Vec::with_capacity(self.mlp_layers + 3);
        let mut offset = 0;
        let mut push = |name: String, out_dim: usize, in_dim: usize, bias: bool| {
            let len = out_dim * in_dim + if bias { out_dim } else { 0 };
            layers.push(LayerSpec { name, out_dim, in_dim, bias, offset, len });
            offset += len;
        };
        push("embed".into(), self.vocab_size, self.embed_dim, false);
        push("in_proj".into(), self.hidden_dim, self.context_len * self.embed_dim, true);
        for k in 0..self.mlp_layers {
            push(format!("mlp.{k}"), self.hidden_dim, self.hidden_dim, true);
        }
        push("readout".into(), self.vocab_size, self.hidden_dim, true);
        layers
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|l| l.len).sum()
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.layout().into_iter().map(|l| l.name).collect()
    }

    pub fn mlp_layer_names(&self) -> Vec<String> {
        (0..self.mlp_layers).map(|k| format!("mlp.{k}")).collect()
    }
}

/// One named block of the flat parameter vector. Linear layers compute
/// `W a + b` with `W` of shape `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub out_dim: usize,
    pub in_dim: usize,
    pub bias: bool,
    pub offset: usize,
    pub len: usize,
}

impl LayerSpec {
    /// Columns of the bias-augmented weight matrix `[W | b]`.
    pub fn aug_in_dim(&self) -> usize {
        self.in_dim + usize::from(self.bias)
    }
}

/// An ordered subset of layers. Gradients restricted to a filter are
/// concatenated in model layer order regardless of the order names were given.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFilter {
    names: Vec<String>,
}

impl LayerFilter {
    pub fn new<S: AsRef<str>>(config: &ModelConfig, names: &[S]) -> Result<Self> {
        let wanted: BTreeSet<&str> = names.iter().map(|s| s.as_ref()).collect();
        let all = config.layer_names();
        for w in &wanted {
            if !all.iter().any(|n| n == w) {
                return Err(Error::input(format!("unknown layer `{w}`")));
            }
        }
        Ok(Self {
            names: all.into_iter().filter(|n| wanted.contains(n.as_str())).collect(),
        })
    }

    /// The MLP blocks only.
    pub fn mlp(config: &ModelConfig) -> Self {
        Self { names: config.mlp_layer_names() }
    }

    pub fn all(config: &ModelConfig) -> Self {
        Self { names: config.layer_names() }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.iter().any(|n| n == name)
    }

    pub fn layers(&self, config: &ModelConfig) -> Vec<LayerSpec> {
        config.layout().into_iter().filter(|l| self.contains(&l.name)).collect()
    }

    pub fn param_count(&self, config: &ModelConfig) -> usize {
        self.layers(config).iter().map(|l| l.len).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Vec<f64>,
    pub epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    kind: String,
    config: ModelConfig,
    epoch: usize,
    layers: Vec<LayerSpec>,
}

impl Checkpoint {
    pub fn layer(&self, name: &str) -> Option<&[f64]> {
        self.config
            .layout()
            .into_iter()
            .find(|l| l.name == name)
            .map(|l| &self.params[l.offset..l.offset + l.len])
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            kind: "checkpoint".into(),
            config: self.config.clone(),
            epoch: self.epoch,
            layers: self.config.layout(),
        };
        container::encode(&header, &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, params): (CheckpointHeader, Vec<f64>) = container::decode(bytes)?;
        if header.kind != "checkpoint" {
            return Err(Error::Format(format!("expected checkpoint, found `{}`", header.kind)));
        }
        if header.layers != header.config.layout() {
            return Err(Error::Format("layer table does not match config".into()));
        }
        let ckpt = Checkpoint { config: header.config, params, epoch: header.epoch };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        container::write_bytes(path, &bytes)?;
        Ok(container::sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized container; identifies the checkpoint in provenance records.
    pub fn hash(&self) -> String {
        container::sha256_hex(&self.to_bytes().expect("checkpoint header serializes"))
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.params.len() != self.config.param_count() {
            return Err(Error::Format(format!(
                "parameter count {} does not match config ({})",
                self.params.len(),
                self.config.param_count()
            )));
        }
        Ok(())
    }

    pub fn network(&self) -> Network<'_> {
        Network::new(&self.config, &self.params)
    }

    /// Mean completion cross-entropy of one example, in nats.
    pub fn forward_loss(&self, example: &Example) -> Result<(Vec<Vec<f64>>, f64)> {
        self.network().forward_loss(example)
    }

    pub fn per_example_gradient(&self, example: &Example, filter: &LayerFilter) -> Result<Vec<f64>> {
        self.network().per_example_gradient(example, filter)
    }
}

/// Deterministic initialization: uniform weights with variance `1/fan_in`,
/// zero biases, embeddings uniform on `[-1, 1]`.
pub fn init_model(config: &ModelConfig) -> Result<Checkpoint> {
    config.validate()?;
    let mut rng = rng::stream(config.seed, 0x1A17);
    let mut params = vec![0.0; config.param_count()];
    for layer in config.layout() {
        let w = &mut params[layer.offset..layer.offset + layer.out_dim * layer.in_dim];
        let scale = if layer.name == "embed" { 1.0 } else { (3.0 / layer.in_dim as f64).sqrt() };
        for v in w.iter_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
    Ok(Checkpoint { config: config.clone(), params, epoch: 0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig { context_len: 8, embed_dim: 3, hidden_dim: 5, mlp_layers: 2, ..ModelConfig::default() }
    }

    #[test]
    fn init_is_deterministic_and_seed_dependent() {
        let a = init_model(&small()).unwrap();
        let b = init_model(&small()).unwrap();
        assert_eq!(a.params.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.params.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let c = init_model(&ModelConfig { seed: 1, ..small() }).unwrap();
        let d = init_model(&ModelConfig { seed: 2, ..small() }).unwrap();
        assert_ne!(c.params, d.params);
        assert_eq!(a.epoch, 0);
        assert_eq!(a.params.len(), small().param_count());
    }

    #[test]
    fn zero_sized_dimension_is_rejected() {
        let cfg = ModelConfig { vocab_size: 0, ..small() };
        assert!(matches!(init_model(&cfg), Err(Error::Config(_))));
        let cfg = ModelConfig { hidden_dim: 0, ..small() };
        assert!(matches!(init_model(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn layout_is_contiguous() {
        let cfg = small();
        let layout = cfg.layout();
        let names: Vec<_> = layout.iter().map(|l| l.name.as_str()).collect();
        assert_eq!(names, ["embed", "in_proj", "mlp.0", "mlp.1", "readout"]);
        let mut off = 0;
        for l in &layout {
            assert_eq!(l.offset, off);
            off += l.len;
        }
        assert_eq!(off, cfg.param_count());
    }

    #[test]
    fn filter_orders_by_layout_and_rejects_unknown() {
        let cfg = small();
        let f = LayerFilter::new(&cfg, &["readout", "mlp.1"]).unwrap();
        assert_eq!(f.names(), ["mlp.1", "readout"]);
        assert!(matches!(LayerFilter::new(&cfg, &["mlp.7"]), Err(Error::Input(_))));
    }

    #[test]
    fn checkpoint_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let mut ckpt = init_model(&small()).unwrap();
        ckpt.epoch = 4;
        let hash = ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(hash, back.hash());
    }

    #[test]
    fn checkpoint_with_wrong_param_count_is_rejected() {
        let mut ckpt = init_model(&small()).unwrap();
        ckpt.params.pop();
        let bytes = container::encode(
            &CheckpointHeader { kind: "checkpoint".into(), config: ckpt.config.clone(), epoch: 0, layers: ckpt.config.layout() },
            &ckpt.params,
        )
        .unwrap();
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
