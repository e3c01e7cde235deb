use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Token, EOS};
use crate::error::{Error, Result};
use crate::rng;

use super::network::softmax;
use super::Checkpoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub temperature: f64,
    /// Disabled when `None`.
    pub top_k: Option<usize>,
    pub top_p: f64,
    /// Maximum number of generated tokens; the context length also bounds generation.
    pub max_len: usize,
    pub seed: u64,
    #[serde(default = "default_stop")]
    pub stop_token: Option<Token>,
}

fn default_stop() -> Option<Token> {
    Some(EOS)
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { temperature: 0.6, top_k: None, top_p: 0.95, max_len: 64, seed: 0, stop_token: Some(EOS) }
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Sampling distribution after temperature, then top-k, then top-p filtering.
/// Returns `(token, probability)` pairs with positive mass.
pub(crate) fn filtered_distribution(logits: &[f64], cfg: &SamplingConfig) -> Vec<(usize, f64)> {
    if cfg.temperature <= 0.0 {
        return vec![(argmax(logits), 1.0)];
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / cfg.temperature).collect();
    let probs = softmax(&scaled);
    let mut ranked: Vec<(usize, f64)> = probs.into_iter().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    if let Some(k) = cfg.top_k {
        ranked.truncate(k.max(1));
    }
    let mass: f64 = ranked.iter().map(|p| p.1).sum();
    let mut kept = Vec::new();
    let mut cum = 0.0;
    for (tok, p) in ranked {
        let p = p / mass;
        if p == 0.0 {
            break;
        }
        kept.push((tok, p));
        cum += p;
        if cum >= cfg.top_p {
            break;
        }
    }
    let total: f64 = kept.iter().map(|p| p.1).sum();
    kept.into_iter().map(|(t, p)| (t, p / total)).collect()
}

fn generate<F: FnMut(&[f64]) -> usize>(ckpt: &Checkpoint, prompt: &[Token], cfg: &SamplingConfig, mut pick: F) -> Result<Vec<Token>> {
    let net = ckpt.network();
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < cfg.max_len && seq.len() < ckpt.config.context_len {
        let logits = net.next_logits(&seq)?;
        let tok = pick(&logits) as Token;
        seq.push(tok);
        out.push(tok);
        if Some(tok) == cfg.stop_token {
            break;
        }
    }
    Ok(out)
}

/// Generates completions for `prompt`. Greedy mode returns a single
/// completion (ties go to the lowest token id); sampled mode returns `n`
/// completions drawn from one RNG stream seeded by `sampling.seed`.
pub fn decode(
    ckpt: &Checkpoint,
    prompt: &[Token],
    mode: DecodeMode,
    sampling: &SamplingConfig,
    n: usize,
) -> Result<Vec<Vec<Token>>> {
    if prompt.is_empty() || prompt.len() > ckpt.config.context_len {
        return Err(Error::input("prompt must be non-empty and fit the context"));
    }
    match mode {
        DecodeMode::Greedy => Ok(vec![generate(ckpt, prompt, sampling, argmax)?]),
        DecodeMode::Sampled => {
            if n == 0 {
                return Err(Error::input("sampled decoding needs n >= 1"));
            }
            let mut rng = rng::stream(sampling.seed, 0xDEC0DE);
            (0..n)
                .map(|_| {
                    generate(ckpt, prompt, sampling, |logits| {
                        let dist = filtered_distribution(logits, sampling);
                        let u: f64 = rng.gen();
                        let mut acc = 0.0;
                        for &(t, p) in &dist {
                            acc += p;
                            if u < acc {
                                return t;
                            }
                        }
                        dist.last().unwrap().0
                    })
                })
                .collect()
        }
    }
}
