//! Correctness evaluation, flip sets, unbiased pass@k and checkpoint selection.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{symbol, Example, Token, ANSWER};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::tinymodel::{decode, Checkpoint, DecodeMode, SamplingConfig};

/// The symbol right after the first answer marker, if any.
pub fn extract_answer(completion: &[Token]) -> Option<&'static str> {
    let i = completion.iter().position(|&t| t == ANSWER)?;
    completion.get(i + 1).and_then(|&t| symbol(t))
}

pub fn is_correct(completion: &[Token], gold: &str) -> bool {
    extract_answer(completion) == Some(gold)
}

fn greedy_config(ckpt: &Checkpoint) -> SamplingConfig {
    SamplingConfig { temperature: 0.0, top_k: None, top_p: 1.0, max_len: ckpt.config.context_len, ..SamplingConfig::default() }
}

pub fn greedy_completion(ckpt: &Checkpoint, query: &Example) -> Result<Vec<Token>> {
    Ok(decode(ckpt, &query.prompt_tokens, DecodeMode::Greedy, &greedy_config(ckpt), 1)?.remove(0))
}

/// 1 when the greedy completion's answer equals the gold answer. Malformed
/// generations (no marker, nothing after it, prompt not decodable) score 0.
pub fn accuracy_flag(ckpt: &Checkpoint, query: &Example) -> u8 {
    greedy_completion(ckpt, query).map(|c| u8::from(is_correct(&c, &query.gold_answer))).unwrap_or(0)
}

pub fn greedy_accuracy(ckpt: &Checkpoint, data: &[Example]) -> f64 {
    if data.is_empty() {
        return f64::NAN;
    }
    let hits: u32 = data.par_iter().map(|q| u32::from(accuracy_flag(ckpt, q))).sum();
    hits as f64 / data.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub query_id: u64,
    pub before: u8,
    pub after: u8,
    /// Greedy completion of the fine-tuned model.
    pub completion: Vec<Token>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipEntry {
    pub query_id: u64,
    pub completion: Vec<Token>,
}

/// Queries whose greedy correctness improved (`correct`) or degraded
/// (`incorrect`) under fine-tuning, with the tuned model's recorded completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipSets {
    pub correct: Vec<FlipEntry>,
    pub incorrect: Vec<FlipEntry>,
    pub queries: Vec<QueryOutcome>,
}

impl FlipSets {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::container::write_bytes(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Indices with a 0 -> 1 flip and indices with a 1 -> 0 flip.
pub fn partition_flips(before: &[u8], after: &[u8]) -> (Vec<usize>, Vec<usize>) {
    let mut c = Vec::new();
    let mut i = Vec::new();
    for (k, (&b, &a)) in before.iter().zip(after).enumerate() {
        match (b, a) {
            (0, 1) => c.push(k),
            (1, 0) => i.push(k),
            _ => {}
        }
    }
    (c, i)
}

pub fn build_flip_sets(base: &Checkpoint, tuned: &Checkpoint, val: &[Example]) -> Result<FlipSets> {
    if val.is_empty() {
        return Err(Error::input("validation set is empty"));
    }
    if base.config != tuned.config {
        return Err(Error::input("base and tuned checkpoints use different model configs"));
    }
    let queries = val
        .par_iter()
        .map(|q| {
            let completion = greedy_completion(tuned, q).unwrap_or_default();
            let after = u8::from(is_correct(&completion, &q.gold_answer));
            Ok(QueryOutcome { query_id: q.id, before: accuracy_flag(base, q), after, completion })
        })
        .collect::<Result<Vec<_>>>()?;
    let before: Vec<u8> = queries.iter().map(|q| q.before).collect();
    let after: Vec<u8> = queries.iter().map(|q| q.after).collect();
    let (c, i) = partition_flips(&before, &after);
    let entry = |k: usize| FlipEntry { query_id: queries[k].query_id, completion: queries[k].completion.clone() };
    let flips = FlipSets { correct: c.into_iter().map(entry).collect(), incorrect: i.into_iter().map(entry).collect(), queries };
    if flips.correct.is_empty() {
        log::warn!("no query improved under fine-tuning; strategies using the correct set will be skipped");
    }
    if flips.incorrect.is_empty() {
        log::warn!("no query degraded under fine-tuning; strategies using the incorrect set will be skipped");
    }
    Ok(flips)
}

fn binomial(n: usize, k: usize) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    Some(acc)
}

/// Unbiased pass@k: `1 - C(n - c, k) / C(n, k)`.
///
/// Exact integer binomials are used while they fit in `u128`, so the result
/// is the correctly rounded ratio; larger `n` fall back to the product form.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64> {
    if k == 0 || k > n {
        return Err(Error::input(format!("pass@k needs 1 <= k <= n (k = {k}, n = {n})")));
    }
    if c > n {
        return Err(Error::input(format!("c = {c} exceeds n = {n}")));
    }
    if let (Some(total), Some(miss)) = (binomial(n, k), binomial(n - c, k)) {
        return Ok((total - miss) as f64 / total as f64);
    }
    if n - c < k {
        return Ok(1.0);
    }
    Ok(1.0 - (n - c - k + 1..=n - c).zip(n - k + 1..=n).map(|(a, b)| a as f64 / b as f64).product::<f64>())
}

/// Mean pass@1 over `data` with `n` sampled completions per query. Each
/// query's sampling stream is derived from `sampling.seed` and its id.
pub fn benchmark_pass_at_1(ckpt: &Checkpoint, data: &[Example], sampling: &SamplingConfig, n: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::input("benchmark is empty"));
    }
    let scores = data
        .par_iter()
        .map(|q| {
            let cfg = SamplingConfig { seed: derive_seed(sampling.seed, q.id), ..sampling.clone() };
            let samples = decode(ckpt, &q.prompt_tokens, DecodeMode::Sampled, &cfg, n)?;
            let c = samples.iter().filter(|s| is_correct(s, &q.gold_answer)).count();
            pass_at_k(n, c, 1)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Index of the highest accuracy; ties go to the earliest entry.
pub fn best_index(accuracies: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &a) in accuracies.iter().enumerate() {
        if best.is_none_or(|b| a > accuracies[b]) {
            best = Some(i);
        }
    }
    best
}

/// The snapshot with the highest greedy validation accuracy, ties broken
/// toward the earliest epoch. Returns the index and every snapshot's accuracy.
pub fn select_best_checkpoint(series: &[Checkpoint], val: &[Example]) -> Result<(usize, Vec<f64>)> {
    if series.is_empty() {
        return Err(Error::input("checkpoint series is empty"));
    }
    let accs: Vec<f64> = series.iter().map(|c| greedy_accuracy(c, val)).collect();
    let mut order: Vec<usize> = (0..series.len()).collect();
    order.sort_by_key(|&i| series[i].epoch);
    let sorted: Vec<f64> = order.iter().map(|&i| accs[i]).collect();
    Ok((order[best_index(&sorted).unwrap()], accs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::tokenize;

    fn brute_pass_at_k(n: usize, c: usize, k: usize) -> f64 {
        // samples 0..c are the correct ones
        let mut hit = 0u64;
        let mut total = 0u64;
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != k {
                continue;
            }
            total += 1;
            if (0..c).any(|i| mask & (1 << i) != 0) {
                hit += 1;
            }
        }
        hit as f64 / total as f64
    }

    #[test]
    fn pass_at_k_examples() {
        assert_eq!(pass_at_k(8, 8, 1).unwrap(), 1.0);
        assert_eq!(pass_at_k(8, 3, 1).unwrap(), 0.375);
        assert_eq!(pass_at_k(5, 2, 3).unwrap(), 0.9);
        assert!(pass_at_k(3, 1, 4).is_err());
        assert!(pass_at_k(3, 1, 0).is_err());
    }

    #[test]
    fn pass_at_k_equals_enumeration_for_small_n() {
        for n in 1..=10 {
            for c in 0..=n {
                for k in 1..=n {
                    assert_eq!(pass_at_k(n, c, k).unwrap(), brute_pass_at_k(n, c, k), "n={n} c={c} k={k}");
                }
            }
        }
    }

    #[test]
    fn pass_at_k_is_monotone() {
        for n in 1..=12 {
            for c in 0..=n {
                for k in 1..=n {
                    let p = pass_at_k(n, c, k).unwrap();
                    if c < n {
                        assert!(pass_at_k(n, c + 1, k).unwrap() >= p);
                    }
                    if k < n {
                        assert!(pass_at_k(n, c, k + 1).unwrap() >= p);
                    }
                }
            }
        }
    }

    #[test]
    fn large_n_falls_back_to_product_form() {
        let p = pass_at_k(400, 100, 50).unwrap();
        assert!(p > 0.999 && p <= 1.0);
        assert!((pass_at_k(400, 100, 1).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn answer_extraction() {
        let ok = tokenize("3 + 5 = 8 ; answer 0 <eos>").unwrap();
        assert!(is_correct(&ok, "0"));
        let wrong = tokenize("3 + 5 = 8 ; answer 7 <eos>").unwrap();
        assert!(!is_correct(&wrong, "0"));
        let none = tokenize("3 + 5 = 8 ; 0 <eos>").unwrap();
        assert!(!is_correct(&none, "0"));
        let dangling = tokenize("answer").unwrap();
        assert_eq!(extract_answer(&dangling), None);
    }

    #[test]
    fn flip_partition() {
        let (c, i) = partition_flips(&[0, 1, 0, 1], &[1, 1, 0, 0]);
        assert_eq!(c, [0]);
        assert_eq!(i, [3]);
        let (c, i) = partition_flips(&[0, 0, 1], &[1, 1, 1]);
        assert_eq!(c, [0, 1]);
        assert!(i.is_empty());
    }

    #[test]
    fn best_index_ties_go_early() {
        assert_eq!(best_index(&[0.3, 0.5, 0.4]), Some(1));
        assert_eq!(best_index(&[0.5, 0.5]), Some(0));
        assert_eq!(best_index(&[0.2]), Some(0));
        assert_eq!(best_index(&[]), None);
    }
}
