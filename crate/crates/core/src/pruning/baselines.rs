use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::datagen::Example;
use crate::error::{Error, Result};
use crate::rng;
use crate::stats::{dot, median};
use crate::tinymodel::Checkpoint;

use super::{check_fraction, prune_budget, PruneResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Random,
    MidPpl,
    TopPpl,
    RdsPlus,
}

impl Baseline {
    pub const ALL: [Baseline; 4] = [Baseline::Random, Baseline::MidPpl, Baseline::TopPpl, Baseline::RdsPlus];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::Random => "random",
            Baseline::MidPpl => "mid_ppl",
            Baseline::TopPpl => "top_ppl",
            Baseline::RdsPlus => "rds_plus",
        }
    }
}

/// `exp` of the mean completion cross-entropy.
pub fn perplexity(ckpt: &Checkpoint, example: &Example) -> Result<f64> {
    if example.completion_tokens.is_empty() {
        return Err(Error::input(format!("example {}: empty completion", example.id)));
    }
    Ok(ckpt.network().loss(example)?.exp())
}

/// Mean of the final hidden state over every position of the sequence.
pub fn embed(ckpt: &Checkpoint, example: &Example) -> Result<Vec<f64>> {
    let hs = ckpt.network().hidden_states(&example.sequence())?;
    let mut out = vec![0.0; ckpt.config.hidden_dim];
    for h in &hs {
        for (o, v) in out.iter_mut().zip(h) {
            *o += v;
        }
    }
    let n = hs.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

fn check_budget(n_prune: usize, n: usize) -> Result<()> {
    if n_prune > n {
        return Err(Error::input(format!("cannot prune {n_prune} of {n} examples")));
    }
    Ok(())
}

/// Prunes `n_prune` ids drawn uniformly without replacement.
pub fn select_random(ids: &[u64], n_prune: usize, seed: u64) -> Result<Vec<u64>> {
    check_budget(n_prune, ids.len())?;
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut rng::stream(seed, 0xBA5E_11E5));
    Ok(shuffled[..n_prune].to_vec())
}

/// Prunes the ids farthest from the median perplexity, lower id first on ties.
pub fn select_mid_ppl(ids: &[u64], ppl: &[f64], n_prune: usize) -> Result<Vec<u64>> {
    check_budget(n_prune, ids.len())?;
    let m = median(ppl);
    let mut o: Vec<usize> = (0..ids.len()).collect();
    o.sort_by(|&a, &b| (ppl[b] - m).abs().total_cmp(&(ppl[a] - m).abs()).then(ids[a].cmp(&ids[b])));
    Ok(o[..n_prune].iter().map(|&i| ids[i]).collect())
}

/// Keeps the `n_keep` highest-perplexity ids, lower id first on ties; returns the pruned ids.
pub fn select_top_ppl(ids: &[u64], ppl: &[f64], n_keep: usize) -> Result<Vec<u64>> {
    check_budget(n_keep, ids.len())?;
    let mut o: Vec<usize> = (0..ids.len()).collect();
    o.sort_by(|&a, &b| ppl[b].total_cmp(&ppl[a]).then(ids[a].cmp(&ids[b])));
    Ok(o[n_keep..].iter().map(|&i| ids[i]).collect())
}

/// Round-robin over the query embeddings in order: each query claims the
/// unclaimed training example with the largest inner product (lower id on
/// ties) until `n_keep` are claimed. Returns the kept ids in claim order.
pub fn select_rds_plus(ids: &[u64], train_emb: &[Vec<f64>], query_emb: &[Vec<f64>], n_keep: usize) -> Result<Vec<u64>> {
    check_budget(n_keep, ids.len())?;
    if query_emb.is_empty() && n_keep > 0 {
        return Err(Error::input("rds_plus needs at least one query embedding"));
    }
    // each query's preference list, best first
    let prefs: Vec<Vec<usize>> = query_emb
        .par_iter()
        .map(|q| {
            let scores: Vec<f64> = train_emb.iter().map(|d| dot(q, d)).collect();
            let mut o: Vec<usize> = (0..ids.len()).collect();
            o.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(ids[a].cmp(&ids[b])));
            o
        })
        .collect();
    let mut claimed = vec![false; ids.len()];
    let mut cursor = vec![0usize; prefs.len()];
    let mut kept = Vec::with_capacity(n_keep);
    'outer: while kept.len() < n_keep {
        for (q, pref) in prefs.iter().enumerate() {
            if kept.len() == n_keep {
                break 'outer;
            }
            while claimed[pref[cursor[q]]] {
                cursor[q] += 1;
            }
            let i = pref[cursor[q]];
            claimed[i] = true;
            kept.push(ids[i]);
        }
    }
    Ok(kept)
}

/// Runs a baseline selector; perplexities and embeddings are taken under `base`.
pub fn baseline_select(
    method: Baseline,
    base: &Checkpoint,
    data: &[Example],
    val: &[Example],
    frac_prune: f64,
    seed: u64,
) -> Result<PruneResult> {
    check_fraction(frac_prune)?;
    let n = data.len();
    let n_prune = prune_budget(frac_prune, n);
    check_budget(n_prune, n)?;
    let ids: Vec<u64> = data.iter().map(|d| d.id).collect();
    let mut th = BTreeMap::new();
    let ppl = || data.par_iter().map(|d| perplexity(base, d)).collect::<Result<Vec<f64>>>();
    let pruned = match method {
        Baseline::Random => select_random(&ids, n_prune, seed)?,
        Baseline::MidPpl => {
            let p = ppl()?;
            th.insert("median_perplexity".into(), json!(median(&p)));
            select_mid_ppl(&ids, &p, n_prune)?
        }
        Baseline::TopPpl => select_top_ppl(&ids, &ppl()?, n - n_prune)?,
        Baseline::RdsPlus => {
            let d_emb = data.par_iter().map(|d| embed(base, d)).collect::<Result<Vec<_>>>()?;
            let q_emb = val.par_iter().map(|v| embed(base, v)).collect::<Result<Vec<_>>>()?;
            let kept: std::collections::BTreeSet<u64> = select_rds_plus(&ids, &d_emb, &q_emb, n - n_prune)?.into_iter().collect();
            ids.iter().copied().filter(|i| !kept.contains(i)).collect()
        }
    };
    let seed = (method == Baseline::Random).then_some(seed);
    Ok(PruneResult::from_pruned(method.name(), frac_prune, &ids, pruned, th, seed))
}
