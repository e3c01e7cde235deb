//! Influence-based pruning strategies and the baseline selectors, all with
//! an exact pruning budget.

mod baselines;

pub use baselines::{
    baseline_select, embed, perplexity, select_mid_ppl, select_random, select_rds_plus, select_top_ppl, Baseline,
};

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::datagen::{write_jsonl, Example};
use crate::error::{Error, Result};
use crate::scoring::ScoreTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Correct,
    Incorrect,
    Combined,
    Aggressive50,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Correct, Strategy::Incorrect, Strategy::Combined, Strategy::Aggressive50];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Correct => "correct",
            Strategy::Incorrect => "incorrect",
            Strategy::Combined => "combined",
            Strategy::Aggressive50 => "aggressive50",
        }
    }
}

/// Fractions of `D` pruned by each strategy; `aggressive_keep` is the kept share.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneFractions {
    pub correct: f64,
    pub incorrect: f64,
    pub combined: f64,
    pub aggressive_keep: f64,
}

impl Default for PruneFractions {
    fn default() -> Self {
        Self { correct: 0.20, incorrect: 0.10, combined: 0.10, aggressive_keep: 0.50 }
    }
}

impl PruneFractions {
    pub fn prune_fraction(&self, s: Strategy) -> f64 {
        match s {
            Strategy::Correct => self.correct,
            Strategy::Incorrect => self.incorrect,
            Strategy::Combined => self.combined,
            Strategy::Aggressive50 => 1.0 - self.aggressive_keep,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneResult {
    pub strategy: String,
    pub target_fraction: f64,
    pub kept_ids: Vec<u64>,
    pub pruned_ids: Vec<u64>,
    pub thresholds: BTreeMap<String, Value>,
    pub seed: Option<u64>,
}

impl PruneResult {
    pub(crate) fn from_pruned(
        strategy: &str,
        target_fraction: f64,
        ids: &[u64],
        pruned: impl IntoIterator<Item = u64>,
        thresholds: BTreeMap<String, Value>,
        seed: Option<u64>,
    ) -> Self {
        let pruned: BTreeSet<u64> = pruned.into_iter().collect();
        let mut kept_ids: Vec<u64> = ids.iter().copied().filter(|id| !pruned.contains(id)).collect();
        kept_ids.sort_unstable();
        Self { strategy: strategy.into(), target_fraction, kept_ids, pruned_ids: pruned.into_iter().collect(), thresholds, seed }
    }

    pub fn budget(&self) -> usize {
        prune_budget(self.target_fraction, self.kept_ids.len() + self.pruned_ids.len())
    }

    /// `|pruned|` within one example of `round(target_fraction * |D|)`.
    pub fn meets_budget(&self) -> bool {
        self.pruned_ids.len().abs_diff(self.budget()) <= 1
    }

    /// Checks the partition of `ids` and the budget.
    pub fn validate(&self, ids: &[u64]) -> Result<()> {
        let all: BTreeSet<u64> = ids.iter().copied().collect();
        let kept: BTreeSet<u64> = self.kept_ids.iter().copied().collect();
        let pruned: BTreeSet<u64> = self.pruned_ids.iter().copied().collect();
        if kept.len() != self.kept_ids.len() || pruned.len() != self.pruned_ids.len() {
            return Err(Error::input(format!("{}: duplicate ids", self.strategy)));
        }
        if !kept.is_disjoint(&pruned) || kept.union(&pruned).copied().collect::<BTreeSet<_>>() != all {
            return Err(Error::input(format!("{}: kept and pruned do not partition the dataset", self.strategy)));
        }
        if !self.meets_budget() {
            return Err(Error::input(format!(
                "{}: pruned {} examples, budget is {}",
                self.strategy,
                self.pruned_ids.len(),
                self.budget()
            )));
        }
        Ok(())
    }

    pub fn kept_examples(&self, data: &[Example]) -> Vec<Example> {
        let kept: BTreeSet<u64> = self.kept_ids.iter().copied().collect();
        data.iter().filter(|e| kept.contains(&e.id)).cloned().collect()
    }

    /// Writes `<stem>.json` and the kept corpus as `<stem>.kept.jsonl`.
    pub fn save(&self, dir: &Path, stem: &str, data: &[Example]) -> Result<()> {
        crate::container::write_bytes(&dir.join(format!("{stem}.json")), &serde_json::to_vec_pretty(self)?)?;
        write_jsonl(&dir.join(format!("{stem}.kept.jsonl")), &self.kept_examples(data))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

pub fn prune_budget(fraction: f64, n: usize) -> usize {
    (fraction * n as f64).round() as usize
}

fn check_fraction(f: f64) -> Result<()> {
    if !(f > 0.0 && f < 1.0) {
        return Err(Error::Config(format!("prune fraction {f} must lie in (0, 1)")));
    }
    Ok(())
}

/// Indices sorted by `key` ascending (pass a negated key for descending), ties by lower id.
fn order_by(ids: &[u64], key: impl Fn(usize) -> f64) -> Vec<usize> {
    let mut o: Vec<usize> = (0..ids.len()).collect();
    o.sort_by(|&a, &b| key(a).total_cmp(&key(b)).then(ids[a].cmp(&ids[b])));
    o
}

/// Smallest prefix length `k` for which every order's length-`k` prefix
/// shares at least `budget` members, and that shared set.
fn smallest_intersection(orders: &[Vec<usize>], n: usize, budget: usize) -> (usize, Vec<usize>) {
    let members = |k: usize| -> Vec<usize> {
        let mut count = vec![0usize; n];
        for o in orders {
            for &i in &o[..k] {
                count[i] += 1;
            }
        }
        (0..n).filter(|&i| count[i] == orders.len()).collect()
    };
    let (mut lo, mut hi) = (budget, n);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if members(mid).len() >= budget {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    (lo, members(lo))
}

fn column<'a>(col: &'a Option<Vec<f64>>, name: &str, strategy: Strategy) -> Result<&'a [f64]> {
    col.as_deref().ok_or_else(|| Error::StrategySkipped {
        strategy: strategy.name().into(),
        reason: format!("score column {name} is unavailable because its flip set is empty"),
    })
}

/// Applies one of the influence-based strategies to a score table.
pub fn if_prune(table: &ScoreTable, strategy: Strategy, fractions: &PruneFractions) -> Result<PruneResult> {
    let n = table.len();
    let ids = &table.ids;
    let frac = fractions.prune_fraction(strategy);
    check_fraction(frac)?;
    let budget = prune_budget(frac, n);
    let mut th = BTreeMap::new();
    if strategy == Strategy::Aggressive50 {
        column(&table.s_c, "s_C", strategy)?;
        column(&table.s_i, "s_I", strategy)?;
        let a = table.a.as_deref().ok_or_else(|| Error::StrategySkipped {
            strategy: strategy.name().into(),
            reason: format!("aggressive score needs positive spread (sigma_C = {:?}, sigma_I = {:?})", table.sigma_c, table.sigma_i),
        })?;
        let s_c = table.s_c.as_deref().unwrap_or_default();
        let mut o: Vec<usize> = (0..n).collect();
        o.sort_by(|&x, &y| a[y].total_cmp(&a[x]).then(s_c[y].total_cmp(&s_c[x])).then(ids[x].cmp(&ids[y])));
        let keep = n - budget;
        if keep > 0 {
            th.insert("min_kept_A".into(), json!(a[o[keep - 1]]));
        }
        th.insert("sigma_C".into(), json!(table.sigma_c));
        th.insert("sigma_I".into(), json!(table.sigma_i));
        return Ok(PruneResult::from_pruned(strategy.name(), frac, ids, o[keep..].iter().map(|&i| ids[i]), th, None));
    }

    let mut orders = Vec::new();
    let (s_c, r_c, s_i, r_i);
    if matches!(strategy, Strategy::Correct | Strategy::Combined) {
        s_c = column(&table.s_c, "s_C", strategy)?;
        r_c = column(&table.r_c, "r_C", strategy)?;
        orders.push(order_by(ids, |i| s_c[i]));
        orders.push(order_by(ids, |i| -r_c[i]));
    } else {
        (s_c, r_c) = (&[][..], &[][..]);
    }
    if matches!(strategy, Strategy::Incorrect | Strategy::Combined) {
        s_i = column(&table.s_i, "s_I", strategy)?;
        r_i = column(&table.r_i, "r_I", strategy)?;
        orders.push(order_by(ids, |i| -s_i[i]));
        orders.push(order_by(ids, |i| r_i[i]));
    } else {
        (s_i, r_i) = (&[][..], &[][..]);
    }
    let (k, mut chosen) = smallest_intersection(&orders, n, budget);
    // trim the overshoot, keeping the most extreme members
    let trim = if strategy == Strategy::Correct { order_by(ids, |i| s_c[i]) } else { order_by(ids, |i| -s_i[i]) };
    let pos: Vec<usize> = {
        let mut p = vec![0; n];
        for (r, &i) in trim.iter().enumerate() {
            p[i] = r;
        }
        p
    };
    chosen.sort_by_key(|&i| pos[i]);
    chosen.truncate(budget);
    th.insert("quantile".into(), json!(k as f64 / n.max(1) as f64));
    th.insert("prefix_len".into(), json!(k));
    if k > 0 {
        if !s_c.is_empty() {
            th.insert("s_C_max".into(), json!(s_c[orders[0][k - 1]]));
            th.insert("r_C_min".into(), json!(r_c[orders[1][k - 1]]));
        }
        if !s_i.is_empty() {
            let off = orders.len() - 2;
            th.insert("s_I_min".into(), json!(s_i[orders[off][k - 1]]));
            th.insert("r_I_max".into(), json!(r_i[orders[off + 1][k - 1]]));
            th.insert("r_I_direction".into(), json!("lowest mean rank (most harmful) pruned"));
        }
    }
    Ok(PruneResult::from_pruned(strategy.name(), frac, ids, chosen.into_iter().map(|i| ids[i]), th, None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, proptest, Strategy as _};

    fn table(s_c: Vec<f64>, r_c: Vec<f64>, s_i: Vec<f64>, r_i: Vec<f64>) -> ScoreTable {
        let n = s_c.len();
        ScoreTable {
            ids: (0..n as u64).collect(),
            corrupted: vec![false; n],
            a: None,
            sigma_c: Some(crate::stats::population_std(&s_c)),
            sigma_i: Some(crate::stats::population_std(&s_i)),
            s_c: Some(s_c),
            s_i: Some(s_i),
            r_c: Some(r_c),
            r_i: Some(r_i),
        }
    }

    #[test]
    fn unanimous_correct_prune() {
        let t = table(
            vec![0.5, 0.4, 0.3, 0.2, -1.0],
            vec![1.0, 2.0, 3.0, 4.0, 5.0],
            vec![0.0; 5],
            vec![3.0; 5],
        );
        let r = if_prune(&t, Strategy::Correct, &PruneFractions::default()).unwrap();
        assert_eq!(r.pruned_ids, [4]);
        assert_eq!(r.kept_ids, [0, 1, 2, 3]);
        r.validate(&t.ids).unwrap();
    }

    #[test]
    fn hand_executed_ten_example_table() {
        // s_C ascending:   3 7 1 9 0 5 2 8 4 6
        // r_C descending:  7 1 3 0 2 9 4 8 5 6
        // s_I descending:  2 5 8 0 3 6 1 4 7 9
        // r_I ascending:   5 2 0 8 6 3 1 9 4 7
        let s_c = vec![0.0, -0.5, 0.5, -2.0, 2.0, 0.2, 3.0, -1.0, 1.0, -0.2];
        let r_c = vec![6.0, 8.0, 5.5, 7.0, 2.0, 1.5, 1.0, 9.0, 1.8, 3.0];
        let s_i = vec![0.6, 0.2, 1.0, 0.5, 0.1, 0.9, 0.3, 0.0, 0.8, -0.1];
        let r_i = vec![3.0, 7.0, 2.0, 6.0, 9.0, 1.0, 5.0, 10.0, 4.0, 8.0];
        let t = table(s_c, r_c, s_i, r_i);
        let f = PruneFractions::default();
        // correct, budget 2: k=2 -> {3,7}∩{7,1} = {7}; k=3 -> {3,7,1}∩{7,1,3} = {1,3,7}; trim by lowest s_C -> {3,7}
        let r = if_prune(&t, Strategy::Correct, &f).unwrap();
        assert_eq!(r.pruned_ids, [3, 7]);
        assert_eq!(r.thresholds["prefix_len"], json!(3));
        // incorrect, budget 1: k=1 -> {2}∩{5} empty; k=2 -> {2,5}∩{5,2} = {2,5}; trim by highest s_I -> {2}
        let r = if_prune(&t, Strategy::Incorrect, &f).unwrap();
        assert_eq!(r.pruned_ids, [2]);
        // combined, budget 1: smallest k where all four prefixes share a member
        // k=4: {3,7,1,9}∩{7,1,3,0}∩{2,5,8,0}∩{5,2,0,8} empty
        // k=6: {3,7,1,9,0,5}∩{7,1,3,0,2,9}∩{2,5,8,0,3,6}∩{5,2,0,8,6,3} = {0,3}; k=5 gives {0}
        let r = if_prune(&t, Strategy::Combined, &f).unwrap();
        assert_eq!(r.pruned_ids, [0]);
        assert_eq!(r.thresholds["prefix_len"], json!(5));
    }

    #[test]
    fn aggressive_keeps_top_half() {
        let mut t = table(vec![0.0; 6], vec![1.0; 6], vec![0.0; 6], vec![1.0; 6]);
        t.a = Some(vec![5.0, 4.0, 3.0, 2.0, 1.0, 0.0]);
        let r = if_prune(&t, Strategy::Aggressive50, &PruneFractions::default()).unwrap();
        assert_eq!(r.kept_ids, [0, 1, 2]);
        // ties: higher s_C first, then lower id
        t.a = Some(vec![1.0; 6]);
        t.s_c = Some(vec![0.0, 0.0, 1.0, 0.0, 2.0, 0.0]);
        let r = if_prune(&t, Strategy::Aggressive50, &PruneFractions::default()).unwrap();
        assert_eq!(r.kept_ids, [0, 2, 4]);
        t.a = None;
        assert!(if_prune(&t, Strategy::Aggressive50, &PruneFractions::default()).unwrap_err().is_skip());
    }

    #[test]
    fn missing_columns_skip() {
        let mut t = table(vec![0.0; 4], vec![1.0; 4], vec![0.0; 4], vec![1.0; 4]);
        t.s_i = None;
        t.r_i = None;
        assert!(if_prune(&t, Strategy::Incorrect, &PruneFractions::default()).unwrap_err().is_skip());
        assert!(if_prune(&t, Strategy::Combined, &PruneFractions::default()).unwrap_err().is_skip());
        assert!(if_prune(&t, Strategy::Aggressive50, &PruneFractions::default()).unwrap_err().is_skip());
        assert!(if_prune(&t, Strategy::Correct, &PruneFractions::default()).is_ok());
    }

    fn arb_table() -> impl proptest::strategy::Strategy<Value = ScoreTable> {
        (5usize..60).prop_flat_map(|n| {
            let v = || prop::collection::vec(-3i32..3, n);
            (v(), v(), v(), v()).prop_map(|(a, b, c, d)| {
                let f = |x: Vec<i32>| x.into_iter().map(f64::from).collect::<Vec<_>>();
                let mut t = table(f(a), f(b), f(c), f(d));
                let (sc, si) = (t.s_c.clone().unwrap(), t.s_i.clone().unwrap());
                t.a = Some(sc.iter().zip(&si).map(|(x, y)| x - y).collect());
                t
            })
        })
    }

    proptest! {
        #[test]
        fn budgets_are_exact(t in arb_table()) {
            for s in Strategy::ALL {
                let r = if_prune(&t, s, &PruneFractions::default()).unwrap();
                r.validate(&t.ids).unwrap();
            }
        }

        #[test]
        fn correct_prune_is_dominance_closed(t in arb_table()) {
            let r = if_prune(&t, Strategy::Correct, &PruneFractions::default()).unwrap();
            let (s, rk) = (t.s_c.as_ref().unwrap(), t.r_c.as_ref().unwrap());
            for &p in &r.pruned_ids {
                for y in 0..t.len() {
                    if s[y] < s[p as usize] && rk[y] > rk[p as usize] {
                        prop_assert!(r.pruned_ids.contains(&(y as u64)));
                    }
                }
            }
        }
    }
}
