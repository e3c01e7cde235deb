//! Aggregates influence into per-example scores, prunes with every influence
//! strategy and every baseline, and reports how many corruptions each removed.

mod common;

use std::collections::HashSet;

use ifprune::pruning::{baseline_select, if_prune, Baseline, PruneFractions, PruneResult, Strategy};
use ifprune::pipeline::Experiment;
use ifprune::scoring::{distribution_stats, ScoreTable};

fn report(r: &PruneResult, bad: &HashSet<u64>) {
    let hits = r.pruned_ids.iter().filter(|i| bad.contains(i)).count();
    println!("{:>13}: pruned {:>3}, of which corrupted {:>3} (precision {:.2})", r.strategy, r.pruned_ids.len(), hits, hits as f64 / r.pruned_ids.len() as f64);
}

fn main() -> ifprune::Result<()> {
    let mut exp = Experiment::new(common::small_config("influence"))?;
    let ((train, val, _), base, tuned) = exp.tuned(0)?;
    let flips = exp.flipsets(&base, &tuned.final_ckpt, &val)?;
    let basis = exp.curvature(&tuned.final_ckpt, &train)?;
    let m = exp.influence(&tuned.final_ckpt, &train, &val, &flips, &basis)?;

    let table = ScoreTable::build(&m.value, &train.value)?;
    for (name, col) in [("s_C", &table.s_c), ("s_I", &table.s_i), ("A", &table.a)] {
        if let Some(s) = col {
            let d = distribution_stats(s, 10)?;
            println!("{name}: sigma {:.3e}, histogram {:?}", d.sigma, d.histogram.counts);
        }
    }

    let bad: HashSet<u64> = train.value.iter().filter(|e| e.corrupted).map(|e| e.id).collect();
    println!("{} of {} training examples are corrupted", bad.len(), train.value.len());
    let fractions = PruneFractions::default();
    for s in Strategy::ALL {
        match if_prune(&table, s, &fractions) {
            Ok(r) => report(&r, &bad),
            Err(e) if e.is_skip() => println!("{:>13}: skipped ({e})", s.name()),
            Err(e) => return Err(e),
        }
    }
    for b in Baseline::ALL {
        report(&baseline_select(b, &base.value, &train.value, &val.value, 0.1, 0)?, &bad);
    }
    Ok(())
}
