//! Compares EK-FAC influence with actual leave-one-out retraining of the
//! model's convex readout head.

mod common;

use ifprune::pipeline::{loo_oracle, Experiment};
use ifprune::stats::spearman;

fn main() -> ifprune::Result<()> {
    let cfg = common::small_config("influence");
    let mut exp = Experiment::new(cfg.clone())?;
    let (train, _, _) = exp.generate()?;
    let queries = exp.flip_query_examples(cfg.seeds[0])?;
    let ids: Vec<u64> = train.value.iter().take(60).map(|e| e.id).collect();

    let o = loo_oracle(&cfg, &ids, &queries)?;
    println!("{} candidates against {} flip queries", o.candidate_ids.len(), o.query_ids.len());
    println!("Spearman(EK-FAC influence, LOO delta) = {:.3}", spearman(&o.influence, &o.deltas));
    if let Some(exact) = &o.exact_influence {
        println!("Spearman(exact influence,  LOO delta) = {:.3}", spearman(exact, &o.deltas));
    }
    for i in 0..5 {
        println!("  id {:>3}: delta {:+.3e}, influence {:+.3e}", o.candidate_ids[i], o.deltas[i], o.influence[i]);
    }
    Ok(())
}
