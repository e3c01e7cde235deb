//! Computes the train-by-query influence matrix for the flip-set queries,
//! stores it as a sharded datastore and reloads it with a provenance check.

mod common;

use ifprune::ekfac::{estimate_factors, fit_basis, Damping};
use ifprune::evalharness::build_flip_sets;
use ifprune::influence::{influence_matrix, load_matrix, save_matrix, FlipTag};
use ifprune::pipeline::Experiment;
use ifprune::tinymodel::LayerFilter;

fn main() -> ifprune::Result<()> {
    let mut exp = Experiment::new(common::small_config("influence"))?;
    let ((train, val, _), base, tuned) = exp.tuned(0)?;
    let tuned = &tuned.final_ckpt.value;
    let flips = build_flip_sets(&base.value, tuned, &val.value)?;

    let filter = LayerFilter::mlp(&tuned.config);
    let factors = estimate_factors(tuned, &train.value, &filter)?;
    let basis = fit_basis(&factors, tuned, &train.value, Damping::default())?;
    let m = influence_matrix(tuned, &train.value, &val.value, &flips, &basis)?;
    println!("influence matrix {} x {} (C columns {}, I columns {})", m.n_rows(), m.n_cols(),
        m.columns_tagged(FlipTag::Correct).len(), m.columns_tagged(FlipTag::Incorrect).len());

    let dir = std::env::temp_dir().join("ifprune-examples").join("datastore");
    let hash = save_matrix(&m, &dir)?;
    let back = load_matrix(&dir, Some(&m.provenance))?;
    assert_eq!(back, m);
    println!("stored at {} (sha256 {hash}), reloaded bit-exactly", dir.display());

    let mut by_row: Vec<(f64, u64, bool)> = (0..m.n_rows())
        .map(|r| (m.row(r).iter().sum::<f64>() / m.n_cols() as f64, m.row_ids[r], train.value[r].corrupted))
        .collect();
    by_row.sort_by(|a, b| a.0.total_cmp(&b.0));
    println!("lowest mean raw influence (id, corrupted):");
    for (v, id, bad) in by_row.iter().take(5) {
        println!("  {id:>4} {bad:<5} {v:+.4e}");
    }
    Ok(())
}
