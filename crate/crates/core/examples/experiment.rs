//! Runs the full cached experiment over two seeds and writes the report.
//! Pass a JSON config path to override the built-in small configuration.

mod common;

use ifprune::pipeline::{emit_report, Experiment, ExperimentConfig};

fn main() -> ifprune::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cfg = match std::env::args().nth(1) {
        Some(p) => ExperimentConfig::load(p.as_ref())?,
        None => ExperimentConfig { seeds: vec![0, 1], ..common::small_config("experiment") },
    };
    let mut exp = Experiment::new(cfg)?;
    let report = exp.run_all()?;
    emit_report(&report, &exp.cfg.outdir)?;
    println!("{:>13} {:>5} {:>9} {:>10} {:>9}", "strategy", "kept", "val_pass1", "val_greedy", "precision");
    for r in &report.mean_rows {
        let precision = r.precision.map(|p| format!("{p:.3}")).unwrap_or_default();
        println!("{:>13} {:>5.0} {:>9.4} {:>10.4} {precision:>9}", r.strategy, r.kept, r.val_pass1, r.val_greedy);
    }
    for s in &report.skipped {
        println!("skipped {} on seed {}: {}", s.strategy, s.seed, s.reason);
    }
    println!("report written to {}", exp.cfg.outdir.display());
    Ok(())
}
