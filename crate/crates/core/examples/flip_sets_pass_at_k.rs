//! Builds the correct/incorrect flip sets between a base and a fine-tuned
//! model and evaluates both with the unbiased pass@k estimator.

mod common;

use ifprune::evalharness::{benchmark_pass_at_1, build_flip_sets, greedy_accuracy, pass_at_k};
use ifprune::pipeline::Experiment;
use ifprune::tinymodel::SamplingConfig;

fn main() -> ifprune::Result<()> {
    let mut exp = Experiment::new(common::small_config("flips"))?;
    let ((_, val, _), base, tuned) = exp.tuned(0)?;
    let (base, tuned) = (&base.value, &tuned.final_ckpt.value);

    let flips = build_flip_sets(base, tuned, &val.value)?;
    println!("greedy val accuracy: base {:.3}, tuned {:.3}", greedy_accuracy(base, &val.value), greedy_accuracy(tuned, &val.value));
    println!("|C| = {} became correct, |I| = {} became incorrect", flips.correct.len(), flips.incorrect.len());

    let sampling = SamplingConfig::default();
    for (name, ckpt) in [("base", base), ("tuned", tuned)] {
        println!("{name} pass@1 over 8 samples: {:.3}", benchmark_pass_at_1(ckpt, &val.value, &sampling, 8)?);
    }
    for k in [1, 2, 5] {
        println!("pass@{k} with 3 of 10 samples correct: {:.4}", pass_at_k(10, 3, k)?);
    }
    Ok(())
}
