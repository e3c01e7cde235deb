//! Trains the model from scratch on clean data, then decodes greedily and by sampling.

use ifprune::datagen::{detokenize, generate_clean, ChainTask};
use ifprune::evalharness::{greedy_accuracy, select_best_checkpoint};
use ifprune::tinymodel::{decode, init_model, mean_loss, train, DecodeMode, ModelConfig, SamplingConfig, TrainConfig};

fn main() -> ifprune::Result<()> {
    let task = ChainTask::default();
    let data = generate_clean(&task, 2000, 1)?;
    let val = generate_clean(&task, 100, 2)?;
    let model = ModelConfig::default();
    let init = init_model(&model)?;
    println!("{} parameters, initial loss {:.3}", init.params.len(), mean_loss(&init, &data)?);

    let series = train(&init, &data, &TrainConfig { epochs: 20, snapshot_every: 5, ..TrainConfig::default() })?;
    let (best, accs) = select_best_checkpoint(&series.snapshots, &val)?;
    let ckpt = &series.snapshots[best];
    println!("snapshot accuracies {accs:.3?}, selected epoch {}", ckpt.epoch);
    println!("final loss {:.3}, greedy val accuracy {:.3}", mean_loss(ckpt, &data)?, greedy_accuracy(ckpt, &val));

    let q = &val[0];
    let sampling = SamplingConfig::default();
    let greedy = decode(ckpt, &q.prompt_tokens, DecodeMode::Greedy, &sampling, 1)?;
    println!("{} => {}", detokenize(&q.prompt_tokens)?, detokenize(&greedy[0])?);
    for s in decode(ckpt, &q.prompt_tokens, DecodeMode::Sampled, &sampling, 3)? {
        println!("  sampled: {}", detokenize(&s)?);
    }
    Ok(())
}
