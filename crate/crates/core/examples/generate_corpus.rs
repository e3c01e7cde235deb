//! Generates a small corpus with planted corruptions and prints a few examples.

use ifprune::datagen::{detokenize, generate_corpus, to_jsonl, TaskSpec};

fn main() -> ifprune::Result<()> {
    let spec = TaskSpec { n_train: 40, n_val: 10, n_test: 10, corruption_rate: 0.25, ..TaskSpec::default() };
    let corpus = generate_corpus(&spec)?;
    for e in corpus.train.iter().take(6) {
        let tag = if e.corrupted { "corrupted" } else { "clean" };
        println!("{:>3} [{tag:>9}] {} => {}  (gold {})", e.id, detokenize(&e.prompt_tokens)?, detokenize(&e.completion_tokens)?, e.gold_answer);
    }
    let n_bad = corpus.train.iter().filter(|e| e.corrupted).count();
    println!("train {} ({n_bad} corrupted), val {}, test {}", corpus.train.len(), corpus.val.len(), corpus.test.len());
    println!("first JSONL line: {}", to_jsonl(&corpus.train[..1])?.trim_end());
    Ok(())
}
