use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use ifprune::error::Error;
use ifprune::pipeline::{emit_report, Experiment, ExperimentConfig};

#[derive(Parser)]
#[command(name = "ifprune", about = "Influence-based pruning of corrupted fine-tuning data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON); defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured output directory.
    #[arg(long)]
    outdir: Option<PathBuf>,
}

#[derive(Args)]
struct Seeded {
    #[command(flatten)]
    common: Common,
    /// Seed to run; defaults to the first configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train, validation and test splits.
    Generate(Common),
    /// Pretrain the base model and fine-tune it on the full training set.
    Train(Seeded),
    /// Compare base and tuned greedy outputs on validation.
    Flipsets(Seeded),
    /// Fit the EK-FAC curvature of the tuned model.
    Curvature(Seeded),
    /// Compute the train-by-query influence datastore.
    Influence(Seeded),
    /// Aggregate influence into per-example scores.
    Score(Seeded),
    /// Run every configured pruning strategy and baseline.
    Prune(Seeded),
    /// Fine-tune from the base model on each kept set.
    Retrain(Seeded),
    /// Evaluate every model of one seed.
    Eval(Seeded),
    /// Leave-one-out retraining oracle against influence.
    Loo {
        #[command(flatten)]
        seeded: Seeded,
        /// Training ids to leave out; defaults to the first `--count` ids.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<u64>,
        /// Defaults to `loo.candidates` from the config.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Assemble the report from cached artifacts, running missing stages.
    Report(Common),
    /// Run every stage for every seed and write the report.
    RunAll(Common),
}

fn load_config(c: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(o) = &c.outdir {
        cfg.outdir = o.clone();
    }
    Ok(cfg)
}

fn experiment(c: &Common) -> anyhow::Result<Experiment> {
    Ok(Experiment::new(load_config(c)?)?)
}

fn seeded(s: &Seeded) -> anyhow::Result<(Experiment, u64)> {
    let exp = experiment(&s.common)?;
    let seed = s.seed.unwrap_or(exp.cfg.seeds[0]);
    Ok((exp, seed))
}

fn print_json(v: &impl serde::Serialize) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Generate(c) => {
            let (train, val, test) = experiment(&c)?.generate()?;
            let corrupted = train.value.iter().filter(|e| e.corrupted).count();
            println!("train {} ({corrupted} corrupted), val {}, test {}", train.value.len(), val.value.len(), test.value.len());
        }
        Command::Train(s) => {
            let (mut exp, seed) = seeded(&s)?;
            let (_, base, t) = exp.tuned(seed)?;
            println!("base {}\ntuned {}", base.hash, t.final_ckpt.hash);
            print_json(&t.summary)?;
        }
        Command::Flipsets(s) => {
            let (mut exp, seed) = seeded(&s)?;
            let ((_, val, _), base, t) = exp.tuned(seed)?;
            let flips = exp.flipsets(&base, &t.final_ckpt, &val)?;
            println!("C {} I {}", flips.value.correct.len(), flips.value.incorrect.len());
        }
        Command::Curvature(s) => {
            let (mut exp, seed) = seeded(&s)?;
            let ((train, _, _), _, t) = exp.tuned(seed)?;
            let basis = exp.curvature(&t.final_ckpt, &train)?;
            println!("layers {:?}, parameters {}, damping {:.6e}", basis.value.filter, basis.value.param_count(), basis.value.damping);
        }
        Command::Influence(s) => {
            let (mut exp, seed) = seeded(&s)?;
            let ((train, val, _), base, t) = exp.tuned(seed)?;
            let flips = exp.flipsets(&base, &t.final_ckpt, &val)?;
            let basis = exp.curvature(&t.final_ckpt, &train)?;
            let m = exp.influence(&t.final_ckpt, &train, &val, &flips, &basis)?;
            println!("influence {} x {} ({})", m.value.n_rows(), m.value.n_cols(), m.hash);
        }
        Command::Score(s) => {
            let (mut exp, seed) = seeded(&s)?;
            let sel = exp.selections(seed)?;
            match sel.table {
                Some(t) => println!("{} rows, sigma_C {:?}, sigma_I {:?}", t.len(), t.sigma_c, t.sigma_i),
                None => println!("no scores: influence strategies skipped"),
            }
        }
        Command::Prune(s) => {
            let (mut exp, seed) = seeded(&s)?;
            let sel = exp.selections(seed)?;
            for (r, _) in &sel.kept {
                println!("{}: kept {}, pruned {}", r.strategy, r.kept_ids.len(), r.pruned_ids.len());
            }
            for k in &sel.skipped {
                println!("{}: skipped ({})", k.strategy, k.reason);
            }
        }
        Command::Retrain(s) => {
            let (mut exp, seed) = seeded(&s)?;
            for (r, sft) in exp.retrain_all(seed)? {
                println!("{}: selected epoch {} ({})", r.strategy, sft.summary.selected_epoch, sft.selected.hash);
            }
        }
        Command::Eval(s) => {
            let (mut exp, seed) = seeded(&s)?;
            let run = exp.run_seed(seed)?;
            for o in &run.outcomes {
                print_json(o)?;
            }
        }
        Command::Loo { seeded: s, ids, count } => {
            let (mut exp, seed) = seeded(&s)?;
            let ids = if ids.is_empty() {
                let (train, _, _) = exp.generate()?;
                train.value.iter().take(count.unwrap_or(exp.cfg.loo.candidates)).map(|e| e.id).collect()
            } else {
                ids
            };
            let queries = exp.flip_query_examples(seed)?;
            print_json(&exp.loo(seed, &ids, &queries)?)?;
        }
        Command::Report(c) | Command::RunAll(c) => {
            let mut exp = experiment(&c)?;
            let report = exp.run_all()?;
            let files = emit_report(&report, &exp.cfg.outdir)?;
            let (artifacts, outputs): (Vec<_>, Vec<_>) = files.iter().partition(|f| f.path.starts_with("artifacts"));
            for f in outputs {
                println!("{} {}", f.sha256, exp.cfg.outdir.join(&f.path).display());
            }
            println!("{} artifacts listed in {}", artifacts.len(), exp.cfg.outdir.join("manifest.json").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let name = command_name(&cli.command);
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let stage = match e.downcast_ref::<Error>() {
                Some(Error::Stage { stage, .. }) => stage.clone(),
                _ => name.to_string(),
            };
            eprintln!("stage {stage} failed: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Generate(_) => "generate",
        Command::Train(_) => "train",
        Command::Flipsets(_) => "flipsets",
        Command::Curvature(_) => "curvature",
        Command::Influence(_) => "influence",
        Command::Score(_) => "score",
        Command::Prune(_) => "prune",
        Command::Retrain(_) => "retrain",
        Command::Eval(_) => "eval",
        Command::Loo { .. } => "loo",
        Command::Report(_) => "report",
        Command::RunAll(_) => "run-all",
    }
}
