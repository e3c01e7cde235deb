use std::collections::BTreeSet;

use crate::datagen::Example;
use crate::error::Result;
use crate::evalharness::FlipSets;
use crate::pruning::PruneResult;
use crate::scoring::ScoreTable;
use crate::tinymodel::Checkpoint;

use super::report::{build_report, emit_report, Report, SkipRecord, StrategyOutcome};
use super::{ArtifactStore, ExperimentConfig, SftRun, StoredFile};

/// A value together with the sha256 of the artifact it was loaded from.
#[derive(Debug, Clone, PartialEq)]
pub struct Hashed<T> {
    pub value: T,
    pub hash: String,
}

/// Orchestrates the cached stages of one experiment configuration.
#[derive(Debug)]
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub store: ArtifactStore,
    pub(crate) consumed: BTreeSet<StoredFile>,
}

pub type Splits = (Hashed<Vec<Example>>, Hashed<Vec<Example>>, Hashed<Vec<Example>>);

/// Pruned training sets of one seed with the intermediate products that led to them.
#[derive(Debug, Clone, Default)]
pub struct Selections {
    pub kept: Vec<(PruneResult, Hashed<Vec<Example>>)>,
    pub skipped: Vec<SkipRecord>,
    pub flips: Option<FlipSets>,
    pub damping: Option<f64>,
    pub table: Option<ScoreTable>,
}

/// Everything one seed contributes to the report.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub base_hash: String,
    pub tuned_hash: String,
    pub flips: Option<FlipSets>,
    pub damping: Option<f64>,
    pub table: Option<ScoreTable>,
    pub prunes: Vec<PruneResult>,
    pub outcomes: Vec<StrategyOutcome>,
    pub skipped: Vec<SkipRecord>,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let store = ArtifactStore::new(cfg.outdir.clone());
        Ok(Self { cfg, store, consumed: BTreeSet::new() })
    }

    /// Artifact files read so far, sorted by path.
    pub fn consumed(&self) -> Vec<StoredFile> {
        self.consumed.iter().cloned().collect()
    }

    /// Splits, base model and full-data fine-tune for `seed`.
    pub fn tuned(&mut self, seed: u64) -> Result<(Splits, Hashed<Checkpoint>, SftRun)> {
        let splits = self.generate()?;
        let base = self.pretrain(seed)?;
        let tuned = self.sft("train", seed, &base, &splits.0, &splits.1)?;
        Ok((splits, base, tuned))
    }

    /// Every configured strategy and baseline selection for `seed`.
    pub fn selections(&mut self, seed: u64) -> Result<Selections> {
        let ((train, val, _), base, tuned) = self.tuned(seed)?;
        let mut sel = Selections::default();
        if self.cfg.needs_influence() {
            let flips = self.flipsets(&base, &tuned.final_ckpt, &val)?;
            sel.flips = Some(flips.value.clone());
            if flips.value.correct.is_empty() && flips.value.incorrect.is_empty() {
                for s in &self.cfg.strategies {
                    sel.skipped.push(SkipRecord { strategy: s.name().into(), seed, reason: "both flip sets are empty".into() });
                }
            } else {
                let basis = self.curvature(&tuned.final_ckpt, &train)?;
                sel.damping = Some(basis.value.damping);
                let matrix = self.influence(&tuned.final_ckpt, &train, &val, &flips, &basis)?;
                let table = self.score(&matrix, &train)?;
                sel.table = Some(table.value.clone());
                for s in self.cfg.strategies.clone() {
                    match self.prune_strategy(s, &table, &train) {
                        Ok(p) => sel.kept.push(p),
                        Err(e) if e.is_skip() => {
                            log::warn!("seed {seed}: {e}");
                            sel.skipped.push(SkipRecord { strategy: s.name().into(), seed, reason: e.to_string() });
                        }
                        Err(e) => return Err(e),
                    }
                }
            }
        }
        for b in self.cfg.baselines.clone() {
            sel.kept.push(self.prune_baseline(b, seed, &base, &train, &val)?);
        }
        Ok(sel)
    }

    /// Fine-tunes from the base model on every kept set of `seed`.
    pub fn retrain_all(&mut self, seed: u64) -> Result<Vec<(PruneResult, SftRun)>> {
        let ((_, val, _), base, _) = self.tuned(seed)?;
        let sel = self.selections(seed)?;
        sel.kept
            .into_iter()
            .map(|(result, kept)| Ok((result, self.sft("retrain", seed, &base, &kept, &val)?)))
            .collect()
    }

    pub fn run_seed(&mut self, seed: u64) -> Result<SeedRun> {
        let ((train, val, test), base, tuned) = self.tuned(seed)?;
        let n = train.value.len();
        let base_eval = self.evaluate(seed, &base, &val, &test)?;
        let none_eval = self.evaluate(seed, &tuned.selected, &val, &test)?;
        let mut outcomes = vec![
            StrategyOutcome::unpruned("base", seed, n, None, base_eval),
            StrategyOutcome::unpruned("none", seed, n, Some(tuned.summary.selected_epoch), none_eval),
        ];
        let sel = self.selections(seed)?;
        let mut prunes = Vec::with_capacity(sel.kept.len());
        for (result, kept) in &sel.kept {
            let sft = self.sft("retrain", seed, &base, kept, &val)?;
            let eval = self.evaluate(seed, &sft.selected, &val, &test)?;
            outcomes.push(StrategyOutcome::pruned(result, &train.value, seed, sft.summary.selected_epoch, eval));
            prunes.push(result.clone());
        }
        Ok(SeedRun {
            seed,
            base_hash: base.hash.clone(),
            tuned_hash: tuned.final_ckpt.hash.clone(),
            flips: sel.flips,
            damping: sel.damping,
            table: sel.table,
            prunes,
            outcomes,
            skipped: sel.skipped,
        })
    }

    /// Runs every seed and assembles the report without writing it.
    pub fn run_all(&mut self) -> Result<Report> {
        let mut runs = Vec::with_capacity(self.cfg.seeds.len());
        for seed in self.cfg.seeds.clone() {
            log::info!("seed {seed}");
            runs.push(self.run_seed(seed)?);
        }
        let (train, _, _) = self.generate()?;
        build_report(&self.cfg, &train.value, &runs, self.consumed())
    }
}

/// Runs (or resumes from cache) the full experiment and writes the report files.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    let mut exp = Experiment::new(cfg.clone())?;
    let report = exp.run_all()?;
    emit_report(&report, &cfg.outdir)?;
    Ok(report)
}
