//! One method per cached stage. Every stage keys its artifact directory on
//! the configuration it reads and the hashes of the artifacts it consumes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{file_sha256, write_bytes};
use crate::datagen::{generate_clean, generate_corpus, read_jsonl, write_jsonl, Corpus, Example};
use crate::ekfac::{estimate_factors, fit_basis, EkfacBasis};
use crate::error::{Error, Result};
use crate::evalharness::{benchmark_pass_at_1, build_flip_sets, greedy_accuracy, select_best_checkpoint, FlipSets};
use crate::influence::{influence_matrix, load_matrix, save_matrix, InfluenceMatrix, Provenance};
use crate::pruning::{baseline_select, if_prune, Baseline, PruneResult, Strategy};
use crate::scoring::ScoreTable;
use crate::tinymodel::{init_model, train, Checkpoint, TrainConfig};

use super::run::{Experiment, Hashed};

/// Bumped whenever a stage's on-disk format or semantics change.
const STAGE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftSummary {
    pub snapshot_epochs: Vec<usize>,
    pub epoch_losses: Vec<f64>,
    /// Greedy validation accuracy of each snapshot.
    pub val_accuracy: Vec<f64>,
    pub selected_index: usize,
    pub selected_epoch: usize,
}

/// A fine-tuning run: the final model and the snapshot chosen on validation.
#[derive(Debug, Clone)]
pub struct SftRun {
    pub final_ckpt: Hashed<Checkpoint>,
    pub selected: Hashed<Checkpoint>,
    pub summary: SftSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalScores {
    pub val_pass1: f64,
    pub test_pass1: Option<f64>,
    pub val_greedy: f64,
    pub test_greedy: Option<f64>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_bytes(path, &serde_json::to_vec_pretty(value)?)
}

fn hashed_ckpt(path: &Path) -> Result<Hashed<Checkpoint>> {
    Ok(Hashed { hash: file_sha256(path)?, value: Checkpoint::load(path)? })
}

fn hashed_jsonl(path: &Path) -> Result<Hashed<Vec<Example>>> {
    Ok(Hashed { hash: file_sha256(path)?, value: read_jsonl(path)? })
}

impl Experiment {
    fn stage<T>(
        &mut self,
        stage: &str,
        material: &impl Serialize,
        files: &[&str],
        make: impl FnOnce(&Path) -> Result<()>,
        load: impl FnOnce(&Path) -> Result<T>,
    ) -> Result<T> {
        let wrap = |e: Error| match e {
            e @ (Error::Stage { .. } | Error::StrategySkipped { .. }) => e,
            other => Error::Stage { stage: stage.to_string(), source: Box::new(other) },
        };
        let key = super::ArtifactStore::key(&(stage, STAGE_VERSION, material)).map_err(wrap)?;
        let dir = self.store.ensure(stage, &key, files, make).map_err(wrap)?;
        for f in files {
            let rec = self.store.record(&dir.join(f)).map_err(wrap)?;
            self.consumed.insert(rec);
        }
        load(&dir).map_err(wrap)
    }

    /// Train / validation / test splits; shared by every seed.
    pub fn generate(&mut self) -> Result<(Hashed<Vec<Example>>, Hashed<Vec<Example>>, Hashed<Vec<Example>>)> {
        let task = self.cfg.task.clone();
        self.stage(
            "generate",
            &task,
            &["train.jsonl", "val.jsonl", "test.jsonl"],
            |d| {
                let Corpus { train, val, test } = generate_corpus(&task)?;
                write_jsonl(&d.join("train.jsonl"), &train)?;
                write_jsonl(&d.join("val.jsonl"), &val)?;
                write_jsonl(&d.join("test.jsonl"), &test)
            },
            |d| Ok((hashed_jsonl(&d.join("train.jsonl"))?, hashed_jsonl(&d.join("val.jsonl"))?, hashed_jsonl(&d.join("test.jsonl"))?)),
        )
    }

    /// The model before fine-tuning: random initialization followed by
    /// training on a clean corpus disjoint from the experiment splits' RNG streams.
    pub fn pretrain(&mut self, seed: u64) -> Result<Hashed<Checkpoint>> {
        let model = self.cfg.model_for(seed);
        let pre = self.cfg.pretrain.clone();
        let mut task = self.cfg.task.task.clone();
        if let Some(ops) = &pre.ops {
            task.ops = ops.clone();
        }
        self.stage(
            "pretrain",
            &(&model, &pre, &task),
            &["base.ckpt"],
            |d| {
                let init = init_model(&model)?;
                if pre.n_examples == 0 {
                    init.save(&d.join("base.ckpt"))?;
                    return Ok(());
                }
                let data = generate_clean(&task, pre.n_examples, pre.data_seed)?;
                let tc = TrainConfig { seed, ..pre.train.clone() };
                let series = train(&init, &data, &tc)?;
                let mut base = series.last().clone();
                base.epoch = 0;
                write_json(&d.join("losses.json"), &series.epoch_losses)?;
                base.save(&d.join("base.ckpt")).map(|_| ())
            },
            |d| hashed_ckpt(&d.join("base.ckpt")),
        )
    }

    /// Fine-tunes `base` on `data`, keeping the final model and the
    /// snapshot with the best greedy validation accuracy.
    pub fn sft(
        &mut self,
        stage: &str,
        seed: u64,
        base: &Hashed<Checkpoint>,
        data: &Hashed<Vec<Example>>,
        val: &Hashed<Vec<Example>>,
    ) -> Result<SftRun> {
        let tc = self.cfg.train_for(seed);
        self.stage(
            stage,
            &(&base.hash, &data.hash, &val.hash, &tc),
            &["final.ckpt", "selected.ckpt", "sft.json"],
            |d| {
                let series = train(&base.value, &data.value, &tc)?;
                let (idx, accs) = select_best_checkpoint(&series.snapshots, &val.value)?;
                let summary = SftSummary {
                    snapshot_epochs: series.snapshots.iter().map(|c| c.epoch).collect(),
                    epoch_losses: series.epoch_losses.clone(),
                    val_accuracy: accs,
                    selected_index: idx,
                    selected_epoch: series.snapshots[idx].epoch,
                };
                series.last().save(&d.join("final.ckpt"))?;
                series.snapshots[idx].save(&d.join("selected.ckpt"))?;
                write_json(&d.join("sft.json"), &summary)
            },
            |d| {
                Ok(SftRun {
                    final_ckpt: hashed_ckpt(&d.join("final.ckpt"))?,
                    selected: hashed_ckpt(&d.join("selected.ckpt"))?,
                    summary: read_json(&d.join("sft.json"))?,
                })
            },
        )
    }

    pub fn flipsets(&mut self, base: &Hashed<Checkpoint>, tuned: &Hashed<Checkpoint>, val: &Hashed<Vec<Example>>) -> Result<Hashed<FlipSets>> {
        self.stage(
            "flipsets",
            &(&base.hash, &tuned.hash, &val.hash),
            &["flips.json"],
            |d| build_flip_sets(&base.value, &tuned.value, &val.value)?.save(&d.join("flips.json")),
            |d| Ok(Hashed { hash: file_sha256(&d.join("flips.json"))?, value: FlipSets::load(&d.join("flips.json"))? }),
        )
    }

    pub fn curvature(&mut self, tuned: &Hashed<Checkpoint>, train_data: &Hashed<Vec<Example>>) -> Result<Hashed<EkfacBasis>> {
        let icfg = self.cfg.influence.clone();
        self.stage(
            "curvature",
            &(&tuned.hash, &train_data.hash, &icfg),
            &["basis.bin"],
            |d| {
                let filter = icfg.filter(&tuned.value.config)?;
                let factors = estimate_factors(&tuned.value, &train_data.value, &filter)?;
                let basis = fit_basis(&factors, &tuned.value, &train_data.value, icfg.damping)?;
                basis.save(&d.join("basis.bin")).map(|_| ())
            },
            |d| Ok(Hashed { hash: file_sha256(&d.join("basis.bin"))?, value: EkfacBasis::load(&d.join("basis.bin"))? }),
        )
    }

    pub fn influence(
        &mut self,
        tuned: &Hashed<Checkpoint>,
        train_data: &Hashed<Vec<Example>>,
        val: &Hashed<Vec<Example>>,
        flips: &Hashed<FlipSets>,
        basis: &Hashed<EkfacBasis>,
    ) -> Result<Hashed<InfluenceMatrix>> {
        let expected = Provenance {
            checkpoint_hash: tuned.value.hash(),
            damping: basis.value.damping,
            filter: basis.value.filter.clone(),
        };
        self.stage(
            "influence",
            &(&tuned.hash, &basis.hash, &flips.hash, &train_data.hash, &val.hash),
            &["datastore/manifest.json"],
            |d| {
                let m = influence_matrix(&tuned.value, &train_data.value, &val.value, &flips.value, &basis.value)?;
                save_matrix(&m, &d.join("datastore")).map(|_| ())
            },
            |d| {
                Ok(Hashed {
                    hash: file_sha256(&d.join("datastore/manifest.json"))?,
                    value: load_matrix(&d.join("datastore"), Some(&expected))?,
                })
            },
        )
    }

    pub fn score(&mut self, matrix: &Hashed<InfluenceMatrix>, train_data: &Hashed<Vec<Example>>) -> Result<Hashed<ScoreTable>> {
        self.stage(
            "score",
            &(&matrix.hash, &train_data.hash),
            &["scores.json", "scores.csv"],
            |d| {
                let t = ScoreTable::build(&matrix.value, &train_data.value)?;
                t.save(&d.join("scores.json"))?;
                t.write_csv(&d.join("scores.csv"))
            },
            |d| Ok(Hashed { hash: file_sha256(&d.join("scores.json"))?, value: ScoreTable::load(&d.join("scores.json"))? }),
        )
    }

    fn stored_prune(
        &mut self,
        material: &impl Serialize,
        data: &[Example],
        select: impl FnOnce() -> Result<PruneResult>,
    ) -> Result<(PruneResult, Hashed<Vec<Example>>)> {
        self.stage(
            "prune",
            material,
            &["result.json", "result.kept.jsonl"],
            |d| {
                let result = select()?;
                result.validate(&data.iter().map(|e| e.id).collect::<Vec<_>>())?;
                result.save(d, "result", data)
            },
            |d| Ok((PruneResult::load(&d.join("result.json"))?, hashed_jsonl(&d.join("result.kept.jsonl"))?)),
        )
    }

    pub fn prune_strategy(
        &mut self,
        strategy: Strategy,
        table: &Hashed<ScoreTable>,
        train_data: &Hashed<Vec<Example>>,
    ) -> Result<(PruneResult, Hashed<Vec<Example>>)> {
        let fractions = self.cfg.fractions;
        let material = (strategy, &table.hash, &train_data.hash, &fractions);
        self.stored_prune(&material, &train_data.value, || if_prune(&table.value, strategy, &fractions))
    }

    pub fn prune_baseline(
        &mut self,
        baseline: Baseline,
        seed: u64,
        base: &Hashed<Checkpoint>,
        train_data: &Hashed<Vec<Example>>,
        val: &Hashed<Vec<Example>>,
    ) -> Result<(PruneResult, Hashed<Vec<Example>>)> {
        let frac = self.cfg.baseline_fraction;
        let key_seed = (baseline == Baseline::Random).then_some(seed);
        // only the perplexity and embedding baselines read the base model
        let base_hash = (baseline != Baseline::Random).then_some(&base.hash);
        let material = (baseline, key_seed, base_hash, &train_data.hash, &val.hash, frac);
        self.stored_prune(&material, &train_data.value, || {
            baseline_select(baseline, &base.value, &train_data.value, &val.value, frac, seed)
        })
    }

    /// pass@1 from sampled completions and greedy accuracy, on the validation and test splits.
    pub fn evaluate(&mut self, seed: u64, ckpt: &Hashed<Checkpoint>, val: &Hashed<Vec<Example>>, test: &Hashed<Vec<Example>>) -> Result<EvalScores> {
        let ecfg = self.cfg.eval.clone();
        self.stage(
            "eval",
            &(&ckpt.hash, &val.hash, &test.hash, &ecfg, seed),
            &["eval.json"],
            |d| {
                let sampling = ecfg.sampling(seed);
                let c = &ckpt.value;
                let nonempty = |s: &[Example], f: &dyn Fn(&[Example]) -> Result<f64>| -> Result<Option<f64>> {
                    if s.is_empty() {
                        Ok(None)
                    } else {
                        f(s).map(Some)
                    }
                };
                let scores = EvalScores {
                    val_pass1: benchmark_pass_at_1(c, &val.value, &sampling, ecfg.n_samples)?,
                    test_pass1: nonempty(&test.value, &|s| benchmark_pass_at_1(c, s, &sampling, ecfg.n_samples))?,
                    val_greedy: greedy_accuracy(c, &val.value),
                    test_greedy: nonempty(&test.value, &|s| Ok(greedy_accuracy(c, s)))?,
                };
                write_json(&d.join("eval.json"), &scores)
            },
            |d| read_json(&d.join("eval.json")),
        )
    }
}
