use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{sha256_hex, write_bytes};
use crate::datagen::Example;
use crate::error::{Error, Result};
use crate::pruning::PruneResult;
use crate::scoring::{histogram, ScoreTable};
use crate::stats::mean;

use super::stages::EvalScores;
use super::{ArtifactStore, ExperimentConfig, StoredFile};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyOutcome {
    pub strategy: String,
    pub seed: u64,
    pub kept: usize,
    pub pruned: usize,
    /// Planted-corruption examples among the pruned ones.
    pub corrupted_pruned: usize,
    pub selected_epoch: Option<usize>,
    pub eval: EvalScores,
}

impl StrategyOutcome {
    pub fn unpruned(strategy: &str, seed: u64, n: usize, selected_epoch: Option<usize>, eval: EvalScores) -> Self {
        Self { strategy: strategy.into(), seed, kept: n, pruned: 0, corrupted_pruned: 0, selected_epoch, eval }
    }

    pub fn pruned(result: &PruneResult, data: &[Example], seed: u64, selected_epoch: usize, eval: EvalScores) -> Self {
        let pruned: BTreeSet<u64> = result.pruned_ids.iter().copied().collect();
        let corrupted_pruned = data.iter().filter(|e| e.corrupted && pruned.contains(&e.id)).count();
        Self {
            strategy: result.strategy.clone(),
            seed,
            kept: result.kept_ids.len(),
            pruned: pruned.len(),
            corrupted_pruned,
            selected_epoch: Some(selected_epoch),
            eval,
        }
    }

    /// Fraction of pruned examples that carry a planted corruption.
    pub fn precision(&self) -> Option<f64> {
        (self.pruned > 0).then(|| self.corrupted_pruned as f64 / self.pruned as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub strategy: String,
    pub seed: u64,
    pub reason: String,
}

/// One line of `results_table.csv`; `seed = None` marks the cross-seed mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub strategy: String,
    pub seed: Option<u64>,
    pub kept: f64,
    pub val_pass1: f64,
    pub test_pass1: Option<f64>,
    pub val_greedy: f64,
    pub test_greedy: Option<f64>,
    pub precision: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub strategy: String,
    pub val_pass1: f64,
    pub test_pass1: Option<f64>,
    pub val_greedy: f64,
    pub test_greedy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipSummary {
    pub seed: u64,
    pub correct: usize,
    pub incorrect: usize,
    pub damping: Option<f64>,
    pub base_hash: String,
    pub tuned_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub seed: u64,
    pub score: String,
    pub bin: usize,
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

/// Per-example scores of the first seed with every selector's pruned flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scatter {
    pub seed: u64,
    pub ids: Vec<u64>,
    pub s_c: Option<Vec<f64>>,
    pub s_i: Option<Vec<f64>>,
    pub pruned: BTreeMap<String, Vec<bool>>,
    pub corrupted: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// Configuration with the output directory cleared.
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub rows: Vec<EvalRow>,
    pub mean_rows: Vec<EvalRow>,
    pub delta_vs_random: Vec<DeltaRow>,
    pub outcomes: Vec<StrategyOutcome>,
    pub flips: Vec<FlipSummary>,
    pub skipped: Vec<SkipRecord>,
    pub scatter: Scatter,
    pub histograms: Vec<HistogramRow>,
    pub prune_results: Vec<PruneResult>,
    pub provenance: Vec<StoredFile>,
}

impl Report {
    pub fn mean_row(&self, strategy: &str) -> Option<&EvalRow> {
        self.mean_rows.iter().find(|r| r.strategy == strategy)
    }
}

fn mean_opt(xs: &[Option<f64>]) -> Option<f64> {
    xs.iter().copied().collect::<Option<Vec<f64>>>().map(|v| mean(&v))
}

fn row_of(o: &StrategyOutcome) -> EvalRow {
    EvalRow {
        strategy: o.strategy.clone(),
        seed: Some(o.seed),
        kept: o.kept as f64,
        val_pass1: o.eval.val_pass1,
        test_pass1: o.eval.test_pass1,
        val_greedy: o.eval.val_greedy,
        test_greedy: o.eval.test_greedy,
        precision: o.precision(),
    }
}

fn mean_of(strategy: &str, rows: &[&EvalRow]) -> EvalRow {
    let f = |g: fn(&EvalRow) -> f64| mean(&rows.iter().map(|r| g(r)).collect::<Vec<_>>());
    let fo = |g: fn(&EvalRow) -> Option<f64>| mean_opt(&rows.iter().map(|r| g(r)).collect::<Vec<_>>());
    EvalRow {
        strategy: strategy.into(),
        seed: None,
        kept: f(|r| r.kept),
        val_pass1: f(|r| r.val_pass1),
        test_pass1: fo(|r| r.test_pass1),
        val_greedy: f(|r| r.val_greedy),
        test_greedy: fo(|r| r.test_greedy),
        precision: fo(|r| r.precision),
    }
}

fn score_columns(t: &ScoreTable) -> Vec<(&'static str, &Vec<f64>)> {
    [("s_C", &t.s_c), ("s_I", &t.s_i), ("r_C", &t.r_c), ("r_I", &t.r_i), ("A", &t.a)]
        .into_iter()
        .filter_map(|(n, c)| c.as_ref().map(|v| (n, v)))
        .collect()
}

pub(crate) fn build_report(cfg: &ExperimentConfig, train: &[Example], runs: &[super::SeedRun], provenance: Vec<StoredFile>) -> Result<Report> {
    let config = ExperimentConfig { outdir: Default::default(), ..cfg.clone() };
    let config_hash = sha256_hex(&serde_json::to_vec(&config)?);
    let outcomes: Vec<StrategyOutcome> = runs.iter().flat_map(|r| r.outcomes.iter().cloned()).collect();
    let rows: Vec<EvalRow> = outcomes.iter().map(row_of).collect();

    let mut order: Vec<String> = Vec::new();
    for r in &rows {
        if !order.contains(&r.strategy) {
            order.push(r.strategy.clone());
        }
    }
    let mean_rows: Vec<EvalRow> = order
        .iter()
        .map(|s| mean_of(s, &rows.iter().filter(|r| &r.strategy == s).collect::<Vec<_>>()))
        .collect();

    let delta_vs_random = match mean_rows.iter().find(|r| r.strategy == "random") {
        Some(rnd) => mean_rows
            .iter()
            .map(|r| DeltaRow {
                strategy: r.strategy.clone(),
                val_pass1: r.val_pass1 - rnd.val_pass1,
                test_pass1: r.test_pass1.zip(rnd.test_pass1).map(|(a, b)| a - b),
                val_greedy: r.val_greedy - rnd.val_greedy,
                test_greedy: r.test_greedy.zip(rnd.test_greedy).map(|(a, b)| a - b),
            })
            .collect(),
        None => Vec::new(),
    };

    let flips = runs
        .iter()
        .map(|r| FlipSummary {
            seed: r.seed,
            correct: r.flips.as_ref().map_or(0, |f| f.correct.len()),
            incorrect: r.flips.as_ref().map_or(0, |f| f.incorrect.len()),
            damping: r.damping,
            base_hash: r.base_hash.clone(),
            tuned_hash: r.tuned_hash.clone(),
        })
        .collect();

    let mut histograms = Vec::new();
    for r in runs {
        if let Some(t) = &r.table {
            for (name, col) in score_columns(t) {
                let h = histogram(col, cfg.histogram_bins)?;
                for (bin, &count) in h.counts.iter().enumerate() {
                    histograms.push(HistogramRow { seed: r.seed, score: name.into(), bin, lower: h.edges[bin], upper: h.edges[bin + 1], count });
                }
            }
        }
    }

    let first = runs.first().ok_or_else(|| Error::input("no seed runs to report"))?;
    let ids: Vec<u64> = train.iter().map(|e| e.id).collect();
    let pruned = first
        .prunes
        .iter()
        .map(|p| {
            let set: BTreeSet<u64> = p.pruned_ids.iter().copied().collect();
            (p.strategy.clone(), ids.iter().map(|i| set.contains(i)).collect())
        })
        .collect();
    if let Some(t) = &first.table {
        if t.ids != ids {
            return Err(Error::input("score table rows do not match the training split"));
        }
    }
    let scatter = Scatter {
        seed: first.seed,
        ids,
        s_c: first.table.as_ref().and_then(|t| t.s_c.clone()),
        s_i: first.table.as_ref().and_then(|t| t.s_i.clone()),
        pruned,
        corrupted: train.iter().map(|e| e.corrupted).collect(),
    };

    Ok(Report {
        config,
        config_hash,
        rows,
        mean_rows,
        delta_vs_random,
        outcomes,
        flips,
        skipped: runs.iter().flat_map(|r| r.skipped.iter().cloned()).collect(),
        scatter,
        histograms,
        prune_results: runs.iter().flat_map(|r| r.prunes.iter().cloned()).collect(),
        provenance,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn scatter_csv(s: &Scatter) -> String {
    let names: Vec<&String> = s.pruned.keys().collect();
    let mut out = String::from("id,s_C,s_I");
    for n in &names {
        let _ = write!(out, ",pruned_{n}");
    }
    out.push_str(",corrupted\n");
    for (i, id) in s.ids.iter().enumerate() {
        let _ = write!(out, "{id},{},{}", opt(s.s_c.as_ref().map(|v| v[i])), opt(s.s_i.as_ref().map(|v| v[i])));
        for n in &names {
            let _ = write!(out, ",{}", u8::from(s.pruned[*n][i]));
        }
        let _ = writeln!(out, ",{}", u8::from(s.corrupted[i]));
    }
    out
}

pub fn histograms_csv(rows: &[HistogramRow]) -> String {
    let mut out = String::from("seed,score,bin,lower,upper,count\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{},{}", r.seed, r.score, r.bin, r.lower, r.upper, r.count);
    }
    out
}

pub fn results_csv(rows: &[EvalRow], mean_rows: &[EvalRow]) -> String {
    let mut out = String::from("strategy,seed,kept,val_pass1,test_pass1,val_greedy,test_greedy,corruption_precision\n");
    for r in rows.iter().chain(mean_rows) {
        let seed = r.seed.map(|s| s.to_string()).unwrap_or_else(|| "mean".into());
        let _ = writeln!(
            out,
            "{},{seed},{},{},{},{},{},{}",
            r.strategy,
            r.kept,
            r.val_pass1,
            opt(r.test_pass1),
            r.val_greedy,
            opt(r.test_greedy),
            opt(r.precision)
        );
    }
    out
}

pub fn delta_csv(rows: &[DeltaRow]) -> String {
    let mut out = String::from("strategy,val_pass1,test_pass1,val_greedy,test_greedy\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.strategy, r.val_pass1, opt(r.test_pass1), r.val_greedy, opt(r.test_greedy));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub files: Vec<StoredFile>,
}

/// Writes the report files and `manifest.json` listing every emitted file
/// and every consumed artifact with its sha256.
pub fn emit_report(report: &Report, outdir: &Path) -> Result<Vec<StoredFile>> {
    let store = ArtifactStore::new(outdir);
    let outputs: [(&str, Vec<u8>); 5] = [
        ("scatter.csv", scatter_csv(&report.scatter).into_bytes()),
        ("histograms.csv", histograms_csv(&report.histograms).into_bytes()),
        ("results_table.csv", results_csv(&report.rows, &report.mean_rows).into_bytes()),
        ("delta_vs_random.csv", delta_csv(&report.delta_vs_random).into_bytes()),
        ("report.json", serde_json::to_vec_pretty(report)?),
    ];
    let mut files: Vec<StoredFile> = Vec::new();
    for (name, bytes) in &outputs {
        let path = outdir.join(name);
        write_bytes(&path, bytes)?;
        files.push(StoredFile { path: store.relative(&path), sha256: sha256_hex(bytes) });
    }
    files.extend(report.provenance.iter().cloned());
    files.sort();
    files.dedup();
    let manifest = Manifest { config_hash: report.config_hash.clone(), files: files.clone() };
    write_bytes(&outdir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(files)
}
