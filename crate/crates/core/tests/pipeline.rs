use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ifprune::error::Error;
use ifprune::pipeline::{run_experiment, Experiment, ExperimentConfig, PretrainConfig};
use ifprune::pruning::{Baseline, Strategy};
use serde_json::Value;
use sha2::{Digest, Sha256};

fn tiny(outdir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.task.n_train = 60;
    cfg.task.n_val = 30;
    cfg.task.n_test = 20;
    cfg.model.hidden_dim = 8;
    cfg.pretrain = PretrainConfig { n_examples: 120, ..PretrainConfig::default() };
    cfg.pretrain.train.epochs = 3;
    cfg.pretrain.train.snapshot_every = 3;
    cfg.train.epochs = 2;
    cfg.eval.n_samples = 2;
    cfg.seeds = vec![0, 1];
    cfg.outdir = outdir.to_path_buf();
    cfg
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

fn stage_dirs(outdir: &Path) -> Vec<String> {
    let mut names: Vec<String> =
        fs::read_dir(outdir.join("artifacts")).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    names.sort();
    names
}

#[test]
fn random_only_runs_skip_every_influence_stage() {
    let out = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { strategies: Vec::new(), baselines: vec![Baseline::Random], ..tiny(out.path()) };
    let report = run_experiment(&cfg).unwrap();
    assert_eq!(stage_dirs(out.path()), ["eval", "generate", "pretrain", "prune", "retrain", "train"]);
    assert!(report.flips.iter().all(|f| f.damping.is_none()));
    assert!(report.histograms.is_empty());
}

#[test]
fn deleted_artifacts_are_rebuilt_bit_exactly() {
    let out = tempfile::tempdir().unwrap();
    let cfg = tiny(out.path());
    run_experiment(&cfg).unwrap();
    let snapshot: BTreeMap<PathBuf, Vec<u8>> =
        files_under(&out.path().join("artifacts")).into_iter().map(|p| (p.clone(), fs::read(&p).unwrap())).collect();
    // one file from every stage directory
    let mut seen = std::collections::BTreeSet::new();
    for p in snapshot.keys() {
        let stage = p.strip_prefix(out.path().join("artifacts")).unwrap().iter().next().unwrap().to_owned();
        if seen.insert(stage) {
            fs::remove_file(p).unwrap();
        }
    }
    assert_eq!(seen.len(), stage_dirs(out.path()).len());
    run_experiment(&cfg).unwrap();
    for (p, bytes) in &snapshot {
        assert_eq!(&fs::read(p).unwrap(), bytes, "{} differs after rebuild", p.display());
    }
}

#[test]
fn manifest_hashes_resolve_and_tables_are_consistent() {
    let out = tempfile::tempdir().unwrap();
    let cfg = tiny(out.path());
    let report = run_experiment(&cfg).unwrap();

    let manifest: Value = serde_json::from_slice(&fs::read(out.path().join("manifest.json")).unwrap()).unwrap();
    let files = manifest["files"].as_array().unwrap();
    assert!(files.len() > 10);
    for f in files {
        let path = out.path().join(f["path"].as_str().unwrap());
        let digest = hex::encode(Sha256::digest(fs::read(&path).unwrap()));
        assert_eq!(digest, f["sha256"].as_str().unwrap(), "{}", path.display());
    }

    let csv = fs::read_to_string(out.path().join("results_table.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let mut by_strategy: BTreeMap<String, (Vec<Vec<f64>>, Option<Vec<f64>>)> = BTreeMap::new();
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        let values: Vec<f64> = cells[2..7].iter().map(|c| c.parse().unwrap()).collect();
        let entry = by_strategy.entry(cells[0].to_string()).or_default();
        if cells[1] == "mean" {
            assert!(entry.1.replace(values).is_none());
        } else {
            entry.0.push(values);
        }
    }
    assert_eq!(header[..7], ["strategy", "seed", "kept", "val_pass1", "test_pass1", "val_greedy", "test_greedy"]);
    let names: std::collections::BTreeSet<&str> = report.rows.iter().map(|r| r.strategy.as_str()).collect();
    assert_eq!(by_strategy.len(), names.len());
    assert!(by_strategy.contains_key("none") && by_strategy.contains_key("random"));
    for (name, (seeds, mean)) in &by_strategy {
        let ran = report.rows.iter().filter(|r| r.strategy == *name).count();
        assert_eq!(seeds.len(), ran, "{name}");
        assert!(names.len() <= 2 + Strategy::ALL.len() + Baseline::ALL.len());
        let mean = mean.as_ref().unwrap();
        for j in 0..mean.len() {
            let m = seeds.iter().map(|r| r[j]).sum::<f64>() / seeds.len() as f64;
            assert!((m - mean[j]).abs() <= 1e-12, "{name} column {j}");
        }
    }

    let scatter = fs::read_to_string(out.path().join("scatter.csv")).unwrap();
    assert_eq!(scatter.lines().count(), 1 + cfg.task.n_train);
    let delta = fs::read_to_string(out.path().join("delta_vs_random.csv")).unwrap();
    let random = delta.lines().find(|l| l.starts_with("random,")).unwrap();
    assert!(random.split(',').skip(1).all(|c| c.is_empty() || c.parse::<f64>().unwrap() == 0.0));
}

#[test]
fn a_corrupt_artifact_fails_with_its_stage_name() {
    let out = tempfile::tempdir().unwrap();
    let cfg = tiny(out.path());
    let mut exp = Experiment::new(cfg.clone()).unwrap();
    let ((train, _, _), _, tuned) = exp.tuned(0).unwrap();
    exp.curvature(&tuned.final_ckpt, &train).unwrap();
    let basis = files_under(&out.path().join("artifacts/curvature")).pop().unwrap();
    fs::write(&basis, b"not a basis").unwrap();
    let mut fresh = Experiment::new(cfg).unwrap();
    match fresh.curvature(&tuned.final_ckpt, &train) {
        Err(Error::Stage { stage, .. }) => assert_eq!(stage, "curvature"),
        other => panic!("expected a curvature stage error, got {other:?}"),
    }
}

#[test]
fn loo_oracle_edges() {
    let out = tempfile::tempdir().unwrap();
    let cfg = tiny(out.path());
    let mut exp = Experiment::new(cfg.clone()).unwrap();
    let queries = exp.flip_query_examples(0).unwrap();
    let empty = ifprune::pipeline::loo_oracle(&cfg, &[], &queries).unwrap();
    assert!(empty.deltas.is_empty() && empty.influence.is_empty());
    let too_many: Vec<u64> = (0..201).collect();
    assert!(matches!(ifprune::pipeline::loo_oracle(&cfg, &too_many, &queries), Err(Error::Refusal(_))));
}

#[test]
fn full_retrain_loo_runs_from_the_base_model() {
    let out = tempfile::tempdir().unwrap();
    let mut cfg = tiny(out.path());
    cfg.loo.mode = ifprune::pipeline::LooMode::FullRetrain;
    let mut exp = Experiment::new(cfg.clone()).unwrap();
    let queries = exp.flip_query_examples(0).unwrap();
    let queries = if queries.is_empty() { exp.generate().unwrap().1.value[..3].to_vec() } else { queries };
    let o = exp.loo(0, &[0, 1], &queries).unwrap();
    assert_eq!(o.deltas.len(), 2);
    assert_eq!(o.influence.len(), 2);
    assert!(o.deltas.iter().chain(&o.influence).all(|x| x.is_finite()));
}
