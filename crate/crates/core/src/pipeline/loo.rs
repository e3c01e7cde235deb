//! Leave-one-out retraining oracle.
//!
//! Convex-head mode freezes every layer below the readout at the tuned
//! model and refits the readout under
//!
//! ```text
//! J(theta) = 1/|S| sum_{d in S} mean_t CE(W h_t + b, y_t) + l2/2 |theta|^2
//! ```
//!
//! which is strictly convex, so each leave-one-out optimum is unique and is
//! reached by Newton iterations started at the full-data optimum.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::Example;
use crate::ekfac::{estimate_factors, fit_basis, Damping};
use crate::error::{Error, Result};
use crate::influence::{flip_queries, influence_with_solver, Provenance, QueryColumn};
use crate::stats::{dot, mean};
use crate::tinymodel::{log_softmax, softmax, Checkpoint, LayerFilter, LayerSpec};

use super::{Experiment, ExperimentConfig, LooConfig, LooMode};

/// Largest candidate list the oracle accepts.
pub const LOO_CANDIDATE_CAP: usize = 200;

const CHUNK: usize = 16;
const FULL_STEP_DECREMENT: f64 = 1e-10;

/// Frozen readout inputs of one example: bias-augmented final hidden states
/// at each loss position and the next-token targets.
#[derive(Debug, Clone)]
pub(crate) struct HeadExample {
    feats: Vec<Vec<f64>>,
    targets: Vec<usize>,
}

/// The readout-only problem at fixed features.
#[derive(Debug, Clone)]
pub struct ConvexHead {
    spec: LayerSpec,
    l2: f64,
    ids: Vec<u64>,
    examples: Vec<HeadExample>,
}

fn head_example(ckpt: &Checkpoint, spec: &LayerSpec, ex: &Example) -> Result<HeadExample> {
    let seq = ex.sequence();
    let pos: Vec<usize> = (1..ex.len()).filter(|&i| ex.loss_mask[i]).map(|i| i - 1).collect();
    if pos.is_empty() || ex.prompt_tokens.is_empty() {
        return Err(Error::input(format!("example {} has no loss positions", ex.id)));
    }
    let net = ckpt.network();
    let tr = net.forward_from(&seq, pos[0])?;
    let feats = pos.iter().map(|&t| net.layer_input(&tr, t, spec)).collect::<Result<Vec<_>>>()?;
    Ok(HeadExample { feats, targets: pos.iter().map(|&t| seq[t + 1] as usize).collect() })
}

impl ConvexHead {
    pub fn new(tuned: &Checkpoint, data: &[Example], l2: f64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::input("convex head needs training data"));
        }
        let spec = tuned.config.layout().into_iter().find(|l| l.name == "readout").expect("readout layer");
        let examples = data.par_iter().map(|e| head_example(tuned, &spec, e)).collect::<Result<Vec<_>>>()?;
        Ok(Self { spec, l2, ids: data.iter().map(|e| e.id).collect(), examples })
    }

    pub fn param_count(&self) -> usize {
        self.spec.len
    }

    fn index(&self, c: usize, j: usize) -> usize {
        if j < self.spec.in_dim {
            c * self.spec.in_dim + j
        } else {
            self.spec.out_dim * self.spec.in_dim + c
        }
    }

    fn logits(&self, theta: &[f64], f: &[f64]) -> Vec<f64> {
        let (v, h) = (self.spec.out_dim, self.spec.in_dim);
        (0..v).map(|c| dot(&theta[c * h..(c + 1) * h], &f[..h]) + theta[v * h + c]).collect()
    }

    /// Mean token loss of one example and its gradient added into `grad` with weight `w`.
    fn loss_grad(&self, theta: &[f64], ex: &HeadExample, w: f64, grad: Option<&mut [f64]>) -> f64 {
        let (v, h) = (self.spec.out_dim, self.spec.in_dim);
        let n = ex.targets.len() as f64;
        let mut loss = 0.0;
        let mut grad = grad;
        for (f, &y) in ex.feats.iter().zip(&ex.targets) {
            let z = self.logits(theta, f);
            loss -= log_softmax(&z)[y];
            if let Some(g) = grad.as_deref_mut() {
                let mut p = softmax(&z);
                p[y] -= 1.0;
                for c in 0..v {
                    let d = w * p[c] / n;
                    for (gj, fj) in g[c * h..(c + 1) * h].iter_mut().zip(&f[..h]) {
                        *gj += d * fj;
                    }
                    g[v * h + c] += d;
                }
            }
        }
        loss / n
    }

    /// Objective and gradient over every example except `exclude`.
    pub fn objective(&self, theta: &[f64], exclude: Option<usize>) -> (f64, Vec<f64>) {
        let m = (self.examples.len() - usize::from(exclude.is_some())) as f64;
        let parts: Vec<(f64, Vec<f64>)> = self
            .examples
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(ci, chunk)| {
                let mut g = vec![0.0; theta.len()];
                let mut l = 0.0;
                for (k, ex) in chunk.iter().enumerate() {
                    if Some(ci * CHUNK + k) != exclude {
                        l += self.loss_grad(theta, ex, 1.0 / m, Some(&mut g));
                    }
                }
                (l, g)
            })
            .collect();
        let mut loss = 0.0;
        let mut grad: Vec<f64> = theta.iter().map(|t| self.l2 * t).collect();
        for (l, g) in parts {
            loss += l;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        (loss / m + 0.5 * self.l2 * dot(theta, theta), grad)
    }

    /// `sum_d weight_d * H_d` where `H_d` is the Hessian of example `d`'s mean token loss.
    fn data_hessian(&self, theta: &[f64], members: &[(usize, f64)]) -> DMatrix<f64> {
        let (v, a) = (self.spec.out_dim, self.spec.aug_in_dim());
        let mut feats: Vec<&[f64]> = Vec::new();
        let mut probs: Vec<Vec<f64>> = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        for &(i, w) in members {
            let ex = &self.examples[i];
            for f in &ex.feats {
                feats.push(f);
                probs.push(softmax(&self.logits(theta, f)));
                weights.push(w / ex.targets.len() as f64);
            }
        }
        let x = DMatrix::from_fn(feats.len(), a, |t, j| feats[t][j]);
        let pairs: Vec<(usize, usize)> = (0..v).flat_map(|c| (c..v).map(move |d| (c, d))).collect();
        let blocks: Vec<DMatrix<f64>> = pairs
            .par_iter()
            .map(|&(c, d)| {
                let mut xt = x.transpose();
                for (t, mut col) in xt.column_iter_mut().enumerate() {
                    let p = &probs[t];
                    let m = if c == d { p[c] - p[c] * p[c] } else { -p[c] * p[d] };
                    col *= weights[t] * m;
                }
                &xt * &x
            })
            .collect();
        let p = self.param_count();
        let mut hess = DMatrix::zeros(p, p);
        for (&(c, d), b) in pairs.iter().zip(&blocks) {
            for j in 0..a {
                for k in 0..a {
                    let (r, s) = (self.index(c, j), self.index(d, k));
                    hess[(r, s)] = b[(j, k)];
                    hess[(s, r)] = b[(j, k)];
                }
            }
        }
        hess
    }

    fn all_members(&self, exclude: Option<usize>) -> Vec<(usize, f64)> {
        let m = (self.examples.len() - usize::from(exclude.is_some())) as f64;
        (0..self.examples.len()).filter(|&i| Some(i) != exclude).map(|i| (i, 1.0 / m)).collect()
    }

    fn regularized(&self, mut h: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
        for i in 0..h.nrows() {
            h[(i, i)] += self.l2;
        }
        Cholesky::new(h).ok_or_else(|| Error::Numeric("convex-head Hessian is not positive definite".into()))
    }

    /// Damped Newton from `init` to the unique minimizer of the full objective.
    pub fn fit(&self, init: &[f64], cfg: &LooConfig) -> Result<Vec<f64>> {
        let mut theta = init.to_vec();
        let members = self.all_members(None);
        for _ in 0..cfg.max_iters {
            let (j, g) = self.objective(&theta, None);
            if g.iter().all(|x| x.abs() < cfg.tolerance) {
                return Ok(theta);
            }
            let step = self.regularized(self.data_hessian(&theta, &members))?.solve(&DVector::from_vec(g.clone()));
            let decrement = dot(step.as_slice(), &g);
            let mut t = 1.0;
            loop {
                let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(a, s)| a - t * s).collect();
                // near the optimum the objective change is below rounding; take the full step
                if decrement < FULL_STEP_DECREMENT || self.objective(&cand, None).0 <= j - 0.25 * t * decrement || t < 1e-10 {
                    theta = cand;
                    break;
                }
                t *= 0.5;
            }
        }
        let (_, g) = self.objective(&theta, None);
        let gmax = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if gmax < cfg.tolerance.sqrt() {
            log::warn!("convex head stopped at gradient {gmax:.3e}");
            return Ok(theta);
        }
        Err(Error::Numeric(format!("convex head did not converge (gradient {gmax:.3e})")))
    }

    /// Mean recorded-completion loss over `queries` at head `theta`.
    fn query_loss(&self, theta: &[f64], queries: &[HeadExample]) -> f64 {
        mean(&queries.iter().map(|q| self.loss_grad(theta, q, 0.0, None)).collect::<Vec<_>>())
    }

    /// The minimizer of the objective without example `idx`, from Newton
    /// iterations with the Hessian fixed at `theta_full`.
    fn refit_without(&self, theta_full: &[f64], h_data_full: &DMatrix<f64>, idx: usize, cfg: &LooConfig) -> Result<Vec<f64>> {
        let n = self.examples.len() as f64;
        let h_d = self.data_hessian(theta_full, &[(idx, 1.0)]);
        let h = (h_data_full * n - h_d) / (n - 1.0);
        let chol = self.regularized(h)?;
        let mut theta = theta_full.to_vec();
        for _ in 0..cfg.max_iters {
            let (_, g) = self.objective(&theta, Some(idx));
            if g.iter().all(|x| x.abs() < cfg.tolerance) {
                return Ok(theta);
            }
            let step = chol.solve(&DVector::from_vec(g));
            for (t, s) in theta.iter_mut().zip(step.iter()) {
                *t -= s;
            }
        }
        Err(Error::Numeric(format!("leave-one-out refit without example {} did not converge", self.ids[idx])))
    }

    /// Change in mean query loss when each candidate is left out.
    pub(crate) fn loo_deltas(&self, theta_full: &[f64], candidates: &[usize], queries: &[HeadExample], cfg: &LooConfig) -> Result<Vec<f64>> {
        let h_full = self.data_hessian(theta_full, &self.all_members(None));
        let base = self.query_loss(theta_full, queries);
        candidates
            .iter()
            .map(|&i| Ok(self.query_loss(&self.refit_without(theta_full, &h_full, i, cfg)?, queries) - base))
            .collect()
    }

    /// Mean oriented influence over `queries` with the exact regularized
    /// Hessian, `mean_v g_v^T (H + l2 I)^-1 g_d`.
    fn exact_influence(&self, theta: &[f64], candidates: &[usize], queries: &[HeadExample]) -> Result<Vec<f64>> {
        let chol = self.regularized(self.data_hessian(theta, &self.all_members(None)))?;
        let p = self.param_count();
        let mut qsum = vec![0.0; p];
        for q in queries {
            self.loss_grad(theta, q, 1.0 / queries.len() as f64, Some(&mut qsum));
        }
        let solved = chol.solve(&DVector::from_vec(qsum));
        Ok(candidates
            .iter()
            .map(|&i| {
                let mut g = vec![0.0; p];
                self.loss_grad(theta, &self.examples[i], 1.0, Some(&mut g));
                dot(solved.as_slice(), &g)
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooOutcome {
    pub mode: LooMode,
    pub seed: u64,
    pub candidate_ids: Vec<u64>,
    pub query_ids: Vec<u64>,
    /// Mean query-loss change when the candidate is removed and the model refit.
    pub deltas: Vec<f64>,
    /// Mean oriented EK-FAC influence of each candidate over the queries,
    /// computed at the model the deltas are measured from.
    pub influence: Vec<f64>,
    /// The same with exact curvature (convex-head mode only).
    pub exact_influence: Option<Vec<f64>>,
}

fn with_readout(ckpt: &Checkpoint, theta: &[f64]) -> Checkpoint {
    let spec = ckpt.config.layout().into_iter().find(|l| l.name == "readout").expect("readout layer");
    let mut c = ckpt.clone();
    c.params[spec.offset..spec.offset + spec.len].copy_from_slice(theta);
    c
}

fn mean_oriented(
    ckpt: &Checkpoint,
    candidates: &[Example],
    queries: &[Example],
    filter: &LayerFilter,
    solve: impl Fn(&[f64]) -> Result<Vec<f64>> + Sync,
) -> Result<Vec<f64>> {
    let cols: Vec<(QueryColumn, Example)> = queries
        .iter()
        .map(|q| (QueryColumn { query_id: q.id, tag: crate::influence::FlipTag::Correct }, q.clone()))
        .collect();
    let prov = Provenance { checkpoint_hash: ckpt.hash(), damping: 0.0, filter: filter.names().to_vec() };
    let m = influence_with_solver(ckpt, candidates, &cols, filter, prov, solve)?;
    Ok((0..m.n_rows()).map(|r| -mean(m.row(r))).collect())
}

impl Experiment {
    /// Validation queries with their recorded tuned-model completions, C then I.
    pub fn flip_query_examples(&mut self, seed: u64) -> Result<Vec<Example>> {
        let (train, val, _) = self.generate()?;
        let base = self.pretrain(seed)?;
        let tuned = self.sft("train", seed, &base, &train, &val)?;
        let flips = self.flipsets(&base, &tuned.final_ckpt, &val)?;
        Ok(flip_queries(&flips.value, &val.value)?.into_iter().map(|(_, e)| e).collect())
    }

    pub fn loo(&mut self, seed: u64, candidate_ids: &[u64], queries: &[Example]) -> Result<LooOutcome> {
        if candidate_ids.len() > LOO_CANDIDATE_CAP {
            return Err(Error::Refusal(format!(
                "{} leave-one-out candidates requested; the cap is {LOO_CANDIDATE_CAP}",
                candidate_ids.len()
            )));
        }
        let cfg = self.cfg.loo.clone();
        let mut outcome = LooOutcome {
            mode: cfg.mode,
            seed,
            candidate_ids: candidate_ids.to_vec(),
            query_ids: queries.iter().map(|q| q.id).collect(),
            deltas: Vec::new(),
            influence: Vec::new(),
            exact_influence: None,
        };
        if candidate_ids.is_empty() {
            return Ok(outcome);
        }
        if queries.is_empty() {
            return Err(Error::input("leave-one-out needs at least one query"));
        }
        let (train, val, _) = self.generate()?;
        let idx = candidate_ids
            .iter()
            .map(|id| train.value.iter().position(|e| e.id == *id).ok_or_else(|| Error::input(format!("unknown training id {id}"))))
            .collect::<Result<Vec<_>>>()?;
        let cand_examples: Vec<Example> = idx.iter().map(|&i| train.value[i].clone()).collect();
        let base = self.pretrain(seed)?;
        let tuned = self.sft("train", seed, &base, &train, &val)?;
        let tuned_ckpt = &tuned.final_ckpt.value;
        match cfg.mode {
            LooMode::ConvexHead => {
                let head = ConvexHead::new(tuned_ckpt, &train.value, cfg.l2)?;
                let init = tuned_ckpt.layer("readout").expect("readout layer").to_vec();
                let theta = head.fit(&init, &cfg)?;
                let qs = queries.iter().map(|q| head_example(tuned_ckpt, &head.spec, q)).collect::<Result<Vec<_>>>()?;
                outcome.deltas = head.loo_deltas(&theta, &idx, &qs, &cfg)?;
                outcome.exact_influence = Some(head.exact_influence(&theta, &idx, &qs)?);
                let refit = with_readout(tuned_ckpt, &theta);
                let filter = LayerFilter::new(&refit.config, &["readout"])?;
                let factors = estimate_factors(&refit, &train.value, &filter)?;
                let basis = fit_basis(&factors, &refit, &train.value, Damping::Absolute(cfg.l2))?;
                outcome.influence = mean_oriented(&refit, &cand_examples, queries, &filter, |g| basis.ihvp(g))?;
            }
            LooMode::FullRetrain => {
                let tc = self.cfg.train_for(seed);
                let full = tuned_ckpt.clone();
                let loss = |c: &Checkpoint| -> Result<f64> {
                    Ok(mean(&queries.iter().map(|q| c.network().loss(q)).collect::<Result<Vec<_>>>()?))
                };
                let reference = loss(&full)?;
                for &i in &idx {
                    let rest: Vec<Example> = train.value.iter().enumerate().filter(|&(k, _)| k != i).map(|(_, e)| e.clone()).collect();
                    let series = crate::tinymodel::train(&base.value, &rest, &tc)?;
                    outcome.deltas.push(loss(series.last())? - reference);
                }
                let basis = self.curvature(&tuned.final_ckpt, &train)?;
                let filter = LayerFilter::new(&full.config, &basis.value.filter)?;
                outcome.influence = mean_oriented(&full, &cand_examples, queries, &filter, |g| basis.value.ihvp(g))?;
            }
        }
        Ok(outcome)
    }
}

/// Leave-one-out deltas for `candidate_ids` over `v_subset` (examples carrying
/// recorded completions), for the first configured seed.
pub fn loo_oracle(cfg: &ExperimentConfig, candidate_ids: &[u64], v_subset: &[Example]) -> Result<LooOutcome> {
    let mut exp = Experiment::new(cfg.clone())?;
    let seed = cfg.seeds[0];
    exp.loo(seed, candidate_ids, v_subset)
}
