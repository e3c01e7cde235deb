use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use crate::datagen::Example;
use crate::error::{Error, Result};
use crate::tinymodel::{Checkpoint, LayerFilter, LayerSpec};

use super::factors::CHUNK;

/// Largest filtered parameter count for which the dense oracle will build `H`.
pub const EXACT_PARAM_CAP: usize = 5000;

/// Rows gathered before each `H += R^T R` update.
const ROW_BLOCK: usize = 512;

/// Dense Gauss-Newton matrix over the filtered parameters with a Cholesky
/// factorization of `H + damping I`, reusable across right-hand sides.
#[derive(Debug, Clone)]
pub struct ExactCurvature {
    pub hessian: DMatrix<f64>,
    pub damping: f64,
    chol: Cholesky<f64, Dyn>,
}

fn push_rows(rows: &mut Vec<f64>, specs: &[LayerSpec], weight: f64, inputs: &[Vec<f64>], columns: &[Vec<Vec<f64>>]) {
    let sw = weight.sqrt();
    let n_cols = columns.first().map_or(0, Vec::len);
    for c in 0..n_cols {
        for (li, spec) in specs.iter().enumerate() {
            let s = &columns[li][c];
            let a = &inputs[li];
            let inn = spec.in_dim;
            for &sr in s {
                rows.extend(a[..inn].iter().map(|&av| sw * sr * av));
            }
            if spec.bias {
                rows.extend(s.iter().map(|&sr| sw * sr));
            }
        }
    }
}

fn flush(h: &mut DMatrix<f64>, rows: &mut Vec<f64>, p: usize) {
    if rows.is_empty() {
        return;
    }
    let r = DMatrix::from_column_slice(p, rows.len() / p, rows);
    h.gemm(1.0, &r, &r.transpose(), 1.0);
    rows.clear();
}

impl ExactCurvature {
    /// Builds `H = sum_{d,t} w_t J_t^T (diag(p) - p p^T) J_t` over the layers in `filter`.
    pub fn build(ckpt: &Checkpoint, data: &[Example], filter: &LayerFilter, damping: f64) -> Result<Self> {
        let p = filter.param_count(&ckpt.config);
        if p > EXACT_PARAM_CAP {
            return Err(Error::Refusal(format!(
                "exact curvature over {p} parameters exceeds the cap of {EXACT_PARAM_CAP}"
            )));
        }
        if data.is_empty() {
            return Err(Error::input("cannot build curvature from an empty dataset"));
        }
        let specs = filter.layers(&ckpt.config);
        let net = ckpt.network();
        let w = 1.0 / data.len() as f64;
        let partials = data
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut h = DMatrix::zeros(p, p);
                let mut rows = Vec::with_capacity(p * ROW_BLOCK);
                for ex in chunk {
                    net.fisher_columns(ex, &specs, w, |tw, inputs, cols| {
                        push_rows(&mut rows, &specs, tw, inputs, cols);
                        if rows.len() >= p * ROW_BLOCK {
                            flush(&mut h, &mut rows, p);
                        }
                    })?;
                }
                flush(&mut h, &mut rows, p);
                Ok(h)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut hessian = DMatrix::zeros(p, p);
        for h in partials {
            hessian += h;
        }
        hessian = (&hessian + hessian.transpose()) * 0.5;
        Self::from_matrix(hessian, damping)
    }

    pub fn from_matrix(hessian: DMatrix<f64>, damping: f64) -> Result<Self> {
        if !hessian.is_square() {
            return Err(Error::input("curvature matrix must be square"));
        }
        let n = hessian.nrows();
        let damped = &hessian + DMatrix::identity(n, n) * damping;
        let chol = Cholesky::new(damped)
            .ok_or_else(|| Error::Numeric(format!("H + {damping} I is not positive definite")))?;
        Ok(Self { hessian, damping, chol })
    }

    /// `(H + damping I)^{-1} g`.
    pub fn ihvp(&self, g: &[f64]) -> Result<Vec<f64>> {
        if g.len() != self.hessian.nrows() {
            return Err(Error::input(format!("vector has {} entries, curvature covers {}", g.len(), self.hessian.nrows())));
        }
        Ok(self.chol.solve(&DVector::from_column_slice(g)).as_slice().to_vec())
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = self.hessian.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        ev
    }
}

/// Solves `(H + damping I) x = g` for a small explicit `H`.
pub fn dense_damped_solve(h: &DMatrix<f64>, g: &[f64], damping: f64) -> Result<Vec<f64>> {
    ExactCurvature::from_matrix(h.clone(), damping)?.ihvp(g)
}

/// One-shot dense ihvp; build an [`ExactCurvature`] instead when solving for many vectors.
pub fn exact_ihvp_oracle(ckpt: &Checkpoint, data: &[Example], filter: &LayerFilter, g: &[f64], damping: f64) -> Result<Vec<f64>> {
    ExactCurvature::build(ckpt, data, filter, damping)?.ihvp(g)
}
