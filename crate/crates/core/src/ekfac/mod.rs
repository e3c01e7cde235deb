//! EK-FAC curvature over selected linear layers and damped
//! inverse-Hessian-vector products, plus a dense Gauss-Newton oracle for
//! small models.
//!
//! The curvature target is the Gauss-Newton (expected Fisher) matrix of the
//! training objective `1/N sum_d mean_t loss(d, t)`:
//!
//! ```text
//! H = sum_{d,t} w_t  J_t^T (diag(p_t) - p_t p_t^T) J_t,     w_t = 1 / (N T_d)
//! ```
//!
//! For one layer with bias-augmented input `a` and pre-activation gradient
//! `s`, K-FAC approximates its block by `A (x) S` with `A = E[a a^T]` and
//! `S = E[s s^T]`. EK-FAC keeps the Kronecker eigenbasis `U_S (x) U_A` but
//! replaces the eigenvalues by the exact diagonal of `H` in that basis.

mod basis;
mod exact;
mod factors;

pub use basis::{fit_basis, BasisLayer, Damping, EkfacBasis};
pub use exact::{dense_damped_solve, exact_ihvp_oracle, ExactCurvature, EXACT_PARAM_CAP};
pub use factors::{estimate_factors, FactorAccumulator, KroneckerFactors, LayerFactors};

use nalgebra::DMatrix;

use crate::tinymodel::LayerSpec;

/// Flat layer gradient (`W` row-major then bias) as an `out x aug_in` matrix.
pub(crate) fn flat_to_matrix(flat: &[f64], spec: &LayerSpec) -> DMatrix<f64> {
    let (out, inn) = (spec.out_dim, spec.in_dim);
    DMatrix::from_fn(out, spec.aug_in_dim(), |r, c| if c < inn { flat[r * inn + c] } else { flat[out * inn + r] })
}

pub(crate) fn matrix_to_flat(m: &DMatrix<f64>, spec: &LayerSpec, out: &mut Vec<f64>) {
    let (o, inn) = (spec.out_dim, spec.in_dim);
    for r in 0..o {
        for c in 0..inn {
            out.push(m[(r, c)]);
        }
    }
    if spec.bias {
        for r in 0..o {
            out.push(m[(r, inn)]);
        }
    }
}
