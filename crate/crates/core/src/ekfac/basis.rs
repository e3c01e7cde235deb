use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::datagen::Example;
use crate::error::{Error, Result};
use crate::tinymodel::{Checkpoint, LayerFilter, LayerSpec};

use super::factors::CHUNK;
use super::{flat_to_matrix, matrix_to_flat, KroneckerFactors};

/// How the damping term is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Damping {
    Absolute(f64),
    /// A multiple of the mean corrected eigenvalue over all layers.
    RelativeToMean(f64),
}

impl Default for Damping {
    fn default() -> Self {
        Damping::RelativeToMean(0.1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasisLayer {
    pub spec: LayerSpec,
    /// Eigenvectors of the input factor, as columns.
    pub u_a: DMatrix<f64>,
    /// Eigenvectors of the gradient factor, as columns.
    pub u_s: DMatrix<f64>,
    /// Corrected eigenvalues, `out x aug_in`; entry `(i, j)` belongs to `u_s[:, i] (x) u_a[:, j]`.
    pub lambda: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EkfacBasis {
    pub layers: Vec<BasisLayer>,
    pub damping: f64,
    pub checkpoint_hash: String,
    pub filter: Vec<String>,
}

fn eigenvectors(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = m.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) || eig.eigenvectors.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite eigendecomposition of {what}")));
    }
    Ok(eig.eigenvectors)
}

/// Accumulates `sum_c (U_S^T s_c)_i^2 (U_A^T a)_j^2` over positions.
struct LambdaAccumulator {
    lambda: Vec<DMatrix<f64>>,
}

impl LambdaAccumulator {
    fn new(layers: &[BasisLayer]) -> Self {
        Self { lambda: layers.iter().map(|l| DMatrix::zeros(l.spec.out_dim, l.spec.aug_in_dim())).collect() }
    }

    fn add(&mut self, layers: &[BasisLayer], weight: f64, inputs: &[Vec<f64>], columns: &[Vec<Vec<f64>>]) {
        for (li, layer) in layers.iter().enumerate() {
            let a = nalgebra::DVector::from_column_slice(&inputs[li]);
            let pa = layer.u_a.tr_mul(&a).map(|v| v * v);
            let mut q = nalgebra::DVector::zeros(layer.spec.out_dim);
            for col in &columns[li] {
                let s = nalgebra::DVector::from_column_slice(col);
                q += layer.u_s.tr_mul(&s).map(|v| v * v);
            }
            self.lambda[li].ger(weight, &q, &pa, 1.0);
        }
    }
}

/// Eigendecomposes each layer's factors and refits the eigenvalues as the
/// expected squared projection of the Gauss-Newton gradient columns onto
/// each Kronecker eigenvector pair.
pub fn fit_basis(factors: &KroneckerFactors, ckpt: &Checkpoint, data: &[Example], damping: Damping) -> Result<EkfacBasis> {
    if data.is_empty() {
        return Err(Error::input("cannot fit a basis on an empty dataset"));
    }
    let mut layers = factors
        .layers
        .iter()
        .map(|f| {
            Ok(BasisLayer {
                spec: f.spec.clone(),
                u_a: eigenvectors(&f.a, &format!("{} input factor", f.spec.name))?,
                u_s: eigenvectors(&f.s, &format!("{} gradient factor", f.spec.name))?,
                lambda: DMatrix::zeros(f.spec.out_dim, f.spec.aug_in_dim()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let specs: Vec<LayerSpec> = layers.iter().map(|l| l.spec.clone()).collect();
    let net = ckpt.network();
    let w = 1.0 / data.len() as f64;
    let partials = data
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = LambdaAccumulator::new(&layers);
            for ex in chunk {
                net.fisher_columns(ex, &specs, w, |tw, inputs, cols| acc.add(&layers, tw, inputs, cols))?;
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    for p in partials {
        for (l, m) in layers.iter_mut().zip(p.lambda) {
            l.lambda += m;
        }
    }
    let filter = LayerFilter::new(&ckpt.config, &specs.iter().map(|s| s.name.clone()).collect::<Vec<_>>())?;
    EkfacBasis::new(layers, damping, ckpt.hash(), filter.names().to_vec())
}

#[derive(Serialize, Deserialize)]
struct BasisHeader {
    kind: String,
    damping: f64,
    checkpoint_hash: String,
    filter: Vec<String>,
    layers: Vec<LayerSpec>,
}

impl EkfacBasis {
    pub fn new(layers: Vec<BasisLayer>, damping: Damping, checkpoint_hash: String, filter: Vec<String>) -> Result<Self> {
        for l in &layers {
            if l.lambda.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Numeric(format!("{}: corrected eigenvalues must be finite and >= 0", l.spec.name)));
            }
        }
        let damping = match damping {
            Damping::Absolute(v) => v,
            Damping::RelativeToMean(f) => {
                let n: usize = layers.iter().map(|l| l.lambda.len()).sum();
                f * layers.iter().map(|l| l.lambda.sum()).sum::<f64>() / n as f64
            }
        };
        if !damping.is_finite() || damping < 0.0 {
            return Err(Error::Numeric(format!("invalid damping {damping}")));
        }
        Ok(Self { layers, damping, checkpoint_hash, filter })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.spec.len).sum()
    }

    /// All corrected eigenvalues, layer by layer.
    pub fn spectrum(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.lambda.iter().copied()).collect()
    }

    fn apply(&self, g: &[f64], f: impl Fn(f64) -> Result<f64>) -> Result<Vec<f64>> {
        if g.len() != self.param_count() {
            return Err(Error::input(format!("vector has {} entries, basis covers {}", g.len(), self.param_count())));
        }
        let mut out = Vec::with_capacity(g.len());
        let mut off = 0;
        for l in &self.layers {
            let gm = flat_to_matrix(&g[off..off + l.spec.len], &l.spec);
            let mut rot = l.u_s.tr_mul(&gm) * &l.u_a;
            for (v, lam) in rot.iter_mut().zip(l.lambda.iter()) {
                *v *= f(*lam)?;
            }
            let back = &l.u_s * rot * l.u_a.transpose();
            matrix_to_flat(&back, &l.spec, &mut out);
            off += l.spec.len;
        }
        Ok(out)
    }

    /// `(H_ekfac + damping I)^{-1} g`, computed layer by layer in the Kronecker eigenbasis.
    pub fn ihvp(&self, g: &[f64]) -> Result<Vec<f64>> {
        let d = self.damping;
        self.apply(g, |lam| {
            let den = lam + d;
            if den > 0.0 {
                Ok(1.0 / den)
            } else {
                Err(Error::Numeric("singular damped curvature".into()))
            }
        })
    }

    /// `(H_ekfac + damping I) x`.
    pub fn hvp(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.damping;
        self.apply(x, |lam| Ok(lam + d))
    }

    pub fn with_damping(&self, damping: f64) -> Self {
        Self { damping, ..self.clone() }
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let header = BasisHeader {
            kind: "ekfac_basis".into(),
            damping: self.damping,
            checkpoint_hash: self.checkpoint_hash.clone(),
            filter: self.filter.clone(),
            layers: self.layers.iter().map(|l| l.spec.clone()).collect(),
        };
        let mut payload = Vec::new();
        for l in &self.layers {
            payload.extend_from_slice(l.u_a.as_slice());
            payload.extend_from_slice(l.u_s.as_slice());
            payload.extend_from_slice(l.lambda.as_slice());
        }
        container::write_file(path, &header, &payload)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, payload): (BasisHeader, Vec<f64>) = container::read_file(path)?;
        if h.kind != "ekfac_basis" {
            return Err(Error::Format(format!("expected ekfac_basis, found `{}`", h.kind)));
        }
        let mut off = 0;
        let mut take = |rows: usize, cols: usize| -> Result<DMatrix<f64>> {
            let end = off + rows * cols;
            let s = payload.get(off..end).ok_or_else(|| Error::Format("basis payload too short".into()))?;
            off = end;
            Ok(DMatrix::from_column_slice(rows, cols, s))
        };
        let mut layers = Vec::new();
        for spec in h.layers {
            let ai = spec.aug_in_dim();
            let u_a = take(ai, ai)?;
            let u_s = take(spec.out_dim, spec.out_dim)?;
            let lambda = take(spec.out_dim, ai)?;
            layers.push(BasisLayer { spec, u_a, u_s, lambda });
        }
        if off != payload.len() {
            return Err(Error::Format("basis payload has trailing values".into()));
        }
        Ok(Self { layers, damping: h.damping, checkpoint_hash: h.checkpoint_hash, filter: h.filter })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_corpus, TaskSpec};
    use crate::ekfac::{estimate_factors, FactorAccumulator};
    use crate::tinymodel::{init_model, ModelConfig};

    fn axis_layer(lambda: &[f64]) -> BasisLayer {
        let spec = LayerSpec { name: "mlp.0".into(), out_dim: 1, in_dim: lambda.len(), bias: false, offset: 0, len: lambda.len() };
        BasisLayer {
            u_a: DMatrix::identity(lambda.len(), lambda.len()),
            u_s: DMatrix::identity(1, 1),
            lambda: DMatrix::from_row_slice(1, lambda.len(), lambda),
            spec,
        }
    }

    #[test]
    fn axis_aligned_ihvp_is_elementwise_division() {
        let basis = EkfacBasis::new(vec![axis_layer(&[2.0, 4.0])], Damping::Absolute(0.0), String::new(), vec![]).unwrap();
        let x = basis.ihvp(&[2.0, 4.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 1.0).abs() < 1e-15);
        assert!(basis.ihvp(&[1.0]).is_err());
    }

    #[test]
    fn large_damping_shrinks_toward_g_over_lambda() {
        let g = [0.3, -0.7];
        let basis = EkfacBasis::new(vec![axis_layer(&[2.0, 4.0])], Damping::Absolute(1e9), String::new(), vec![]).unwrap();
        let x = basis.ihvp(&g).unwrap();
        for (xi, gi) in x.iter().zip(&g) {
            assert!((xi * 1e9 - gi).abs() < 1e-8);
        }
    }

    fn fitted() -> (EkfacBasis, usize) {
        let corpus = generate_corpus(&TaskSpec { n_train: 30, n_val: 2, n_test: 0, ..TaskSpec::default() }).unwrap();
        let cfg = ModelConfig { hidden_dim: 6, embed_dim: 3, ..ModelConfig::default() };
        let ckpt = init_model(&cfg).unwrap();
        let filter = LayerFilter::new(&cfg, &["mlp.0", "mlp.1", "readout"]).unwrap();
        let f = estimate_factors(&ckpt, &corpus.train, &filter).unwrap();
        let b = fit_basis(&f, &ckpt, &corpus.train, Damping::default()).unwrap();
        (b, filter.param_count(&cfg))
    }

    #[test]
    fn fitted_basis_invariants() {
        let (b, p) = fitted();
        assert_eq!(b.param_count(), p);
        assert!(b.damping > 0.0);
        let mean = b.spectrum().iter().sum::<f64>() / b.spectrum().len() as f64;
        assert!((b.damping - 0.1 * mean).abs() < 1e-15);
        for l in &b.layers {
            for u in [&l.u_a, &l.u_s] {
                let err = (u.transpose() * u - DMatrix::identity(u.ncols(), u.ncols())).amax();
                assert!(err < 1e-8);
            }
            assert!(l.lambda.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn ihvp_is_linear_and_inverts_hvp() {
        let (b, p) = fitted();
        let g1: Vec<f64> = (0..p).map(|i| ((i * 7 % 13) as f64 - 6.0) / 5.0).collect();
        let g2: Vec<f64> = (0..p).map(|i| ((i * 3 % 11) as f64 - 5.0) / 3.0).collect();
        let (alpha, beta) = (1.7, -0.4);
        let mix: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| alpha * a + beta * b).collect();
        let lhs = b.ihvp(&mix).unwrap();
        let r1 = b.ihvp(&g1).unwrap();
        let r2 = b.ihvp(&g2).unwrap();
        for i in 0..p {
            assert!((lhs[i] - (alpha * r1[i] + beta * r2[i])).abs() < 1e-10 * (1.0 + lhs[i].abs()));
        }
        let back = b.hvp(&r1).unwrap();
        let err: f64 = back.iter().zip(&g1).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(err / crate::stats::norm(&g1) < 1e-8);
    }

    #[test]
    fn damping_monotonically_shrinks_the_solution() {
        let (b, p) = fitted();
        let g: Vec<f64> = (0..p).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut prev = f64::INFINITY;
        for d in [1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0] {
            let n = crate::stats::norm(&b.with_damping(d).ihvp(&g).unwrap());
            assert!(n < prev);
            prev = n;
        }
    }

    #[test]
    fn diagonal_factors_give_mean_squared_gradients() {
        // Axis-aligned inputs and gradient columns: the eigenbasis is the
        // identity and the refit eigenvalues are the weighted mean squared
        // gradient entries.
        let spec = LayerSpec { name: "mlp.0".into(), out_dim: 2, in_dim: 2, bias: false, offset: 0, len: 4 };
        let samples = [
            (vec![1.0, 0.0], vec![vec![2.0, 0.0]]),
            (vec![0.0, 3.0], vec![vec![0.0, 1.0]]),
            (vec![2.0, 0.0], vec![vec![0.0, 1.0]]),
        ];
        let mut acc = FactorAccumulator::new(std::slice::from_ref(&spec));
        for (a, c) in &samples {
            acc.add(1.0 / 3.0, std::slice::from_ref(a), std::slice::from_ref(c));
        }
        let f = acc.finish().unwrap();
        let u_a = eigenvectors(&f.layers[0].a, "a").unwrap();
        let u_s = eigenvectors(&f.layers[0].s, "s").unwrap();
        for u in [&u_a, &u_s] {
            for v in u.iter() {
                assert!(v.abs() < 1e-12 || (v.abs() - 1.0).abs() < 1e-12);
            }
        }
        let layer = BasisLayer { spec: spec.clone(), u_a: DMatrix::identity(2, 2), u_s: DMatrix::identity(2, 2), lambda: DMatrix::zeros(2, 2) };
        let mut lam = LambdaAccumulator::new(std::slice::from_ref(&layer));
        for (a, c) in &samples {
            lam.add(std::slice::from_ref(&layer), 1.0 / 3.0, std::slice::from_ref(a), std::slice::from_ref(c));
        }
        // gradients s a^T: [[2,0],[0,0]], [[0,0],[0,3]], [[0,0],[2,0]]
        let expect = DMatrix::from_row_slice(2, 2, &[4.0 / 3.0, 0.0, 4.0 / 3.0, 3.0]);
        assert!((&lam.lambda[0] - expect).amax() < 1e-12);
    }

    #[test]
    fn save_load_round_trip() {
        let (b, _) = fitted();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("basis.bin");
        b.save(&path).unwrap();
        assert_eq!(EkfacBasis::load(&path).unwrap(), b);
    }
}
