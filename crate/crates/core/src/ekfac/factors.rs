use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::datagen::Example;
use crate::error::{Error, Result};
use crate::tinymodel::{Checkpoint, LayerFilter, LayerSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerFactors {
    pub spec: LayerSpec,
    /// Second moment of the bias-augmented layer input.
    pub a: DMatrix<f64>,
    /// Second moment of the pre-activation gradient.
    pub s: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KroneckerFactors {
    pub layers: Vec<LayerFactors>,
    /// Number of token positions accumulated.
    pub sample_count: usize,
}

/// Weighted sums of `a a^T` and `sum_c s_c s_c^T`, normalized by the total weight on `finish`.
#[derive(Debug, Clone)]
pub struct FactorAccumulator {
    specs: Vec<LayerSpec>,
    a: Vec<DMatrix<f64>>,
    s: Vec<DMatrix<f64>>,
    weight: f64,
    count: usize,
}

impl FactorAccumulator {
    pub fn new(specs: &[LayerSpec]) -> Self {
        Self {
            specs: specs.to_vec(),
            a: specs.iter().map(|l| DMatrix::zeros(l.aug_in_dim(), l.aug_in_dim())).collect(),
            s: specs.iter().map(|l| DMatrix::zeros(l.out_dim, l.out_dim)).collect(),
            weight: 0.0,
            count: 0,
        }
    }

    /// One token position: per-layer inputs and per-layer gradient columns.
    pub fn add(&mut self, weight: f64, inputs: &[Vec<f64>], columns: &[Vec<Vec<f64>>]) {
        for (li, input) in inputs.iter().enumerate() {
            let a = &mut self.a[li];
            let n = input.len();
            for i in 0..n {
                let wi = weight * input[i];
                if wi == 0.0 {
                    continue;
                }
                for j in 0..n {
                    a[(i, j)] += wi * input[j];
                }
            }
            let s = &mut self.s[li];
            for col in &columns[li] {
                let m = col.len();
                for i in 0..m {
                    let wi = weight * col[i];
                    for j in 0..m {
                        s[(i, j)] += wi * col[j];
                    }
                }
            }
        }
        self.weight += weight;
        self.count += 1;
    }

    pub fn merge(&mut self, other: &FactorAccumulator) {
        for (a, b) in self.a.iter_mut().zip(&other.a) {
            *a += b;
        }
        for (a, b) in self.s.iter_mut().zip(&other.s) {
            *a += b;
        }
        self.weight += other.weight;
        self.count += other.count;
    }

    pub fn finish(self) -> Result<KroneckerFactors> {
        if self.count == 0 || self.weight <= 0.0 {
            return Err(Error::input("no samples accumulated"));
        }
        let w = self.weight;
        let layers = self
            .specs
            .into_iter()
            .zip(self.a.into_iter().zip(self.s))
            .map(|(spec, (a, s))| {
                // exact symmetry regardless of summation order
                let a = (&a + a.transpose()) * (0.5 / w);
                let s = (&s + s.transpose()) * (0.5 / w);
                LayerFactors { spec, a, s }
            })
            .collect();
        Ok(KroneckerFactors { layers, sample_count: self.count })
    }
}

/// Examples per parallel work unit. Partial sums are merged in chunk order,
/// so the result is independent of the thread count.
pub(crate) const CHUNK: usize = 16;

/// Kronecker factors of the Gauss-Newton matrix for the layers in `filter`,
/// using every example once with weight `1/N` spread over its completion tokens.
pub fn estimate_factors(ckpt: &Checkpoint, data: &[Example], filter: &LayerFilter) -> Result<KroneckerFactors> {
    if data.is_empty() {
        return Err(Error::input("cannot estimate curvature from an empty dataset"));
    }
    let specs = filter.layers(&ckpt.config);
    if specs.is_empty() {
        return Err(Error::input("layer filter selects no layers"));
    }
    let net = ckpt.network();
    let w = 1.0 / data.len() as f64;
    let partials = data
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = FactorAccumulator::new(&specs);
            for ex in chunk {
                net.fisher_columns(ex, &specs, w, |tw, inputs, cols| acc.add(tw, inputs, cols))?;
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = FactorAccumulator::new(&specs);
    for p in &partials {
        total.merge(p);
    }
    total.finish()
}
