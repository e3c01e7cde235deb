//! Query and training gradients, the raw influence matrix and its on-disk
//! datastore.
//!
//! Raw entries keep the sign of the influence formula
//! `I(d, v) = -grad L(v)^T H^-1 grad L(d)`: a negative entry means
//! upweighting `d` lowers the loss of `v`'s recorded completion.

mod datastore;

pub use datastore::{load_matrix, save_matrix, DatastoreManifest, ShardInfo};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{Example, Token};
use crate::ekfac::EkfacBasis;
use crate::error::{Error, Result};
use crate::evalharness::FlipSets;
use crate::stats::dot;
use crate::tinymodel::{Checkpoint, LayerFilter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipTag {
    Correct,
    Incorrect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryColumn {
    pub query_id: u64,
    pub tag: FlipTag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint_hash: String,
    pub damping: f64,
    pub filter: Vec<String>,
}

/// `|D| x |C u I|` raw influence values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceMatrix {
    pub values: Vec<f64>,
    pub row_ids: Vec<u64>,
    pub columns: Vec<QueryColumn>,
    pub provenance: Provenance,
}

impl InfluenceMatrix {
    pub fn new(values: Vec<f64>, row_ids: Vec<u64>, columns: Vec<QueryColumn>, provenance: Provenance) -> Result<Self> {
        if values.len() != row_ids.len() * columns.len() {
            return Err(Error::input(format!(
                "{} values do not fill {} rows x {} columns",
                values.len(),
                row_ids.len(),
                columns.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite influence entry at flat index {i}")));
        }
        Ok(Self { values, row_ids, columns, provenance })
    }

    pub fn n_rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.n_cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.n_cols();
        &self.values[row * c..(row + 1) * c]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.n_rows()).map(|r| self.get(r, col)).collect()
    }

    /// Indices of the columns carrying `tag`, in column order.
    pub fn columns_tagged(&self, tag: FlipTag) -> Vec<usize> {
        self.columns.iter().enumerate().filter(|(_, c)| c.tag == tag).map(|(i, _)| i).collect()
    }

    /// Every entry multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self { values: self.values.iter().map(|v| v * factor).collect(), ..self.clone() }
    }
}

/// Gradient of the mean cross-entropy of `completion` after `query`'s prompt,
/// restricted to `filter`. The query's own completion and gold answer are ignored.
pub fn query_gradient(tuned: &Checkpoint, query: &Example, completion: &[Token], filter: &LayerFilter) -> Result<Vec<f64>> {
    if completion.is_empty() {
        return Err(Error::input(format!("query {}: recorded completion is empty", query.id)));
    }
    tuned.per_example_gradient(&query.with_completion(completion.to_vec()), filter)
}

/// Columns of the influence matrix: every C query then every I query, each
/// paired with the example carrying its recorded completion.
pub fn flip_queries(flips: &FlipSets, val: &[Example]) -> Result<Vec<(QueryColumn, Example)>> {
    let find = |id: u64| {
        val.iter().find(|e| e.id == id).ok_or_else(|| Error::input(format!("flip query {id} not in the validation set")))
    };
    let mut out = Vec::with_capacity(flips.correct.len() + flips.incorrect.len());
    for (tag, entries) in [(FlipTag::Correct, &flips.correct), (FlipTag::Incorrect, &flips.incorrect)] {
        for e in entries.iter() {
            if e.completion.is_empty() {
                return Err(Error::input(format!("query {}: recorded completion is empty", e.query_id)));
            }
            out.push((QueryColumn { query_id: e.query_id, tag }, find(e.query_id)?.with_completion(e.completion.clone())));
        }
    }
    Ok(out)
}

/// Influence with an arbitrary damped inverse-curvature map: one solve per
/// query column, then inner products with every training gradient.
pub fn influence_with_solver<F>(
    ckpt: &Checkpoint,
    data: &[Example],
    queries: &[(QueryColumn, Example)],
    filter: &LayerFilter,
    provenance: Provenance,
    solve: F,
) -> Result<InfluenceMatrix>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    let solved = queries
        .par_iter()
        .map(|(_, q)| solve(&ckpt.per_example_gradient(q, filter)?))
        .collect::<Result<Vec<_>>>()?;
    let rows = data
        .par_iter()
        .map(|d| {
            let g = ckpt.per_example_gradient(d, filter)?;
            Ok(solved.iter().map(|s| -dot(s, &g)).collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    InfluenceMatrix::new(
        rows.concat(),
        data.iter().map(|d| d.id).collect(),
        queries.iter().map(|(c, _)| c.clone()).collect(),
        provenance,
    )
}

/// Raw influence of each training example on each flip-set query's recorded
/// completion, using the EK-FAC ihvp on the query side.
pub fn influence_matrix(tuned: &Checkpoint, data: &[Example], val: &[Example], flips: &FlipSets, basis: &EkfacBasis) -> Result<InfluenceMatrix> {
    let hash = tuned.hash();
    if basis.checkpoint_hash != hash {
        return Err(Error::Provenance(format!(
            "basis was fit at checkpoint {} but influence is requested at {hash}",
            basis.checkpoint_hash
        )));
    }
    let filter = LayerFilter::new(&tuned.config, &basis.filter)?;
    let queries = flip_queries(flips, val)?;
    let provenance = Provenance { checkpoint_hash: hash, damping: basis.damping, filter: basis.filter.clone() };
    influence_with_solver(tuned, data, &queries, &filter, provenance, |g| basis.ihvp(g))
}
