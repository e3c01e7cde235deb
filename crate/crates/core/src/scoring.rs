//! Per-example scores aggregated from the influence matrix.
//!
//! Entries are oriented once here: `oriented = -raw`, so a larger `s_C`
//! means the example pushes the model toward the improved completions and a
//! larger `s_I` means it pushes toward the degraded ones.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::Example;
use crate::error::{Error, Result};
use crate::influence::{FlipTag, InfluenceMatrix};
use crate::stats::{descending_ranks, population_std};

fn tag_name(tag: FlipTag) -> &'static str {
    match tag {
        FlipTag::Correct => "correct",
        FlipTag::Incorrect => "incorrect",
    }
}

fn tagged_columns(m: &InfluenceMatrix, tag: FlipTag) -> Result<Vec<usize>> {
    let cols = m.columns_tagged(tag);
    if cols.is_empty() {
        return Err(Error::StrategySkipped {
            strategy: format!("{}-set aggregation", tag_name(tag)),
            reason: format!("the {} flip set is empty", tag_name(tag)),
        });
    }
    Ok(cols)
}

/// Mean oriented influence over the columns tagged `tag`.
pub fn aggregate_mean(m: &InfluenceMatrix, tag: FlipTag) -> Result<Vec<f64>> {
    let cols = tagged_columns(m, tag)?;
    let n = cols.len() as f64;
    Ok((0..m.n_rows()).map(|r| cols.iter().map(|&c| -m.get(r, c)).sum::<f64>() / n).collect())
}

/// Mean over the tagged columns of each example's descending rank (1 = most
/// positive oriented value) within that column.
pub fn aggregate_rank(m: &InfluenceMatrix, tag: FlipTag) -> Result<Vec<f64>> {
    let cols = tagged_columns(m, tag)?;
    let mut sum = vec![0.0; m.n_rows()];
    for &c in &cols {
        let oriented: Vec<f64> = m.column(c).into_iter().map(|v| -v).collect();
        for (s, r) in sum.iter_mut().zip(descending_ranks(&oriented)) {
            *s += r;
        }
    }
    let n = cols.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `A = sign(s_C) s_C^2 / sigma_C - sign(s_I) s_I^2 / sigma_I`.
pub fn aggressive_score(s_c: &[f64], sigma_c: f64, s_i: &[f64], sigma_i: f64) -> Result<Vec<f64>> {
    if !(sigma_c > 0.0) || !(sigma_i > 0.0) {
        return Err(Error::Degenerate(format!("sigma_C = {sigma_c}, sigma_I = {sigma_i}; both must be positive")));
    }
    if s_c.len() != s_i.len() {
        return Err(Error::input("s_C and s_I differ in length"));
    }
    Ok(s_c
        .iter()
        .zip(s_i)
        .map(|(&c, &i)| sign(c) * c * c / sigma_c - sign(i) * i * i / sigma_i)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges from min to max.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionStats {
    pub histogram: Histogram,
    pub sigma: f64,
}

/// Equal-width histogram over `[min, max]`. A value on an internal edge goes
/// to the higher bin; the maximum goes to the last bin.
pub fn histogram(scores: &[f64], bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::input("histogram needs at least one bin"));
    }
    if scores.is_empty() {
        return Err(Error::input("histogram of an empty vector"));
    }
    if let Some(x) = scores.iter().find(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("cannot bin non-finite score {x}")));
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let edges: Vec<f64> = (0..=bins).map(|k| if k == bins { hi } else { lo + (hi - lo) * k as f64 / bins as f64 }).collect();
    let internal = &edges[1..bins];
    let mut counts = vec![0; bins];
    for &x in scores {
        counts[internal.partition_point(|&e| e <= x).min(bins - 1)] += 1;
    }
    Ok(Histogram { edges, counts })
}

pub fn distribution_stats(scores: &[f64], bins: usize) -> Result<DistributionStats> {
    Ok(DistributionStats { histogram: histogram(scores, bins)?, sigma: population_std(scores) })
}

/// One row per training example in matrix row order. Columns derived from an
/// empty flip set are `None`; `a` is `None` unless both sides exist and have
/// positive spread.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub ids: Vec<u64>,
    pub corrupted: Vec<bool>,
    pub s_c: Option<Vec<f64>>,
    pub s_i: Option<Vec<f64>>,
    pub r_c: Option<Vec<f64>>,
    pub r_i: Option<Vec<f64>>,
    pub a: Option<Vec<f64>>,
    pub sigma_c: Option<f64>,
    pub sigma_i: Option<f64>,
}

fn skippable<T>(r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(e) if e.is_skip() => Ok(None),
        Err(e) => Err(e),
    }
}

impl ScoreTable {
    /// Scores for every matrix row; `data` supplies the corruption flags and
    /// must list the same ids in the same order.
    pub fn build(m: &InfluenceMatrix, data: &[Example]) -> Result<Self> {
        if data.len() != m.n_rows() || data.iter().zip(&m.row_ids).any(|(d, &id)| d.id != id) {
            return Err(Error::input("training data does not match the influence matrix rows"));
        }
        let s_c = skippable(aggregate_mean(m, FlipTag::Correct))?;
        let s_i = skippable(aggregate_mean(m, FlipTag::Incorrect))?;
        let r_c = skippable(aggregate_rank(m, FlipTag::Correct))?;
        let r_i = skippable(aggregate_rank(m, FlipTag::Incorrect))?;
        let sigma_c = s_c.as_deref().map(population_std);
        let sigma_i = s_i.as_deref().map(population_std);
        let a = match (&s_c, sigma_c, &s_i, sigma_i) {
            (Some(c), Some(sc), Some(i), Some(si)) if sc > 0.0 && si > 0.0 => Some(aggressive_score(c, sc, i, si)?),
            _ => None,
        };
        Ok(Self { ids: m.row_ids.clone(), corrupted: data.iter().map(|d| d.corrupted).collect(), s_c, s_i, r_c, r_i, a, sigma_c, sigma_i })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// CSV with header `id,s_C,s_I,r_C,r_I,A,corrupted`; absent values are empty fields.
    pub fn to_csv(&self) -> String {
        let cell = |col: &Option<Vec<f64>>, i: usize| col.as_ref().map(|v| v[i].to_string()).unwrap_or_default();
        let mut out = String::from("id,s_C,s_I,r_C,r_I,A,corrupted\n");
        for i in 0..self.len() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                self.ids[i],
                cell(&self.s_c, i),
                cell(&self.s_i, i),
                cell(&self.r_c, i),
                cell(&self.r_i, i),
                cell(&self.a, i),
                u8::from(self.corrupted[i])
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::container::write_bytes(path, self.to_csv().as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::container::write_bytes(path, &serde_json::to_vec_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}
