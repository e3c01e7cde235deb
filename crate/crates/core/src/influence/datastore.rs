//! Directory layout: `manifest.json` plus `shard-NNNN.bin` containers, each
//! holding a contiguous block of matrix rows.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};

use super::{InfluenceMatrix, Provenance, QueryColumn};

pub const MANIFEST: &str = "manifest.json";
const ROWS_PER_SHARD: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardInfo {
    pub file: String,
    pub row_start: usize,
    pub rows: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatastoreManifest {
    pub row_ids: Vec<u64>,
    pub columns: Vec<QueryColumn>,
    pub provenance: Provenance,
    pub shards: Vec<ShardInfo>,
}

#[derive(Serialize, Deserialize)]
struct ShardHeader {
    kind: String,
    row_start: usize,
    rows: usize,
    cols: usize,
}

/// Writes the matrix under `dir`, returning the manifest's sha256.
pub fn save_matrix(m: &InfluenceMatrix, dir: &Path) -> Result<String> {
    let cols = m.n_cols();
    let mut starts: Vec<usize> = (0..m.n_rows()).step_by(ROWS_PER_SHARD).collect();
    if starts.is_empty() {
        starts.push(0);
    }
    let mut shards = Vec::with_capacity(starts.len());
    for (k, start) in starts.into_iter().enumerate() {
        let rows = ROWS_PER_SHARD.min(m.n_rows() - start);
        let file = format!("shard-{k:04}.bin");
        let header = ShardHeader { kind: "influence_shard".into(), row_start: start, rows, cols };
        let sha = container::write_file(&dir.join(&file), &header, &m.values[start * cols..(start + rows) * cols])?;
        shards.push(ShardInfo { file, row_start: start, rows, sha256: sha });
    }
    let manifest = DatastoreManifest {
        row_ids: m.row_ids.clone(),
        columns: m.columns.clone(),
        provenance: m.provenance.clone(),
        shards,
    };
    let bytes = serde_json::to_vec_pretty(&manifest)?;
    container::write_bytes(&dir.join(MANIFEST), &bytes)?;
    Ok(container::sha256_hex(&bytes))
}

/// Reads a datastore, verifying shard hashes and, when given, the expected provenance.
pub fn load_matrix(dir: &Path, expected: Option<&Provenance>) -> Result<InfluenceMatrix> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatastoreManifest = serde_json::from_str(&text)?;
    if let Some(p) = expected {
        if *p != manifest.provenance {
            return Err(Error::Provenance(format!(
                "datastore at {} was built at checkpoint {} (damping {}, layers {:?}), expected {} (damping {}, layers {:?})",
                dir.display(),
                manifest.provenance.checkpoint_hash,
                manifest.provenance.damping,
                manifest.provenance.filter,
                p.checkpoint_hash,
                p.damping,
                p.filter
            )));
        }
    }
    let cols = manifest.columns.len();
    let mut values = Vec::with_capacity(manifest.row_ids.len() * cols);
    let mut next_row = 0;
    for s in &manifest.shards {
        let file = dir.join(&s.file);
        let bytes = std::fs::read(&file).map_err(|e| Error::io(&file, e))?;
        if container::sha256_hex(&bytes) != s.sha256 {
            return Err(Error::Provenance(format!("shard {} does not match its recorded hash", file.display())));
        }
        let (h, payload): (ShardHeader, Vec<f64>) = container::decode(&bytes)?;
        if h.kind != "influence_shard" || h.row_start != next_row || h.cols != cols || payload.len() != h.rows * cols {
            return Err(Error::Format(format!("shard {} is inconsistent with the manifest", file.display())));
        }
        values.extend(payload);
        next_row += h.rows;
    }
    if next_row != manifest.row_ids.len() {
        return Err(Error::Format(format!("datastore at {} is missing rows", dir.display())));
    }
    InfluenceMatrix::new(values, manifest.row_ids, manifest.columns, manifest.provenance)
}
