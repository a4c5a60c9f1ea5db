//! Exact cosine retrieval over a database of unit-normalized perturbation
//! embeddings, excluding the query itself.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{contract, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationDb {
    ids: Vec<String>,
    embeddings: Tensor,
    index: HashMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    /// Database rows, most similar first.
    pub candidate_indices: Vec<usize>,
    pub similarities: Vec<f64>,
}

impl PerturbationDb {
    /// Normalizes every row to unit length.
    pub fn build(ids: Vec<String>, raw: &Tensor) -> Result<Self> {
        if raw.shape().len() != 2 || raw.rows() != ids.len() {
            return Err(Error::Shape {
                op: "build_db",
                lhs: raw.shape().to_vec(),
                rhs: vec![ids.len()],
            });
        }
        if ids.len() < 2 {
            return Err(contract(format!(
                "a perturbation database needs at least 2 entries, got {}",
                ids.len()
            )));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(contract(format!("duplicate perturbation id `{id}`")));
            }
        }
        let e = raw.cols();
        let mut data = Vec::with_capacity(raw.len());
        for (i, id) in ids.iter().enumerate() {
            let row = raw.row(i);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(contract(format!(
                    "embedding for `{id}` has zero or non-finite norm"
                )));
            }
            data.extend(row.iter().map(|x| x / norm));
        }
        Ok(Self {
            ids,
            embeddings: Tensor::matrix(raw.rows(), e, data)?,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    pub fn embedding(&self, idx: usize) -> &[f64] {
        self.embeddings.row(idx)
    }

    pub fn top_k(&self, query_id: &str, k: usize) -> Result<RetrievalResult> {
        self.top_k_by_index(self.index_of(query_id)?, k)
    }

    /// The `k` most similar rows other than `query`, ties broken by ascending
    /// row index.
    pub fn top_k_by_index(&self, query: usize, k: usize) -> Result<RetrievalResult> {
        let p = self.len();
        if query >= p {
            return Err(contract(format!(
                "query index {query} out of range for {p} entries"
            )));
        }
        if k == 0 || k > p - 1 {
            return Err(contract(format!("K must be in 1..={}, got {k}", p - 1)));
        }
        let q = self.embedding(query);
        let mut scored: Vec<(f64, usize)> = (0..p)
            .filter(|&i| i != query)
            .map(|i| (q.iter().zip(self.embedding(i)).map(|(a, b)| a * b).sum(), i))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        scored.truncate(k);
        Ok(RetrievalResult {
            candidate_indices: scored.iter().map(|s| s.1).collect(),
            similarities: scored.iter().map(|s| s.0).collect(),
        })
    }

    /// CSV with header `id,e0,...,e{E-1}`; values use shortest round-trip
    /// formatting.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_embeddings_csv(path, &self.ids, &self.embeddings)
    }

    /// Loads a CSV written by [`write_embeddings_csv`], normalizing on ingest.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let (ids, raw) = read_embeddings_csv(path)?;
        Self::build(ids, &raw)
    }
}

/// Ids and raw rows of an embeddings CSV.
pub fn read_embeddings_csv(path: &Path) -> Result<(Vec<String>, Tensor)> {
    {
        let mut reader = csv::Reader::from_path(path)?;
        let header = reader.headers()?.clone();
        if header.get(0) != Some("id") {
            return Err(contract(format!(
                "{}: first column must be `id`",
                path.display()
            )));
        }
        let e = header.len() - 1;
        let mut ids = Vec::new();
        let mut data = Vec::new();
        for record in reader.records() {
            let record = record?;
            ids.push(record[0].to_string());
            for field in record.iter().skip(1) {
                data.push(
                    field
                        .parse::<f64>()
                        .map_err(|err| contract(format!("bad number `{field}`: {err}")))?,
                );
            }
        }
        let raw = Tensor::matrix(ids.len(), e, data)?;
        Ok((ids, raw))
    }
}

pub fn write_embeddings_csv(path: &Path, ids: &[String], embeddings: &Tensor) -> Result<()> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string()];
    header.extend((0..embeddings.cols()).map(|i| format!("e{i}")));
    writer.write_record(&header)?;
    for (i, id) in ids.iter().enumerate() {
        let mut row = vec![id.clone()];
        row.extend(embeddings.row(i).iter().map(|v| v.to_string()));
        writer.write_record(&row)?;
    }
    let bytes = writer.into_inner().map_err(|e| contract(e.to_string()))?;
    crate::io::write_atomic(path, &bytes)
}
