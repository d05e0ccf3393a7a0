//! Late-interaction re-ranking of first-stage candidate volumes.
//!
//! Each candidate is scored by the sum over query slices of the best cosine
//! with any of its slices (the RS score). The winner's column-wise maxima
//! (`m_sim`) then point at the slices most similar to the query, which serve
//! as the localization of the query region.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::retrieval::HitTable;
use crate::store::EmbeddingStore;
use crate::types::dot;

/// Default number of query rows per block when filling a similarity matrix.
pub const DEFAULT_BLOCK_ROWS: usize = 256;

/// Default number of localization slices.
pub const DEFAULT_TOP_L: usize = 15;

/// Borrowed row-major `rows × dim` matrix of unit vectors.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingMatrix<'a> {
    data: &'a [f32],
    dim: usize,
}

impl<'a> EmbeddingMatrix<'a> {
    pub fn new(data: &'a [f32], dim: usize) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: data.len(),
            });
        }
        Ok(Self { data, dim })
    }

    pub fn n_rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &'a [f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Cosine similarities between every query slice (rows) and every candidate
/// slice (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub query_volume_id: String,
    pub candidate_volume_id: String,
    n: usize,
    m: usize,
    data: Vec<f32>,
}

impl SimilarityMatrix {
    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn n_cols(&self) -> usize {
        self.m
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.m + j]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.m..(i + 1) * self.m]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Wraps raw `n × m` values, mostly for tests and external scoring.
    pub fn from_values(n: usize, m: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * m {
            return Err(Error::DimensionMismatch {
                expected: n * m,
                actual: data.len(),
            });
        }
        Ok(Self {
            query_volume_id: String::new(),
            candidate_volume_id: String::new(),
            n,
            m,
            data,
        })
    }

    pub fn with_ids(mut self, query: &str, candidate: &str) -> Self {
        self.query_volume_id = query.to_string();
        self.candidate_volume_id = candidate.to_string();
        self
    }
}

/// `out[i][j] = ⟨query_i, cand_j⟩`, computed in blocks of
/// [`DEFAULT_BLOCK_ROWS`] query rows.
pub fn similarity_matrix(query: EmbeddingMatrix<'_>, cand: EmbeddingMatrix<'_>) -> Result<SimilarityMatrix> {
    similarity_matrix_blocked(query, cand, DEFAULT_BLOCK_ROWS)
}

/// As [`similarity_matrix`] with an explicit block size. Every entry is an
/// independent double-precision dot product stored as `f32`, so the result
/// does not depend on `block_rows`.
pub fn similarity_matrix_blocked(
    query: EmbeddingMatrix<'_>,
    cand: EmbeddingMatrix<'_>,
    block_rows: usize,
) -> Result<SimilarityMatrix> {
    if query.dim != cand.dim {
        return Err(Error::DimensionMismatch {
            expected: query.dim,
            actual: cand.dim,
        });
    }
    let (n, m) = (query.n_rows(), cand.n_rows());
    let mut data = vec![0.0f32; n * m];
    for (b, block) in data.chunks_mut(block_rows.max(1) * m.max(1)).enumerate() {
        let first = b * block_rows.max(1);
        for (k, out_row) in block.chunks_mut(m.max(1)).enumerate() {
            let q = query.row(first + k);
            for (j, out) in out_row.iter_mut().enumerate() {
                *out = dot(q, cand.row(j)) as f32;
            }
        }
    }
    Ok(SimilarityMatrix {
        query_volume_id: String::new(),
        candidate_volume_id: String::new(),
        n,
        m,
        data,
    })
}

/// Sum over rows of the row maximum.
pub fn rs_score(sim: &SimilarityMatrix) -> Result<f64> {
    if sim.n == 0 || sim.m == 0 {
        return Err(Error::EmptyMatrix);
    }
    Ok((0..sim.n)
        .map(|i| sim.row(i).iter().copied().fold(f32::NEG_INFINITY, f32::max))
        .map(f64::from)
        .sum())
}

/// Column-wise maximum: for each candidate slice, its best similarity with
/// any query slice.
pub fn m_sim(sim: &SimilarityMatrix) -> Result<Vec<f32>> {
    if sim.n == 0 || sim.m == 0 {
        return Err(Error::EmptyMatrix);
    }
    let mut out = sim.row(0).to_vec();
    for i in 1..sim.n {
        for (o, &v) in out.iter_mut().zip(sim.row(i)) {
            *o = o.max(v);
        }
    }
    Ok(out)
}

/// Indices of the `l` largest values (clamped to the vector length), value
/// descending, index ascending on ties.
pub fn top_l_slices(msim: &[f32], l: usize) -> Vec<(usize, f32)> {
    let mut idx: Vec<(usize, f32)> = msim.iter().copied().enumerate().collect();
    idx.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    idx.truncate(l.max(1).min(msim.len()));
    idx
}

/// Distinct volumes hit by the first stage, in first-hit order.
pub fn filter_candidates(table: &HitTable) -> Result<Vec<String>> {
    if table.is_empty() {
        return Err(Error::EmptyHitTable);
    }
    Ok(table.first_hit_order().to_vec())
}

/// A candidate volume with its first-stage hit count, if known.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub volume_id: String,
    pub hit_count: Option<usize>,
}

/// [`filter_candidates`] with hit counts attached for tie-breaking.
pub fn candidates_from(table: &HitTable) -> Result<Vec<Candidate>> {
    Ok(filter_candidates(table)?
        .into_iter()
        .map(|id| Candidate {
            hit_count: table.entry(&id).map(|e| e.hit_count()),
            volume_id: id,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedCandidate {
    pub volume_id: String,
    pub rs_score: f64,
    pub hit_count: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankResult {
    pub query_id: String,
    /// RS descending, then hit count descending, then volume id ascending.
    pub ranked: Vec<RankedCandidate>,
    pub winner: String,
    /// Top-L `(slice_index, m_sim)` of the winner.
    pub top_l_slices: Vec<(usize, f32)>,
    pub winner_matrix: SimilarityMatrix,
}

impl RerankResult {
    pub fn winner_slices(&self) -> impl Iterator<Item = usize> + '_ {
        self.top_l_slices.iter().map(|&(s, _)| s)
    }
}

/// Scores every candidate against the query slices and localizes the winner.
/// Candidates are scored in parallel; ordering is a deterministic sort.
pub fn rerank(
    query_id: &str,
    query: EmbeddingMatrix<'_>,
    candidates: &[Candidate],
    db: &EmbeddingStore,
    top_l: usize,
) -> Result<RerankResult> {
    if candidates.is_empty() {
        return Err(Error::EmptyHitTable);
    }
    let scored: Vec<(RankedCandidate, SimilarityMatrix)> = candidates
        .par_iter()
        .map(|c| {
            let rows = EmbeddingMatrix::new(db.volume_rows(&c.volume_id)?, db.dim())?;
            let sim = similarity_matrix(query, rows)?.with_ids(query_id, &c.volume_id);
            let rs = rs_score(&sim)?;
            Ok((
                RankedCandidate {
                    volume_id: c.volume_id.clone(),
                    rs_score: rs,
                    hit_count: c.hit_count,
                },
                sim,
            ))
        })
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&scored[a].0, &scored[b].0);
        y.rs_score
            .total_cmp(&x.rs_score)
            .then(y.hit_count.unwrap_or(0).cmp(&x.hit_count.unwrap_or(0)))
            .then_with(|| x.volume_id.cmp(&y.volume_id))
    });
    let winner_matrix = scored[order[0]].1.clone();
    let ranked: Vec<RankedCandidate> = order.iter().map(|&i| scored[i].0.clone()).collect();
    let top = top_l_slices(&m_sim(&winner_matrix)?, top_l);
    Ok(RerankResult {
        query_id: query_id.to_string(),
        winner: ranked[0].volume_id.clone(),
        ranked,
        top_l_slices: top,
        winner_matrix,
    })
}

/// `query_id,rank,volume_id,rs_score` (rank starts at 1).
pub fn write_rerank_csv<'a>(results: impl IntoIterator<Item = &'a RerankResult>, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["query_id", "rank", "volume_id", "rs_score"])?;
    for r in results {
        for (rank, c) in r.ranked.iter().enumerate() {
            w.write_record([
                r.query_id.as_str(),
                &(rank + 1).to_string(),
                &c.volume_id,
                &format!("{:.6}", c.rs_score),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `query_id,volume_id,slice_index,msim` for the winner's top-L slices.
pub fn write_localization_csv<'a>(results: impl IntoIterator<Item = &'a RerankResult>, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["query_id", "volume_id", "slice_index", "msim"])?;
    for r in results {
        for &(s, v) in &r.top_l_slices {
            w.write_record([r.query_id.as_str(), &r.winner, &s.to_string(), &format!("{v:.6}")])?;
        }
    }
    w.flush()?;
    Ok(())
}
