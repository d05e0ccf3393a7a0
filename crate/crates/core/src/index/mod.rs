//! Top-k inner-product search over normalized slice embeddings.
//!
//! Two backends share the [`SliceIndex`] trait: [`FlatIndex`] scans every
//! row and is exact, [`HnswIndex`] walks a layered proximity graph. Both
//! report cosine scores and order hits by score descending, ties broken by
//! `(volume_id, slice_index)` ascending.

mod flat;
mod hnsw;

use std::cmp::Ordering;

pub use flat::FlatIndex;
pub use hnsw::{HnswGraph, HnswIndex, HnswParams, NeighborSelection, INDEX_MAGIC};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::EmbeddingStore;

/// One retrieved database slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchHit {
    pub volume_id: String,
    pub slice_index: usize,
    /// Row in the database store.
    pub row: usize,
    /// Cosine similarity with the query.
    pub score: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum IndexKind {
    #[default]
    Flat,
    Hnsw,
}

impl std::str::FromStr for IndexKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "flat" => Ok(IndexKind::Flat),
            "hnsw" => Ok(IndexKind::Hnsw),
            other => Err(Error::Config(format!("unknown index kind '{other}'"))),
        }
    }
}

/// Search over the rows of one [`EmbeddingStore`].
///
/// Implementations are immutable after construction and may be shared across
/// threads.
pub trait SliceIndex: Send + Sync {
    fn store(&self) -> &EmbeddingStore;

    /// Up to `k` best rows, skipping every row of volume `exclude` (an index
    /// into the store's volume list) when given.
    fn search_filtered(&self, query: &[f32], k: usize, exclude: Option<usize>) -> Result<Vec<SearchHit>>;

    fn search(&self, query: &[f32], k: usize) -> Result<Vec<SearchHit>> {
        self.search_filtered(query, k, None)
    }
}

/// Rank of each volume (by store position) in lexicographic id order, used as
/// the tiebreak key.
pub(crate) fn id_ranks(store: &EmbeddingStore) -> Vec<u32> {
    let mut order: Vec<usize> = (0..store.volumes().len()).collect();
    order.sort_by(|&a, &b| store.volumes()[a].volume_id.cmp(&store.volumes()[b].volume_id));
    let mut rank = vec![0u32; order.len()];
    for (r, &v) in order.iter().enumerate() {
        rank[v] = r as u32;
    }
    rank
}

/// Ordering key for a row: higher score first, then volume id, then slice.
#[derive(Debug, Clone, Copy)]
pub(crate) struct RankedRow {
    pub score: f32,
    pub id_rank: u32,
    pub slice: u32,
    pub row: u32,
}

impl RankedRow {
    pub fn better_first(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then(self.id_rank.cmp(&other.id_rank))
            .then(self.slice.cmp(&other.slice))
    }
}

pub(crate) fn to_hits(store: &EmbeddingStore, rows: &[RankedRow]) -> Vec<SearchHit> {
    rows.iter()
        .map(|r| {
            let (v, s) = store.locate(r.row as usize);
            SearchHit {
                volume_id: v.volume_id.clone(),
                slice_index: s,
                row: r.row as usize,
                score: r.score,
            }
        })
        .collect()
}

pub(crate) fn check_query(store: &EmbeddingStore, query: &[f32]) -> Result<()> {
    if store.is_empty() {
        return Err(Error::EmptyIndex);
    }
    if query.len() != store.dim() {
        return Err(Error::DimensionMismatch {
            expected: store.dim(),
            actual: query.len(),
        });
    }
    Ok(())
}

/// Fraction of queries whose approximate top-k contains the exact rank-1 row
/// (`k = 1` gives classic recall@1).
pub fn recall_at_k(exact: &[Vec<SearchHit>], approx: &[Vec<SearchHit>]) -> f64 {
    assert_eq!(exact.len(), approx.len());
    if exact.is_empty() {
        return 0.0;
    }
    let found = exact
        .iter()
        .zip(approx)
        .filter(|(e, a)| e.first().is_some_and(|t| a.iter().any(|h| h.row == t.row)))
        .count();
    found as f64 / exact.len() as f64
}
