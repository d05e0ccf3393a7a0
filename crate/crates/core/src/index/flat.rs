use crate::error::Result;
use crate::store::EmbeddingStore;
use crate::types::dot;

use super::{check_query, id_ranks, to_hits, RankedRow, SearchHit, SliceIndex};

/// Exhaustive scan: every query is compared with every stored row.
#[derive(Debug, Clone)]
pub struct FlatIndex<'a> {
    store: &'a EmbeddingStore,
    id_rank: Vec<u32>,
}

impl<'a> FlatIndex<'a> {
    pub fn new(store: &'a EmbeddingStore) -> Self {
        Self {
            store,
            id_rank: id_ranks(store),
        }
    }
}

impl SliceIndex for FlatIndex<'_> {
    fn store(&self) -> &EmbeddingStore {
        self.store
    }

    fn search_filtered(&self, query: &[f32], k: usize, exclude: Option<usize>) -> Result<Vec<SearchHit>> {
        check_query(self.store, query)?;
        let k = k.max(1);
        let mut rows: Vec<RankedRow> = Vec::with_capacity(self.store.row_count());
        for (vi, vol) in self.store.volumes().iter().enumerate() {
            if exclude == Some(vi) {
                continue;
            }
            for (s, r) in vol.rows().enumerate() {
                rows.push(RankedRow {
                    score: dot(self.store.row(r), query) as f32,
                    id_rank: self.id_rank[vi],
                    slice: s as u32,
                    row: r as u32,
                });
            }
        }
        if rows.len() > k {
            rows.select_nth_unstable_by(k - 1, RankedRow::better_first);
            rows.truncate(k);
        }
        rows.sort_by(RankedRow::better_first);
        Ok(to_hits(self.store, &rows))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::store::StoreBuilder;
    use crate::types::{normalize, Split};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_store(n_vol: usize, per: usize, dim: usize, seed: u64) -> EmbeddingStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = StoreBuilder::new(dim);
        for v in 0..n_vol {
            let rows: Vec<Vec<f32>> = (0..per)
                .map(|_| (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect())
                .collect();
            b.push_volume(&format!("vol{v:03}"), Split::Database, rows).unwrap();
        }
        b.build().unwrap()
    }

    #[test]
    fn self_match_first() {
        let store = random_store(4, 10, 16, 1);
        let idx = FlatIndex::new(&store);
        let q = store.slice("vol002", 7).unwrap().to_vec();
        let hits = idx.search(&q, 3).unwrap();
        assert_eq!((hits[0].volume_id.as_str(), hits[0].slice_index), ("vol002", 7));
        assert!((hits[0].score - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn k_beyond_rows_returns_everything_sorted() {
        let store = random_store(2, 3, 8, 2);
        let idx = FlatIndex::new(&store);
        let q = normalize(&[1.0; 8]).unwrap();
        let hits = idx.search(&q, 100).unwrap();
        assert_eq!(hits.len(), 6);
        assert!(hits.windows(2).all(|w| w[0].score >= w[1].score));
        let mut rows: Vec<usize> = hits.iter().map(|h| h.row).collect();
        rows.sort_unstable();
        assert_eq!(rows, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn matches_independent_full_scan() {
        let store = random_store(10, 20, 12, 3);
        let idx = FlatIndex::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let q: Vec<f32> = (0..12).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let q = normalize(&q).unwrap();
            // oracle: naive f32 scan, full argsort
            let mut all: Vec<(f32, usize)> = (0..store.row_count())
                .map(|r| (store.row(r).iter().zip(&q).map(|(a, b)| a * b).sum::<f32>(), r))
                .collect();
            all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let expected: Vec<usize> = all[..5].iter().map(|x| x.1).collect();
            let got: Vec<usize> = idx.search(&q, 5).unwrap().iter().map(|h| h.row).collect();
            assert_eq!(got, expected);
        }
    }

    #[test]
    fn ties_break_on_volume_then_slice() {
        let mut b = StoreBuilder::new(2);
        b.push_volume("b", Split::Database, [[1.0, 0.0], [1.0, 0.0]]).unwrap();
        b.push_volume("a", Split::Database, [[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let store = b.build().unwrap();
        let hits = FlatIndex::new(&store).search(&[1.0, 0.0], 3).unwrap();
        let keys: Vec<(&str, usize)> = hits.iter().map(|h| (h.volume_id.as_str(), h.slice_index)).collect();
        assert_eq!(keys, [("a", 1), ("b", 0), ("b", 1)]);
    }

    #[test]
    fn exclusion_and_empty() {
        let store = random_store(3, 4, 8, 5);
        let idx = FlatIndex::new(&store);
        let q = store.slice("vol001", 0).unwrap().to_vec();
        let hits = idx.search_filtered(&q, 4, Some(1)).unwrap();
        assert!(hits.iter().all(|h| h.volume_id != "vol001"));

        let empty = StoreBuilder::new(8).build().unwrap();
        assert!(matches!(FlatIndex::new(&empty).search(&q, 1), Err(Error::EmptyIndex)));
    }
}
