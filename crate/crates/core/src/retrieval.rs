//! First-stage retrieval: one top-1 database slice per query slice, grouped
//! into a hit table, then count-based aggregation to a single volume.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::index::{SearchHit, SliceIndex};
use crate::labels::{LabelMap, SliceLabelTable};
use crate::store::EmbeddingStore;
use crate::types::{Granularity, LabelId, RegionQuery};

/// One query slice and the database slice it matched.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HitPair {
    pub query_slice: usize,
    pub db_slice: usize,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HitEntry {
    pub volume_id: String,
    /// Sum of hit scores, accumulated in query-slice order.
    pub score_sum: f64,
    pub hit_pairs: Vec<HitPair>,
}

impl HitEntry {
    pub fn hit_count(&self) -> usize {
        self.hit_pairs.len()
    }
}

/// Per-query tally of database volumes receiving top-1 slice matches.
#[derive(Debug, Clone, PartialEq)]
pub struct HitTable {
    pub query_id: String,
    entries: BTreeMap<String, HitEntry>,
    /// Volumes in the order they were first hit (query-slice order).
    first_hit: Vec<String>,
    searched: usize,
}

impl HitTable {
    pub fn new(query_id: impl Into<String>) -> Self {
        Self {
            query_id: query_id.into(),
            entries: BTreeMap::new(),
            first_hit: Vec::new(),
            searched: 0,
        }
    }

    /// Records the top-1 match of one query slice.
    pub fn record(&mut self, query_slice: usize, volume_id: &str, db_slice: usize, score: f32) {
        self.searched += 1;
        let entry = self.entries.entry(volume_id.to_string()).or_insert_with(|| {
            self.first_hit.push(volume_id.to_string());
            HitEntry {
                volume_id: volume_id.to_string(),
                score_sum: 0.0,
                hit_pairs: Vec::new(),
            }
        });
        entry.score_sum += f64::from(score);
        entry.hit_pairs.push(HitPair {
            query_slice,
            db_slice,
            score,
        });
    }

    pub fn entries(&self) -> impl Iterator<Item = &HitEntry> {
        self.entries.values()
    }

    pub fn entry(&self, volume_id: &str) -> Option<&HitEntry> {
        self.entries.get(volume_id)
    }

    pub fn first_hit_order(&self) -> &[String] {
        &self.first_hit
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of query slices that were searched.
    pub fn searched(&self) -> usize {
        self.searched
    }

    pub fn total_hits(&self) -> usize {
        self.entries.values().map(HitEntry::hit_count).sum()
    }
}

/// A volume-level result of count-based aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievedVolume {
    pub volume_id: String,
    pub hit_count: usize,
    pub score_sum: f64,
    /// Sorted, distinct database slice indices that were hit.
    pub hit_slice_indices: Vec<usize>,
}

/// Which query slices to search and which database volume to leave out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchOptions {
    /// Search every `stride`-th slice (1 = all).
    pub stride: usize,
    /// Skip matches inside the database volume with the query's own id.
    pub exclude_self: bool,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            exclude_self: false,
        }
    }
}

/// Top-1 database slice for one query slice.
pub fn slice_search(query_slice: &[f32], index: &dyn SliceIndex) -> Result<SearchHit> {
    slice_search_excluding(query_slice, index, None)
}

fn slice_search_excluding(query_slice: &[f32], index: &dyn SliceIndex, exclude: Option<usize>) -> Result<SearchHit> {
    index
        .search_filtered(query_slice, 1, exclude)?
        .into_iter()
        .next()
        .ok_or(Error::EmptyIndex)
}

/// Searches each `(query_slice_index, vector)` and groups the top-1 hits by
/// database volume. Searches run in parallel; the table is assembled in
/// query-slice order.
pub fn build_hit_table(
    query_id: &str,
    query_slices: &[(usize, &[f32])],
    index: &dyn SliceIndex,
    exclude_volume: Option<&str>,
) -> Result<HitTable> {
    if query_slices.is_empty() {
        return Err(Error::EmptyHitTable);
    }
    let exclude = exclude_volume.and_then(|id| index.store().volume_index(id));
    let hits: Vec<SearchHit> = query_slices
        .par_iter()
        .map(|(_, v)| slice_search_excluding(v, index, exclude))
        .collect::<Result<_>>()?;
    let mut table = HitTable::new(query_id);
    for ((qs, _), hit) in query_slices.iter().zip(hits) {
        table.record(*qs, &hit.volume_id, hit.slice_index, hit.score);
    }
    Ok(table)
}

/// Ranks hit volumes by `(hit_count desc, score_sum desc, volume_id asc)`.
pub fn aggregate_count(table: &HitTable) -> Result<Vec<RetrievedVolume>> {
    if table.is_empty() {
        return Err(Error::EmptyHitTable);
    }
    let mut ranked: Vec<RetrievedVolume> = table
        .entries()
        .map(|e| {
            let mut slices: Vec<usize> = e.hit_pairs.iter().map(|p| p.db_slice).collect();
            slices.sort_unstable();
            slices.dedup();
            RetrievedVolume {
                volume_id: e.volume_id.clone(),
                hit_count: e.hit_count(),
                score_sum: e.score_sum,
                hit_slice_indices: slices,
            }
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.hit_count
            .cmp(&a.hit_count)
            .then(b.score_sum.total_cmp(&a.score_sum))
            .then_with(|| a.volume_id.cmp(&b.volume_id))
    });
    Ok(ranked)
}

/// The minimal contiguous slice span of `volume_id` covering every slice on
/// which `region` appears (at the given granularity).
pub fn region_subvolume(
    volume_id: &str,
    region: LabelId,
    granularity: Granularity,
    labels: &SliceLabelTable,
    map: &LabelMap,
) -> Result<RegionQuery> {
    let mut first = None;
    let mut last = None;
    for (s, fine) in labels.slices(volume_id).iter().enumerate() {
        if map.at(fine, granularity)?.contains(&region) {
            first.get_or_insert(s);
            last = Some(s);
        }
    }
    match (first, last) {
        (Some(m), Some(k)) => Ok(RegionQuery {
            volume_id: volume_id.to_string(),
            region,
            granularity,
            slice_range: (m, k),
        }),
        _ => Err(Error::RegionAbsent {
            volume: volume_id.to_string(),
            region: map.name(region, granularity).map_or_else(|| region.to_string(), str::to_string),
        }),
    }
}

/// A whole query volume or a region sub-volume of one.
#[derive(Debug, Clone, PartialEq)]
pub enum QueryTarget {
    Volume(String),
    Region(RegionQuery),
}

impl QueryTarget {
    pub fn volume_id(&self) -> &str {
        match self {
            QueryTarget::Volume(id) => id,
            QueryTarget::Region(r) => &r.volume_id,
        }
    }

    /// Identifier used in reports: the volume id, or `volume_id:region`.
    pub fn query_id(&self, map: &LabelMap) -> String {
        match self {
            QueryTarget::Volume(id) => id.clone(),
            QueryTarget::Region(r) => {
                let name = map.name(r.region, r.granularity).map_or_else(|| r.region.to_string(), str::to_string);
                format!("{}:{}", r.volume_id, name)
            }
        }
    }

    /// Inclusive slice span of the query within its volume.
    pub fn span(&self, queries: &EmbeddingStore) -> Result<(usize, usize)> {
        match self {
            QueryTarget::Volume(id) => Ok((0, queries.require(id)?.n_slices - 1)),
            QueryTarget::Region(r) => Ok(r.slice_range),
        }
    }

    /// `(slice_index, vector)` for the searched slices.
    pub fn slices<'s>(&self, queries: &'s EmbeddingStore, stride: usize) -> Result<Vec<(usize, &'s [f32])>> {
        let (first, last) = self.span(queries)?;
        let rows = queries.slice_range(self.volume_id(), first, last)?;
        let dim = queries.dim();
        Ok((first..=last)
            .step_by(stride.max(1))
            .map(|s| (s, &rows[(s - first) * dim..(s - first + 1) * dim]))
            .collect())
    }
}

/// Outcome of first-stage retrieval for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    pub table: HitTable,
    pub ranked: Vec<RetrievedVolume>,
}

impl Retrieval {
    /// The rank-1 volume.
    pub fn best(&self) -> &RetrievedVolume {
        &self.ranked[0]
    }
}

/// Hit table followed by count aggregation.
pub fn retrieve_volume(
    target: &QueryTarget,
    queries: &EmbeddingStore,
    index: &dyn SliceIndex,
    map: &LabelMap,
    opts: SearchOptions,
) -> Result<Retrieval> {
    let slices = target.slices(queries, opts.stride)?;
    let exclude = opts.exclude_self.then(|| target.volume_id());
    let table = build_hit_table(&target.query_id(map), &slices, index, exclude)?;
    let ranked = aggregate_count(&table)?;
    Ok(Retrieval { table, ranked })
}

/// `query_id,volume_id,hit_count,score_sum`, entries in ranked order.
pub fn write_hit_table_csv<'a>(tables: impl IntoIterator<Item = &'a HitTable>, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["query_id", "volume_id", "hit_count", "score_sum"])?;
    for t in tables {
        for v in aggregate_count(t)? {
            w.write_record([
                t.query_id.as_str(),
                &v.volume_id,
                &v.hit_count.to_string(),
                &format!("{:.6}", v.score_sum),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `query_id,volume_id,q_slice,db_slice,score`, in query-slice order.
pub fn write_hit_pairs_csv<'a>(tables: impl IntoIterator<Item = &'a HitTable>, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["query_id", "volume_id", "q_slice", "db_slice", "score"])?;
    for t in tables {
        let mut rows: Vec<(&str, &HitPair)> = t
            .entries()
            .flat_map(|e| e.hit_pairs.iter().map(move |p| (e.volume_id.as_str(), p)))
            .collect();
        rows.sort_by_key(|(_, p)| p.query_slice);
        for (vol, p) in rows {
            w.write_record([
                t.query_id.as_str(),
                vol,
                &p.query_slice.to_string(),
                &p.db_slice.to_string(),
                &format!("{:.6}", p.score),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::FlatIndex;
    use crate::store::StoreBuilder;
    use crate::types::{dot, normalize, Split};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn table_from(counts: &[(&str, usize, f64)]) -> HitTable {
        let mut t = HitTable::new("q");
        let mut qs = 0;
        for &(id, n, sum) in counts {
            for i in 0..n {
                t.record(qs, id, i, (sum / n as f64) as f32);
                qs += 1;
            }
        }
        t
    }

    fn random_rows(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f32>> {
        (0..n)
            .map(|_| normalize(&(0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>()).unwrap())
            .collect()
    }

    #[test]
    fn aggregate_orders_by_count() {
        let t = table_from(&[("C", 4, 3.0), ("A", 21, 10.0), ("B", 9, 8.0)]);
        let order: Vec<String> = aggregate_count(&t).unwrap().into_iter().map(|v| v.volume_id).collect();
        assert_eq!(order, ["A", "B", "C"]);
    }

    #[test]
    fn aggregate_tie_breaks_on_score_sum() {
        let t = table_from(&[("A", 5, 4.2), ("B", 5, 4.9)]);
        let ranked = aggregate_count(&t).unwrap();
        assert_eq!(ranked[0].volume_id, "B");
        assert!(ranked[0].score_sum > ranked[1].score_sum);
    }

    #[test]
    fn aggregate_single_and_empty() {
        let t = table_from(&[("only", 3, 2.0)]);
        assert_eq!(aggregate_count(&t).unwrap()[0].volume_id, "only");
        assert!(matches!(aggregate_count(&HitTable::new("q")), Err(Error::EmptyHitTable)));
    }

    #[test]
    fn slice_search_self_and_orthogonal() {
        let mut b = StoreBuilder::new(3);
        b.push_volume("v", Split::Database, [[1.0, 0.0, 0.0]]).unwrap();
        let store = b.build().unwrap();
        let idx = FlatIndex::new(&store);
        let hit = slice_search(&[1.0, 0.0, 0.0], &idx).unwrap();
        assert!((hit.score - 1.0).abs() <= 1e-6);
        let hit = slice_search(&[0.0, 1.0, 0.0], &idx).unwrap();
        assert_eq!(hit.volume_id, "v");
        assert!(hit.score.abs() <= 1e-6);
    }

    #[test]
    fn slice_search_matches_full_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut b = StoreBuilder::new(8);
        for v in 0..5 {
            b.push_volume(&format!("v{v}"), Split::Database, random_rows(&mut rng, 10, 8)).unwrap();
        }
        let store = b.build().unwrap();
        let idx = FlatIndex::new(&store);
        for q in random_rows(&mut rng, 30, 8) {
            let best = (0..store.row_count())
                .max_by(|&a, &b| dot(store.row(a), &q).total_cmp(&dot(store.row(b), &q)))
                .unwrap();
            assert_eq!(slice_search(&q, &idx).unwrap().row, best);
        }
    }

    #[test]
    fn hit_table_self_match_and_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_rows(&mut rng, 6, 16);
        let bb = random_rows(&mut rng, 6, 16);
        let mut b = StoreBuilder::new(16);
        b.push_volume("a", Split::Database, &a).unwrap();
        b.push_volume("b", Split::Database, &bb).unwrap();
        let store = b.build().unwrap();
        let idx = FlatIndex::new(&store);

        let q: Vec<(usize, &[f32])> = a.iter().enumerate().map(|(i, v)| (i, v.as_slice())).collect();
        let t = build_hit_table("q", &q, &idx, None).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.entry("a").unwrap().hit_count(), 6);

        let q = [(0, a[2].as_slice()), (1, bb[4].as_slice())];
        let t = build_hit_table("q", &q, &idx, None).unwrap();
        assert_eq!(t.entry("a").unwrap().hit_count(), 1);
        assert_eq!(t.entry("b").unwrap().hit_count(), 1);
        assert_eq!(t.first_hit_order(), ["a", "b"]);
        assert_eq!(t.total_hits(), t.searched());
    }

    #[test]
    fn hit_table_matches_group_by_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut b = StoreBuilder::new(12);
        for v in ["x", "y", "z"] {
            b.push_volume(v, Split::Database, random_rows(&mut rng, 15, 12)).unwrap();
        }
        let store = b.build().unwrap();
        let idx = FlatIndex::new(&store);
        let queries = random_rows(&mut rng, 40, 12);
        let q: Vec<(usize, &[f32])> = queries.iter().enumerate().map(|(i, v)| (i, v.as_slice())).collect();
        let t = build_hit_table("q", &q, &idx, None).unwrap();

        let mut oracle: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, qv) in queries.iter().enumerate() {
            let best = (0..store.row_count())
                .max_by(|&a, &b| dot(store.row(a), qv).total_cmp(&dot(store.row(b), qv)))
                .unwrap();
            oracle.entry(store.locate(best).0.volume_id.clone()).or_default().push(i);
        }
        assert_eq!(t.len(), oracle.len());
        for (vol, qs) in oracle {
            let got: Vec<usize> = t.entry(&vol).unwrap().hit_pairs.iter().map(|p| p.query_slice).collect();
            assert_eq!(got, qs);
        }
        assert_eq!(t.total_hits(), 40);
    }

    fn labels_for(slices: &[&[u16]]) -> SliceLabelTable {
        let mut t = SliceLabelTable::new();
        for (s, ls) in slices.iter().enumerate() {
            t.insert("v", s, ls.iter().map(|&l| LabelId(l)).collect());
        }
        t
    }

    #[test]
    fn region_span_contiguous_and_gapped() {
        let map = LabelMap::total_segmentator();
        let mut rows: Vec<&[u16]> = vec![&[]; 20];
        rows[10] = &[4];
        rows[11] = &[4, 5];
        rows[12] = &[4];
        let t = labels_for(&rows);
        let r = region_subvolume("v", LabelId(4), Granularity::Fine, &t, &map).unwrap();
        assert_eq!(r.slice_range, (10, 12));

        let mut rows: Vec<&[u16]> = vec![&[]; 12];
        rows[5] = &[9];
        rows[9] = &[9];
        let t = labels_for(&rows);
        let r = region_subvolume("v", LabelId(9), Granularity::Fine, &t, &map).unwrap();
        assert_eq!(r.slice_range, (5, 9));
        assert!(matches!(
            region_subvolume("v", LabelId(3), Granularity::Fine, &t, &map),
            Err(Error::RegionAbsent { .. })
        ));
    }

    #[test]
    fn coarse_region_spans_all_members() {
        let map = LabelMap::total_segmentator();
        // kidney right (1) on slice 2, kidney left (2) on slice 6
        let mut rows: Vec<&[u16]> = vec![&[]; 8];
        rows[2] = &[1];
        rows[6] = &[2];
        let t = labels_for(&rows);
        let kidney = map.lookup("kidney", Granularity::Coarse).unwrap();
        let r = region_subvolume("v", kidney, Granularity::Coarse, &t, &map).unwrap();
        assert_eq!(r.slice_range, (2, 6));
    }

    #[test]
    fn self_retrieval_and_one_slice_region() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let vols: Vec<Vec<Vec<f32>>> = (0..4).map(|_| random_rows(&mut rng, 8, 16)).collect();
        let mut db = StoreBuilder::new(16);
        let mut qs = StoreBuilder::new(16);
        for (i, v) in vols.iter().enumerate() {
            db.push_volume(&format!("v{i}"), Split::Database, v).unwrap();
        }
        qs.push_volume("v2", Split::Query, &vols[2]).unwrap();
        let db = db.build().unwrap();
        let qs = qs.build().unwrap();
        let idx = FlatIndex::new(&db);
        let map = LabelMap::total_segmentator();

        let r = retrieve_volume(&QueryTarget::Volume("v2".into()), &qs, &idx, &map, SearchOptions::default()).unwrap();
        assert_eq!(r.best().volume_id, "v2");
        assert_eq!(r.best().hit_count, 8);

        let excl = SearchOptions {
            exclude_self: true,
            ..Default::default()
        };
        let r = retrieve_volume(&QueryTarget::Volume("v2".into()), &qs, &idx, &map, excl).unwrap();
        assert_ne!(r.best().volume_id, "v2");
        assert_eq!(r.table.total_hits(), 8);

        let region = RegionQuery {
            volume_id: "v2".into(),
            region: LabelId(0),
            granularity: Granularity::Fine,
            slice_range: (3, 3),
        };
        let r = retrieve_volume(&QueryTarget::Region(region), &qs, &idx, &map, SearchOptions::default()).unwrap();
        let hit = slice_search(qs.slice("v2", 3).unwrap(), &idx).unwrap();
        assert_eq!(r.table.len(), 1);
        assert_eq!(r.best().volume_id, hit.volume_id);
        assert_eq!(r.best().hit_slice_indices, [hit.slice_index]);
    }

    #[test]
    fn stride_searches_subset() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut db = StoreBuilder::new(8);
        db.push_volume("d", Split::Database, random_rows(&mut rng, 5, 8)).unwrap();
        let mut qs = StoreBuilder::new(8);
        qs.push_volume("q", Split::Query, random_rows(&mut rng, 10, 8)).unwrap();
        let (db, qs) = (db.build().unwrap(), qs.build().unwrap());
        let opts = SearchOptions {
            stride: 3,
            exclude_self: false,
        };
        let r = retrieve_volume(
            &QueryTarget::Volume("q".into()),
            &qs,
            &FlatIndex::new(&db),
            &LabelMap::total_segmentator(),
            opts,
        )
        .unwrap();
        assert_eq!(r.table.searched(), 4);
        let qslices: Vec<usize> = r.table.entry("d").unwrap().hit_pairs.iter().map(|p| p.query_slice).collect();
        assert_eq!(qslices, [0, 3, 6, 9]);
    }

    #[test]
    fn csv_export() {
        let t = table_from(&[("A", 2, 1.5), ("B", 1, 0.25)]);
        let mut out = Vec::new();
        write_hit_table_csv([&t], &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "query_id,volume_id,hit_count,score_sum\nq,A,2,1.500000\nq,B,1,0.250000\n"
        );
        let mut out = Vec::new();
        write_hit_pairs_csv([&t], &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().nth(1).unwrap(), "q,A,0,0,0.750000");
        assert_eq!(text.lines().count(), 4);
    }

    proptest! {
        #[test]
        fn aggregation_ignores_entry_order(counts in prop::collection::vec((1usize..6, 0u32..100), 1..8), seed in any::<u64>()) {
            let entries: Vec<(String, usize, f64)> = counts.iter().enumerate()
                .map(|(i, &(n, s))| (format!("v{i}"), n, f64::from(s) / 10.0)).collect();
            let mut shuffled = entries.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..shuffled.len()).rev() {
                shuffled.swap(i, rng.random_range(0..=i));
            }
            fn as_refs(e: &[(String, usize, f64)]) -> Vec<(&str, usize, f64)> {
                e.iter().map(|(a, b, c)| (a.as_str(), *b, *c)).collect()
            }
            let a = aggregate_count(&table_from(&as_refs(&entries))).unwrap();
            let b = aggregate_count(&table_from(&as_refs(&shuffled))).unwrap();
            let ids = |v: &[RetrievedVolume]| v.iter().map(|x| x.volume_id.clone()).collect::<Vec<_>>();
            prop_assert_eq!(ids(&a), ids(&b));
            let total: usize = a.iter().map(|v| v.hit_count).sum();
            prop_assert_eq!(total, counts.iter().map(|c| c.0).sum::<usize>());
        }

        #[test]
        fn region_span_covers_every_occurrence(present in prop::collection::btree_set(0usize..30, 1..10)) {
            let map = LabelMap::total_segmentator();
            let mut t = SliceLabelTable::new();
            t.ensure_volume("v", 30);
            for &s in &present {
                t.insert("v", s, [LabelId(7)].into());
            }
            let r = region_subvolume("v", LabelId(7), Granularity::Fine, &t, &map).unwrap();
            prop_assert!(present.iter().all(|s| r.slices().contains(s)));
            prop_assert_eq!(r.slice_range, (*present.first().unwrap(), *present.last().unwrap()));
        }
    }
}
