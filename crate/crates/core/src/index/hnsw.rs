//! Hierarchical navigable small world graph.
//!
//! Node levels are drawn as `⌊−ln(U)·mL⌋` with `mL = 1/ln(M)` from a seeded
//! ChaCha8 stream, so a build is a pure function of `(rows, params)`. Every
//! layer keeps the `M` (layer 0: `M0 = 2·M`) most similar neighbors per node.
//! After insertion a repair pass links any node not reachable from the entry
//! point on layer 0.
//!
//! `VGI1` layout (little-endian):
//!
//! ```text
//! "VGI1" | u32 version | u32 M | u32 M0 | u32 ef_construction | u32 ef_search
//! u64 seed | u64 store checksum | u64 node count | u32 entry (u32::MAX = none)
//! u32 max level | u8 level per node
//! per layer 0..=max level: (n + 1) u32 CSR offsets, then u32 neighbor ids
//! ```

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashSet, VecDeque};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::EmbeddingStore;
use crate::types::dot;

use super::{check_query, id_ranks, to_hits, RankedRow, SearchHit, SliceIndex};

pub const INDEX_MAGIC: &[u8; 4] = b"VGI1";
const INDEX_VERSION: u32 = 1;
const MAX_LEVEL: usize = 16;
const NO_ENTRY: u32 = u32::MAX;

/// How a node's neighbor list is chosen from its candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NeighborSelection {
    /// The `M` most similar candidates.
    Simple,
    /// Skip a candidate that is more similar to an already chosen neighbor
    /// than to the base node.
    #[default]
    Diverse,
}

impl std::str::FromStr for NeighborSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "simple" => Ok(NeighborSelection::Simple),
            "diverse" => Ok(NeighborSelection::Diverse),
            other => Err(Error::Config(format!("unknown neighbor selection '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HnswParams {
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub seed: u64,
    #[serde(default)]
    pub selection: NeighborSelection,
}

impl Default for HnswParams {
    fn default() -> Self {
        Self {
            m: 16,
            ef_construction: 200,
            ef_search: 128,
            seed: 0x5eed,
            selection: NeighborSelection::Diverse,
        }
    }
}

impl HnswParams {
    pub fn m0(&self) -> usize {
        2 * self.m
    }

    pub fn level_multiplier(&self) -> f64 {
        1.0 / (self.m as f64).ln()
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::InvalidParams(format!("M must be >= 2, got {}", self.m)));
        }
        if self.ef_construction < self.m {
            return Err(Error::InvalidParams(format!(
                "ef_construction ({}) must be >= M ({})",
                self.ef_construction, self.m
            )));
        }
        if self.ef_search == 0 {
            return Err(Error::InvalidParams("ef_search must be positive".into()));
        }
        Ok(())
    }
}

/// Candidate with a total order: higher similarity wins, lower id on ties.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Cand {
    sim: f32,
    id: u32,
}

impl Eq for Cand {}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sim.total_cmp(&other.sim).then(other.id.cmp(&self.id))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// The graph alone, independent of the vectors it was built over.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HnswGraph {
    params: HnswParams,
    levels: Vec<u8>,
    /// `layers[l][node]`; empty for nodes whose level is below `l`.
    layers: Vec<Vec<Vec<u32>>>,
    entry: Option<u32>,
    store_checksum: u64,
}

struct Builder<'a> {
    store: &'a EmbeddingStore,
    params: HnswParams,
    levels: Vec<u8>,
    layers: Vec<Vec<Vec<u32>>>,
    entry: Option<u32>,
}

impl Builder<'_> {
    fn sim(&self, a: u32, q: &[f32]) -> f32 {
        dot(self.store.row(a as usize), q) as f32
    }

    fn max_level(&self) -> usize {
        self.entry.map_or(0, |e| usize::from(self.levels[e as usize]))
    }

    fn insert(&mut self, node: u32, level: usize) {
        let n = self.store.row_count();
        while self.layers.len() <= level {
            self.layers.push(vec![Vec::new(); n]);
        }
        let Some(entry) = self.entry else {
            self.entry = Some(node);
            return;
        };
        let q = self.store.row(node as usize);
        let top = self.max_level();
        let mut ep = Cand {
            sim: self.sim(entry, q),
            id: entry,
        };
        for l in (level + 1..=top).rev() {
            ep = greedy(self.store, &self.layers[l], q, ep);
        }
        let mut eps = vec![ep];
        for l in (0..=level.min(top)).rev() {
            let found = search_layer(self.store, &self.layers[l], q, &eps, self.params.ef_construction, None);
            let cap = if l == 0 { self.params.m0() } else { self.params.m };
            let chosen = self.select(&found, self.params.m);
            self.layers[l][node as usize] = chosen.clone();
            for nb in chosen {
                self.link(l, nb, node, cap);
            }
            eps = found;
        }
        if level > top {
            self.entry = Some(node);
        }
    }

    /// Up to `m` ids from `cands` (sorted best first) for base vector `q`.
    fn select(&self, cands: &[Cand], m: usize) -> Vec<u32> {
        match self.params.selection {
            NeighborSelection::Simple => cands.iter().take(m).map(|c| c.id).collect(),
            NeighborSelection::Diverse => {
                let mut out: Vec<u32> = Vec::with_capacity(m);
                for c in cands {
                    if out.len() == m {
                        break;
                    }
                    let row = self.store.row(c.id as usize);
                    if out.iter().all(|&r| self.sim(r, row) < c.sim) {
                        out.push(c.id);
                    }
                }
                out
            }
        }
    }

    /// Adds `to` to `from`'s list, re-selecting when it exceeds `cap`.
    fn link(&mut self, layer: usize, from: u32, to: u32, cap: usize) {
        let list = &self.layers[layer][from as usize];
        if list.contains(&to) {
            return;
        }
        if list.len() < cap {
            self.layers[layer][from as usize].push(to);
            return;
        }
        let base = self.store.row(from as usize);
        let mut scored: Vec<Cand> = list
            .iter()
            .chain(std::iter::once(&to))
            .map(|&id| Cand {
                sim: dot(self.store.row(id as usize), base) as f32,
                id,
            })
            .collect();
        scored.sort_by(|a, b| b.cmp(a));
        self.layers[layer][from as usize] = self.select(&scored, cap);
    }

    /// Links every node unreachable from the entry on layer 0 to the most
    /// similar reachable node that still has spare degree.
    fn repair(&mut self) {
        let Some(entry) = self.entry else { return };
        let n = self.store.row_count();
        let cap = self.params.m0();
        loop {
            let reached = reachable(&self.layers[0], entry);
            let Some(orphan) = (0..n).find(|&i| !reached[i]) else {
                return;
            };
            let q = self.store.row(orphan);
            let mut hosts: Vec<Cand> = (0..n)
                .filter(|&i| reached[i])
                .map(|i| Cand {
                    sim: dot(self.store.row(i), q) as f32,
                    id: i as u32,
                })
                .collect();
            hosts.sort_by(|a, b| b.cmp(a));
            let host = hosts
                .iter()
                .find(|c| self.layers[0][c.id as usize].len() < cap)
                .unwrap_or(&hosts[0])
                .id;
            let list = &mut self.layers[0][host as usize];
            if list.len() >= cap {
                // every reachable node is saturated: drop the host's least
                // similar edge in favour of the orphan
                let base = self.store.row(host as usize);
                let (worst, _) = list
                    .iter()
                    .enumerate()
                    .map(|(k, &id)| (k, dot(self.store.row(id as usize), base)))
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .unwrap();
                list.remove(worst);
            }
            list.push(orphan as u32);
        }
    }
}

fn reachable(layer: &[Vec<u32>], entry: u32) -> Vec<bool> {
    let mut seen = vec![false; layer.len()];
    let mut queue = VecDeque::from([entry]);
    seen[entry as usize] = true;
    while let Some(u) = queue.pop_front() {
        for &v in &layer[u as usize] {
            if !seen[v as usize] {
                seen[v as usize] = true;
                queue.push_back(v);
            }
        }
    }
    seen
}

fn greedy(store: &EmbeddingStore, layer: &[Vec<u32>], q: &[f32], mut cur: Cand) -> Cand {
    loop {
        let mut improved = false;
        for &nb in &layer[cur.id as usize] {
            let c = Cand {
                sim: dot(store.row(nb as usize), q) as f32,
                id: nb,
            };
            if c > cur {
                cur = c;
                improved = true;
            }
        }
        if !improved {
            return cur;
        }
    }
}

/// Beam search of width `ef` on one layer. Returns candidates best first.
/// Rows of `exclude` (a row range) are traversed but never returned.
fn search_layer(
    store: &EmbeddingStore,
    layer: &[Vec<u32>],
    q: &[f32],
    entry: &[Cand],
    ef: usize,
    exclude: Option<std::ops::Range<usize>>,
) -> Vec<Cand> {
    let keep = |c: &Cand| exclude.as_ref().is_none_or(|r| !r.contains(&(c.id as usize)));
    let mut visited: HashSet<u32> = HashSet::with_capacity(ef * 8);
    let mut frontier: BinaryHeap<Cand> = BinaryHeap::new();
    let mut best: BinaryHeap<Reverse<Cand>> = BinaryHeap::new();
    for &c in entry {
        if visited.insert(c.id) {
            frontier.push(c);
            if keep(&c) {
                best.push(Reverse(c));
            }
        }
    }
    while best.len() > ef {
        best.pop();
    }
    while let Some(c) = frontier.pop() {
        if best.len() >= ef && c < best.peek().unwrap().0 {
            break;
        }
        for &nb in &layer[c.id as usize] {
            if !visited.insert(nb) {
                continue;
            }
            let cand = Cand {
                sim: dot(store.row(nb as usize), q) as f32,
                id: nb,
            };
            if best.len() < ef || cand > best.peek().unwrap().0 {
                frontier.push(cand);
                if keep(&cand) {
                    best.push(Reverse(cand));
                    if best.len() > ef {
                        best.pop();
                    }
                }
            }
        }
    }
    let mut out: Vec<Cand> = best.into_iter().map(|r| r.0).collect();
    out.sort_by(|a, b| b.cmp(a));
    out
}

impl HnswGraph {
    pub fn build(store: &EmbeddingStore, params: HnswParams) -> Result<Self> {
        params.validate()?;
        let n = store.row_count();
        if n > u32::MAX as usize - 1 {
            return Err(Error::InvalidParams("too many rows for u32 node ids".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let ml = params.level_multiplier();
        let levels: Vec<u8> = (0..n)
            .map(|_| {
                let u = 1.0 - rng.random::<f64>();
                ((-u.ln() * ml).floor() as usize).min(MAX_LEVEL) as u8
            })
            .collect();
        let mut b = Builder {
            store,
            params,
            levels: levels.clone(),
            layers: vec![vec![Vec::new(); n]],
            entry: None,
        };
        for (i, &lv) in levels.iter().enumerate() {
            b.insert(i as u32, usize::from(lv));
        }
        b.repair();
        Ok(Self {
            params,
            levels,
            layers: b.layers,
            entry: b.entry,
            store_checksum: store.checksum(),
        })
    }

    pub fn params(&self) -> &HnswParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn entry_point(&self) -> Option<u32> {
        self.entry
    }

    pub fn level(&self, node: u32) -> usize {
        usize::from(self.levels[node as usize])
    }

    pub fn max_level(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn neighbors(&self, layer: usize, node: u32) -> &[u32] {
        self.layers
            .get(layer)
            .map_or(&[][..], |l| l[node as usize].as_slice())
    }

    /// Whether every node can be reached from the entry point on layer 0.
    pub fn is_connected(&self) -> bool {
        match self.entry {
            None => true,
            Some(e) => reachable(&self.layers[0], e).into_iter().all(|x| x),
        }
    }

    pub fn store_checksum(&self) -> u64 {
        self.store_checksum
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.len();
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        for v in [
            INDEX_VERSION,
            self.params.m as u32,
            self.params.m0() as u32,
            self.params.ef_construction as u32,
            self.params.ef_search as u32,
            self.params.selection as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.params.seed.to_le_bytes());
        out.extend_from_slice(&self.store_checksum.to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&self.entry.unwrap_or(NO_ENTRY).to_le_bytes());
        out.extend_from_slice(&(self.max_level() as u32).to_le_bytes());
        out.extend_from_slice(&self.levels);
        for layer in &self.layers {
            let mut off = 0u32;
            out.extend_from_slice(&off.to_le_bytes());
            for adj in layer {
                off += adj.len() as u32;
                out.extend_from_slice(&off.to_le_bytes());
            }
            for adj in layer {
                for &nb in adj {
                    out.extend_from_slice(&nb.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != INDEX_MAGIC {
            return Err(Error::BadMagic { expected: "VGI1" });
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32()?;
        if version != INDEX_VERSION {
            return Err(Error::VersionUnsupported(version));
        }
        let m = r.u32()? as usize;
        let m0 = r.u32()? as usize;
        let ef_construction = r.u32()? as usize;
        let ef_search = r.u32()? as usize;
        let selection = match r.u32()? {
            0 => NeighborSelection::Simple,
            1 => NeighborSelection::Diverse,
            x => return Err(Error::Manifest(format!("unknown neighbor selection {x}"))),
        };
        let seed = r.u64()?;
        let params = HnswParams {
            m,
            ef_construction,
            ef_search,
            seed,
            selection,
        };
        params.validate()?;
        if m0 != params.m0() {
            return Err(Error::InvalidParams(format!("M0 {m0} != 2*M")));
        }
        let store_checksum = r.u64()?;
        let n = r.u64()? as usize;
        let entry = match r.u32()? {
            NO_ENTRY => None,
            e if (e as usize) < n => Some(e),
            e => return Err(Error::Manifest(format!("entry point {e} out of range"))),
        };
        let max_level = r.u32()? as usize;
        if max_level > MAX_LEVEL {
            return Err(Error::Manifest(format!("max level {max_level} too large")));
        }
        let levels = r.take(n)?.to_vec();
        let mut layers = Vec::with_capacity(max_level + 1);
        for _ in 0..=max_level {
            let offsets: Vec<u32> = (0..=n).map(|_| r.u32()).collect::<Result<_>>()?;
            let mut layer = Vec::with_capacity(n);
            for w in offsets.windows(2) {
                if w[1] < w[0] {
                    return Err(Error::Manifest("non-monotone CSR offsets".into()));
                }
                let adj: Vec<u32> = (w[0]..w[1]).map(|_| r.u32()).collect::<Result<_>>()?;
                if adj.iter().any(|&x| x as usize >= n) {
                    return Err(Error::Manifest("neighbor id out of range".into()));
                }
                layer.push(adj);
            }
            layers.push(layer);
        }
        if r.pos != bytes.len() {
            return Err(Error::Manifest("trailing bytes after index".into()));
        }
        Ok(Self {
            params,
            levels,
            layers,
            entry,
            store_checksum,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .pos
            .checked_add(n)
            .and_then(|end| self.bytes.get(self.pos..end))
            .ok_or_else(|| Error::Manifest("index file truncated".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// An [`HnswGraph`] bound to the store it was built over.
#[derive(Debug, Clone)]
pub struct HnswIndex<'a> {
    store: &'a EmbeddingStore,
    graph: HnswGraph,
    ef_search: usize,
    id_rank: Vec<u32>,
}

impl<'a> HnswIndex<'a> {
    pub fn build(store: &'a EmbeddingStore, params: HnswParams) -> Result<Self> {
        let graph = HnswGraph::build(store, params)?;
        Self::from_graph(store, graph)
    }

    /// Binds a loaded graph; fails unless it was built over this store.
    pub fn from_graph(store: &'a EmbeddingStore, graph: HnswGraph) -> Result<Self> {
        if graph.store_checksum != store.checksum() || graph.len() != store.row_count() {
            return Err(Error::IndexStoreMismatch {
                store: store.checksum(),
                index: graph.store_checksum,
            });
        }
        Ok(Self {
            store,
            ef_search: graph.params.ef_search,
            graph,
            id_rank: id_ranks(store),
        })
    }

    pub fn graph(&self) -> &HnswGraph {
        &self.graph
    }

    pub fn ef_search(&self) -> usize {
        self.ef_search
    }

    pub fn set_ef_search(&mut self, ef: usize) {
        self.ef_search = ef.max(1);
    }

    /// Greedy descent from the entry point, then a beam of width
    /// `max(ef_search, k)` on layer 0.
    pub fn search_with_ef(
        &self,
        query: &[f32],
        k: usize,
        ef_search: usize,
        exclude: Option<usize>,
    ) -> Result<Vec<SearchHit>> {
        check_query(self.store, query)?;
        let k = k.max(1);
        let entry = self.graph.entry.ok_or(Error::EmptyIndex)?;
        let mut ep = Cand {
            sim: dot(self.store.row(entry as usize), query) as f32,
            id: entry,
        };
        for l in (1..=self.graph.max_level()).rev() {
            ep = greedy(self.store, &self.graph.layers[l], query, ep);
        }
        let excluded_rows = exclude.map(|v| self.store.volumes()[v].rows());
        let available = self.store.row_count() - excluded_rows.as_ref().map_or(0, |r| r.len());
        let mut ef = ef_search.max(k);
        let found = loop {
            let found = search_layer(self.store, &self.graph.layers[0], query, &[ep], ef, excluded_rows.clone());
            if found.len() >= k.min(available) || ef >= self.store.row_count() {
                break found;
            }
            ef = (ef * 2).min(self.store.row_count());
        };
        let mut rows: Vec<RankedRow> = found
            .iter()
            .map(|c| {
                let (_, s) = self.store.locate(c.id as usize);
                let vi = self.store.volume_of_row(c.id as usize);
                RankedRow {
                    score: c.sim,
                    id_rank: self.id_rank[vi],
                    slice: s as u32,
                    row: c.id,
                }
            })
            .collect();
        rows.sort_by(RankedRow::better_first);
        rows.truncate(k);
        Ok(to_hits(self.store, &rows))
    }
}

impl SliceIndex for HnswIndex<'_> {
    fn store(&self) -> &EmbeddingStore {
        self.store
    }

    fn search_filtered(&self, query: &[f32], k: usize, exclude: Option<usize>) -> Result<Vec<SearchHit>> {
        self.search_with_ef(query, k, self.ef_search, exclude)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::FlatIndex;
    use crate::store::StoreBuilder;
    use crate::types::{normalize, Split};

    fn random_store(n: usize, dim: usize, seed: u64) -> EmbeddingStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = StoreBuilder::new(dim);
        let per = 50;
        for v in 0..n.div_ceil(per) {
            let rows: Vec<Vec<f32>> = (0..per.min(n - v * per))
                .map(|_| (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect())
                .collect();
            b.push_volume(&format!("v{v:04}"), Split::Database, rows).unwrap();
        }
        b.build().unwrap()
    }

    #[test]
    fn single_row_graph() {
        let store = random_store(1, 8, 1);
        let idx = HnswIndex::build(&store, HnswParams::default()).unwrap();
        assert_eq!(idx.graph().entry_point(), Some(0));
        let hits = idx.search(store.row(0), 5).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].row, 0);
    }

    #[test]
    fn two_rows_k1_returns_better() {
        let mut b = StoreBuilder::new(2);
        b.push_volume("x", Split::Database, [[1.0, 0.0], [0.6, 0.8]]).unwrap();
        let store = b.build().unwrap();
        let idx = HnswIndex::build(&store, HnswParams::default()).unwrap();
        let q = normalize(&[0.5, 1.0]).unwrap();
        let hits = idx.search(&q, 1).unwrap();
        assert_eq!(hits[0].slice_index, 1);
    }

    #[test]
    fn invalid_params() {
        let store = random_store(10, 4, 1);
        for p in [
            HnswParams { m: 1, ..Default::default() },
            HnswParams { m: 16, ef_construction: 8, ..Default::default() },
        ] {
            assert!(matches!(HnswIndex::build(&store, p), Err(Error::InvalidParams(_))));
        }
    }

    #[test]
    fn deterministic_build_and_structure() {
        let store = random_store(600, 16, 7);
        let p = HnswParams::default();
        let a = HnswGraph::build(&store, p).unwrap();
        let b = HnswGraph::build(&store, p).unwrap();
        assert_eq!(a, b);
        assert!(a.is_connected());
        let entry = a.entry_point().unwrap();
        assert_eq!(a.level(entry), a.max_level());
        for node in 0..a.len() as u32 {
            assert!(a.neighbors(0, node).len() <= p.m0());
            for l in 1..=a.max_level() {
                assert!(a.neighbors(l, node).len() <= p.m);
                if l > a.level(node) {
                    assert!(a.neighbors(l, node).is_empty());
                }
            }
        }
    }

    #[test]
    fn self_match_ranks_first() {
        let store = random_store(500, 16, 11);
        let idx = HnswIndex::build(&store, HnswParams::default()).unwrap();
        for r in (0..500).step_by(37) {
            let hits = idx.search_with_ef(store.row(r), 1, 64, None).unwrap();
            assert_eq!(hits[0].row, r);
        }
    }

    #[test]
    fn recall_against_flat_oracle() {
        let store = random_store(1000, 32, 3);
        let flat = FlatIndex::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let queries: Vec<Vec<f32>> = (0..100)
            .map(|_| normalize(&(0..32).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>()).unwrap())
            .collect();
        let exact: Vec<_> = queries.iter().map(|q| flat.search(q, 1).unwrap()).collect();
        for selection in [NeighborSelection::Simple, NeighborSelection::Diverse] {
            let params = HnswParams { m: 16, ef_construction: 200, selection, ..Default::default() };
            let idx = HnswIndex::build(&store, params).unwrap();
            let approx: Vec<_> = queries.iter().map(|q| idx.search(q, 1).unwrap()).collect();
            let recall = crate::index::recall_at_k(&exact, &approx);
            assert!(recall >= 0.95, "{selection:?} recall@1 = {recall}");
            for hits in &approx {
                assert!(hits.iter().all(|h| (-1.0 - 1e-6..=1.0 + 1e-6).contains(&h.score)));
            }
        }
    }

    #[test]
    fn diverse_lists_skip_redundant_neighbors() {
        let store = random_store(400, 8, 21);
        let params = HnswParams { m: 4, ef_construction: 32, selection: NeighborSelection::Diverse, ..Default::default() };
        let g = HnswGraph::build(&store, params).unwrap();
        let mut shorter = 0;
        for node in 0..400u32 {
            let nb = g.neighbors(0, node);
            assert!(nb.len() <= 8);
            if nb.len() < 8 {
                shorter += 1;
            }
        }
        assert!(shorter > 0);
        assert!(g.is_connected());
        let back = HnswGraph::from_bytes(&g.to_bytes()).unwrap();
        assert_eq!(back.params().selection, NeighborSelection::Diverse);
        assert_eq!(back, g);
    }

    #[test]
    fn recall_grows_with_ef() {
        let store = random_store(1500, 48, 5);
        let idx = HnswIndex::build(&store, HnswParams { m: 4, ef_construction: 8, ..Default::default() }).unwrap();
        let flat = FlatIndex::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let queries: Vec<Vec<f32>> = (0..150)
            .map(|_| normalize(&(0..48).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>()).unwrap())
            .collect();
        let exact: Vec<_> = queries.iter().map(|q| flat.search(q, 10).unwrap()).collect();
        let recall = |ef| {
            let approx: Vec<_> = queries
                .iter()
                .map(|q| idx.search_with_ef(q, 10, ef, None).unwrap())
                .collect();
            crate::index::recall_at_k(&exact, &approx)
        };
        let (lo, mid, hi) = (recall(10), recall(40), recall(200));
        assert!(lo <= mid && mid <= hi, "{lo} {mid} {hi}");
        assert!((0.0..=1.0).contains(&lo) && hi <= 1.0);
    }

    #[test]
    fn persistence_round_trip() {
        let store = random_store(300, 8, 9);
        let idx = HnswIndex::build(&store, HnswParams::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.vgi");
        idx.graph().save(&path).unwrap();
        let loaded = HnswIndex::from_graph(&store, HnswGraph::load(&path).unwrap()).unwrap();
        assert_eq!(loaded.graph(), idx.graph());
        for r in (0..300).step_by(13) {
            assert_eq!(idx.search(store.row(r), 5).unwrap(), loaded.search(store.row(r), 5).unwrap());
        }
        let other = random_store(300, 8, 10);
        assert!(matches!(
            HnswIndex::from_graph(&other, loaded.graph().clone()),
            Err(Error::IndexStoreMismatch { .. })
        ));
    }

    #[test]
    fn exclusion_never_returns_volume() {
        let store = random_store(200, 8, 12);
        let idx = HnswIndex::build(&store, HnswParams::default()).unwrap();
        let q = store.row(60).to_vec();
        let hits = idx.search_filtered(&q, 3, Some(1)).unwrap();
        assert_eq!(hits.len(), 3);
        assert!(hits.iter().all(|h| h.volume_id != "v0001"));
    }
}
