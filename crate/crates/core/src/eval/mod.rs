//! Per-class recall and localization ratios.
//!
//! Four protocols are supported: slice-wise (every query slice is its own
//! search), volume-based (whole query volume, compare label unions),
//! region-based (query sub-volume for one region, TP if the retrieved volume
//! contains the region anywhere) and localized (TP only if a hit or top-L
//! slice of the retrieved volume shows the region).

mod runner;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

pub use runner::{run_protocol, EvalConfig, EvalContext, EvalRun, RegionEvent};

use crate::error::{Error, Result};
use crate::labels::{LabelMap, SliceLabelTable};
use crate::rerank::RerankResult;
use crate::retrieval::RetrievedVolume;
use crate::types::{Granularity, LabelId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Slice,
    #[default]
    Volume,
    Region,
    Localized,
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "slice" | "slicewise" => Ok(Protocol::Slice),
            "volume" => Ok(Protocol::Volume),
            "region" => Ok(Protocol::Region),
            "localized" => Ok(Protocol::Localized),
            other => Err(Error::Config(format!("unknown protocol '{other}'"))),
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Protocol::Slice => "slice",
            Protocol::Volume => "volume",
            Protocol::Region => "region",
            Protocol::Localized => "localized",
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: u64,
    pub fn_: u64,
}

impl Counts {
    pub fn events(&self) -> u64 {
        self.tp + self.fn_
    }

    /// `tp / (tp + fn)`, undefined without events.
    pub fn recall(&self) -> Option<f64> {
        (self.events() > 0).then(|| self.tp as f64 / self.events() as f64)
    }
}

/// True/false-negative tallies per label.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClassCounts {
    counts: BTreeMap<LabelId, Counts>,
}

impl ClassCounts {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, label: LabelId, hit: bool) {
        let c = self.counts.entry(label).or_default();
        if hit {
            c.tp += 1;
        } else {
            c.fn_ += 1;
        }
    }

    pub fn merge(&mut self, other: &ClassCounts) {
        for (l, c) in &other.counts {
            let e = self.counts.entry(*l).or_default();
            e.tp += c.tp;
            e.fn_ += c.fn_;
        }
    }

    pub fn get(&self, label: LabelId) -> Counts {
        self.counts.get(&label).copied().unwrap_or_default()
    }

    pub fn recall(&self, label: LabelId) -> Option<f64> {
        self.get(label).recall()
    }

    pub fn labels(&self) -> impl Iterator<Item = LabelId> + '_ {
        self.counts.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (LabelId, Counts)> + '_ {
        self.counts.iter().map(|(l, c)| (*l, *c))
    }

    /// Total number of `(query, label)` evaluation events.
    pub fn total_events(&self) -> u64 {
        self.counts.values().map(Counts::events).sum()
    }
}

/// Slice-wise tally: each query label is a TP if the matched slice shows it.
/// Label sets must already be at the evaluation granularity.
pub fn slicewise_recall<'a, I>(matches: I) -> ClassCounts
where
    I: IntoIterator<Item = (&'a BTreeSet<LabelId>, &'a BTreeSet<LabelId>)>,
{
    let mut out = ClassCounts::new();
    for (query, found) in matches {
        for l in query {
            out.record(*l, found.contains(l));
        }
    }
    out
}

/// Volume-based tally: labels are aggregated over all slices of each volume;
/// every query label counts once.
pub fn volume_recall(
    query_volume: &str,
    retrieved_volume: &str,
    labels: &SliceLabelTable,
    map: &LabelMap,
    granularity: Granularity,
) -> Result<ClassCounts> {
    let query = labels.volume_union_at(map, query_volume, granularity)?;
    let found = labels.volume_union_at(map, retrieved_volume, granularity)?;
    let mut out = ClassCounts::new();
    for l in query {
        out.record(l, found.contains(&l));
    }
    Ok(out)
}

/// Region-based criterion: the retrieved volume contains `region` somewhere.
pub fn region_recall(
    region: LabelId,
    retrieved_volume: &str,
    labels: &SliceLabelTable,
    map: &LabelMap,
    granularity: Granularity,
) -> Result<bool> {
    Ok(labels
        .volume_union_at(map, retrieved_volume, granularity)?
        .contains(&region))
}

/// Slices of the retrieved volume that serve as its localization.
pub trait LocalizedSlices {
    fn volume_id(&self) -> &str;
    fn localized_slices(&self) -> Vec<usize>;
}

impl LocalizedSlices for RetrievedVolume {
    fn volume_id(&self) -> &str {
        &self.volume_id
    }

    fn localized_slices(&self) -> Vec<usize> {
        self.hit_slice_indices.clone()
    }
}

impl LocalizedSlices for RerankResult {
    fn volume_id(&self) -> &str {
        &self.winner
    }

    fn localized_slices(&self) -> Vec<usize> {
        self.winner_slices().collect()
    }
}

fn slice_has(
    labels: &SliceLabelTable,
    map: &LabelMap,
    volume: &str,
    slice: usize,
    region: LabelId,
    granularity: Granularity,
) -> Result<bool> {
    Ok(labels.slice_at(map, volume, slice, granularity)?.contains(&region))
}

/// Localized criterion: at least one hit (or top-L) slice shows `region`,
/// regardless of whether it appears elsewhere in the volume.
pub fn localized_recall(
    region: LabelId,
    retrieved: &impl LocalizedSlices,
    labels: &SliceLabelTable,
    map: &LabelMap,
    granularity: Granularity,
) -> Result<bool> {
    for s in retrieved.localized_slices() {
        if slice_has(labels, map, retrieved.volume_id(), s, region, granularity)? {
            return Ok(true);
        }
    }
    Ok(false)
}

fn count_containing(
    volume: &str,
    slices: impl IntoIterator<Item = usize>,
    region: LabelId,
    labels: &SliceLabelTable,
    map: &LabelMap,
    granularity: Granularity,
) -> Result<usize> {
    let mut n = 0;
    for s in slices {
        if slice_has(labels, map, volume, s, region, granularity)? {
            n += 1;
        }
    }
    Ok(n)
}

/// Hit slices of the retrieved volume that show `region`, over all hit slices.
pub fn localization_ratio_count(
    retrieved: &RetrievedVolume,
    region: LabelId,
    labels: &SliceLabelTable,
    map: &LabelMap,
    granularity: Granularity,
) -> Result<f64> {
    if retrieved.hit_slice_indices.is_empty() {
        return Err(Error::EmptyHitTable);
    }
    let n = count_containing(
        &retrieved.volume_id,
        retrieved.hit_slice_indices.iter().copied(),
        region,
        labels,
        map,
        granularity,
    )?;
    Ok(n as f64 / retrieved.hit_slice_indices.len() as f64)
}

/// Top-L slices of the re-ranked winner that show `region`, over `L`. When
/// the winner has fewer than `L` slices the clamped list length is used.
pub fn localization_ratio_rerank(
    result: &RerankResult,
    region: LabelId,
    labels: &SliceLabelTable,
    map: &LabelMap,
    granularity: Granularity,
    top_l: usize,
) -> Result<f64> {
    let denom = top_l.min(result.top_l_slices.len());
    if denom == 0 {
        return Err(Error::EmptyMatrix);
    }
    let n = count_containing(
        &result.winner,
        result.winner_slices().take(denom),
        region,
        labels,
        map,
        granularity,
    )?;
    Ok(n as f64 / denom as f64)
}

/// Mean and population standard deviation over the classes that had events.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub average: f64,
    pub std: f64,
    pub n_classes: usize,
}

pub fn summarize(values: impl IntoIterator<Item = f64>) -> Option<Summary> {
    let v: Vec<f64> = values.into_iter().collect();
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Some(Summary {
        average: mean,
        std: var.sqrt(),
        n_classes: v.len(),
    })
}

/// Running mean of localization ratios per class.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RatioTable {
    sums: BTreeMap<LabelId, (f64, u64)>,
}

impl RatioTable {
    pub fn record(&mut self, label: LabelId, ratio: f64) {
        let e = self.sums.entry(label).or_default();
        e.0 += ratio;
        e.1 += 1;
    }

    pub fn mean(&self, label: LabelId) -> Option<f64> {
        self.sums.get(&label).map(|&(s, n)| s / n as f64)
    }

    pub fn is_empty(&self) -> bool {
        self.sums.is_empty()
    }
}

/// Per-class results of one protocol run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub granularity: Granularity,
    pub reranked: bool,
    pub run_name: String,
    pub counts: ClassCounts,
    /// Present for the localized protocol only.
    pub localization: Option<RatioTable>,
}

impl EvalReport {
    pub fn recall_summary(&self) -> Option<Summary> {
        summarize(self.counts.iter().filter_map(|(_, c)| c.recall()))
    }

    pub fn ratio_summary(&self) -> Option<Summary> {
        let lr = self.localization.as_ref()?;
        summarize(self.counts.labels().filter_map(|l| lr.mean(l)))
    }

    /// Classes of the granularity that never occurred in a query.
    pub fn absent_classes(&self, map: &LabelMap) -> Vec<LabelId> {
        (0..map.n_classes(self.granularity) as u16)
            .map(LabelId)
            .filter(|l| self.counts.get(*l).events() == 0)
            .collect()
    }

    /// One row per class (`n/a` where the class had no events), then
    /// `average` and `std` rows over the classes with events.
    pub fn write_csv(&self, map: &LabelMap, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let with_lr = self.localization.is_some();
        let recall_col = format!("recall_{}", self.run_name);
        let mut header = vec!["class", "tp", "fn", recall_col.as_str()];
        let lr_col = format!("lr_{}", self.run_name);
        if with_lr {
            header.push(&lr_col);
        }
        w.write_record(&header)?;
        for label in (0..map.n_classes(self.granularity) as u16).map(LabelId) {
            let c = self.counts.get(label);
            let name = map.name(label, self.granularity).unwrap_or("?");
            let mut row = vec![
                name.to_string(),
                c.tp.to_string(),
                c.fn_.to_string(),
                fmt_opt(c.recall()),
            ];
            if let Some(lr) = &self.localization {
                row.push(fmt_opt(lr.mean(label)));
            }
            w.write_record(&row)?;
        }
        let rs = self.recall_summary();
        let ls = self.ratio_summary();
        for (name, pick) in [("average", 0), ("std", 1)] {
            let val = |s: &Option<Summary>| fmt_opt(s.as_ref().map(|s| if pick == 0 { s.average } else { s.std }));
            let mut row = vec![name.to_string(), String::new(), String::new(), val(&rs)];
            if with_lr {
                row.push(val(&ls));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Aligned plain-text version of [`Self::write_csv`].
    pub fn to_text(&self, map: &LabelMap) -> String {
        let width = (0..map.n_classes(self.granularity) as u16)
            .filter_map(|l| map.name(LabelId(l), self.granularity))
            .map(str::len)
            .max()
            .unwrap_or(5)
            .max(7);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "protocol={} granularity={} rerank={}",
            self.protocol, self.granularity, self.reranked
        );
        let _ = write!(s, "{:<width$} {:>6} {:>6} {:>8}", "class", "tp", "fn", "recall");
        if self.localization.is_some() {
            let _ = write!(s, " {:>8}", "lr");
        }
        s.push('\n');
        for label in (0..map.n_classes(self.granularity) as u16).map(LabelId) {
            let c = self.counts.get(label);
            let name = map.name(label, self.granularity).unwrap_or("?");
            let _ = write!(s, "{name:<width$} {:>6} {:>6} {:>8}", c.tp, c.fn_, fmt_short(c.recall()));
            if let Some(lr) = &self.localization {
                let _ = write!(s, " {:>8}", fmt_short(lr.mean(label)));
            }
            s.push('\n');
        }
        let rs = self.recall_summary();
        let ls = self.ratio_summary();
        for (name, pick) in [("average", 0), ("std", 1)] {
            let val = |x: &Option<Summary>| fmt_short(x.as_ref().map(|x| if pick == 0 { x.average } else { x.std }));
            let _ = write!(s, "{name:<width$} {:>6} {:>6} {:>8}", "", "", val(&rs));
            if self.localization.is_some() {
                let _ = write!(s, " {:>8}", val(&ls));
            }
            s.push('\n');
        }
        s
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"))
}

fn fmt_short(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(ids: &[u16]) -> BTreeSet<LabelId> {
        ids.iter().map(|&i| LabelId(i)).collect()
    }

    const LIVER: u16 = 4;
    const RIB: u16 = 57;

    #[test]
    fn slicewise_basic() {
        let q = set(&[LIVER]);
        let c = slicewise_recall([(&q, &set(&[LIVER, RIB]))]);
        assert_eq!(c.get(LabelId(LIVER)), Counts { tp: 1, fn_: 0 });
        let c = slicewise_recall([(&q, &set(&[RIB]))]);
        assert_eq!(c.get(LabelId(LIVER)), Counts { tp: 0, fn_: 1 });
        assert_eq!(c.get(LabelId(RIB)).events(), 0);
    }

    #[test]
    fn slicewise_matches_independent_tally() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pairs: Vec<(BTreeSet<LabelId>, BTreeSet<LabelId>)> = (0..10)
            .map(|_| {
                let mk = |rng: &mut ChaCha8Rng| (0..6u16).filter(|_| rng.random_bool(0.4)).map(LabelId).collect();
                (mk(&mut rng), mk(&mut rng))
            })
            .collect();
        let got = slicewise_recall(pairs.iter().map(|(a, b)| (a, b)));
        let mut tp = [0u64; 6];
        let mut fn_ = [0u64; 6];
        for (q, f) in &pairs {
            for l in 0..6u16 {
                if q.contains(&LabelId(l)) {
                    if f.contains(&LabelId(l)) {
                        tp[l as usize] += 1;
                    } else {
                        fn_[l as usize] += 1;
                    }
                }
            }
        }
        for l in 0..6u16 {
            assert_eq!(got.get(LabelId(l)), Counts { tp: tp[l as usize], fn_: fn_[l as usize] });
        }
        let events: u64 = pairs.iter().map(|(q, _)| q.len() as u64).sum();
        assert_eq!(got.total_events(), events);
    }

    fn table(vols: &[(&str, &[&[u16]])]) -> SliceLabelTable {
        let mut t = SliceLabelTable::new();
        for (v, slices) in vols {
            for (s, ls) in slices.iter().enumerate() {
                t.insert(v, s, set(ls));
            }
        }
        t
    }

    #[test]
    fn volume_recall_cases() {
        let map = LabelMap::total_segmentator();
        let t = table(&[("q", &[&[1], &[1, 4]]), ("r", &[&[4], &[]]), ("z", &[&[70]])]);
        let c = volume_recall("q", "q", &t, &map, Granularity::Fine).unwrap();
        assert_eq!(c.total_events(), 2);
        assert!(c.iter().all(|(_, c)| c.fn_ == 0));
        let c = volume_recall("q", "z", &t, &map, Granularity::Fine).unwrap();
        assert!(c.iter().all(|(_, c)| c.tp == 0));
        let c = volume_recall("q", "r", &t, &map, Granularity::Fine).unwrap();
        assert_eq!(c.get(LabelId(4)).tp, 1);
        assert_eq!(c.get(LabelId(1)).fn_, 1);
        // kidney right (1) vs kidney left (2) agree once coarsened
        let t = table(&[("q", &[&[1]]), ("r", &[&[2]])]);
        let kidney = map.lookup("kidney", Granularity::Coarse).unwrap();
        let c = volume_recall("q", "r", &t, &map, Granularity::Coarse).unwrap();
        assert_eq!(c.get(kidney).tp, 1);
    }

    fn retrieved(vol: &str, slices: &[usize]) -> RetrievedVolume {
        RetrievedVolume {
            volume_id: vol.into(),
            hit_count: slices.len(),
            score_sum: 0.0,
            hit_slice_indices: slices.to_vec(),
        }
    }

    #[test]
    fn region_versus_localized() {
        let map = LabelMap::total_segmentator();
        let pancreas = map.lookup("pancreas", Granularity::Fine).unwrap();
        // pancreas only on slices 7..9 of the retrieved volume
        let mut slices: Vec<&[u16]> = vec![&[4]; 12];
        let p: &[u16] = &[9];
        for s in slices.iter_mut().take(10).skip(7) {
            *s = p;
        }
        let t = table(&[("v3", &slices)]);
        assert!(region_recall(pancreas, "v3", &t, &map, Granularity::Fine).unwrap());
        let inside = retrieved("v3", &[7, 8]);
        assert!(localized_recall(pancreas, &inside, &t, &map, Granularity::Fine).unwrap());
        let elsewhere = retrieved("v3", &[0, 1, 2, 11]);
        assert!(!localized_recall(pancreas, &elsewhere, &t, &map, Granularity::Fine).unwrap());
        let all = retrieved("v3", &(0..12).collect::<Vec<_>>());
        assert_eq!(
            localized_recall(pancreas, &all, &t, &map, Granularity::Fine).unwrap(),
            region_recall(pancreas, "v3", &t, &map, Granularity::Fine).unwrap()
        );
        let absent = table(&[("v3", &[&[4], &[5]])]);
        assert!(!region_recall(pancreas, "v3", &absent, &map, Granularity::Fine).unwrap());
    }

    #[test]
    fn lr_twelve_of_forty_eight() {
        let map = LabelMap::total_segmentator();
        let mut t = SliceLabelTable::new();
        for s in 0..48 {
            t.insert("v", s, if s < 12 { set(&[9]) } else { set(&[4]) });
        }
        let r = retrieved("v", &(0..48).collect::<Vec<_>>());
        let lr = localization_ratio_count(&r, LabelId(9), &t, &map, Granularity::Fine).unwrap();
        assert_eq!(lr, 0.25);
        let r = retrieved("v", &(0..12).collect::<Vec<_>>());
        assert_eq!(localization_ratio_count(&r, LabelId(9), &t, &map, Granularity::Fine).unwrap(), 1.0);
    }

    #[test]
    fn lr_matches_oracle_count() {
        let map = LabelMap::total_segmentator();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = SliceLabelTable::new();
        let mut has = Vec::new();
        for s in 0..40 {
            let h = rng.random_bool(0.3);
            has.push(h);
            t.insert("v", s, if h { set(&[9, 4]) } else { set(&[4]) });
        }
        let hits: Vec<usize> = (0..40).filter(|_| rng.random_bool(0.5)).collect();
        let expected = hits.iter().filter(|&&s| has[s]).count() as f64 / hits.len() as f64;
        let got = localization_ratio_count(&retrieved("v", &hits), LabelId(9), &t, &map, Granularity::Fine).unwrap();
        assert_eq!(got, expected);
    }

    fn rerank_result(slices: &[usize]) -> RerankResult {
        use crate::rerank::{RankedCandidate, SimilarityMatrix};
        RerankResult {
            query_id: "q".into(),
            ranked: vec![RankedCandidate { volume_id: "v".into(), rs_score: 1.0, hit_count: None }],
            winner: "v".into(),
            top_l_slices: slices.iter().map(|&s| (s, 0.5)).collect(),
            winner_matrix: SimilarityMatrix::from_values(0, 0, vec![]).unwrap(),
        }
    }

    #[test]
    fn rerank_lr_cases() {
        let map = LabelMap::total_segmentator();
        let mut t = SliceLabelTable::new();
        for s in 0..30 {
            t.insert("v", s, if s < 15 { set(&[9]) } else { set(&[]) });
        }
        let all_in = rerank_result(&(0..15).collect::<Vec<_>>());
        assert_eq!(localization_ratio_rerank(&all_in, LabelId(9), &t, &map, Granularity::Fine, 15).unwrap(), 1.0);
        let three: Vec<usize> = (12..27).collect();
        let r = rerank_result(&three);
        assert!((localization_ratio_rerank(&r, LabelId(9), &t, &map, Granularity::Fine, 15).unwrap() - 0.2).abs() < 1e-12);
        assert!(localized_recall(LabelId(9), &r, &t, &map, Granularity::Fine).unwrap());
        // fewer slices than L: denominator is the clamped length
        let short = rerank_result(&[0, 1, 20, 21]);
        assert_eq!(localization_ratio_rerank(&short, LabelId(9), &t, &map, Granularity::Fine, 15).unwrap(), 0.5);
    }

    #[test]
    fn summary_values() {
        let s = summarize([1.0, 0.5]).unwrap();
        assert_eq!((s.average, s.std), (0.75, 0.25));
        let s = summarize([0.3]).unwrap();
        assert_eq!(s.std, 0.0);
        assert!(summarize(std::iter::empty()).is_none());
    }

    #[test]
    fn summary_matches_spreadsheet_tally() {
        let mut c = ClassCounts::new();
        let data = [(0u16, 3u64, 1u64), (1, 0, 2), (2, 5, 0), (5, 1, 1)];
        for &(l, tp, fn_) in &data {
            for _ in 0..tp {
                c.record(LabelId(l), true);
            }
            for _ in 0..fn_ {
                c.record(LabelId(l), false);
            }
        }
        let report = EvalReport {
            protocol: Protocol::Volume,
            granularity: Granularity::Fine,
            reranked: false,
            run_name: "run".into(),
            counts: c,
            localization: None,
        };
        // 0.75, 0.0, 1.0, 0.5 → mean 0.5625, population var 0.13671875
        let s = report.recall_summary().unwrap();
        assert!((s.average - 0.5625).abs() < 1e-12);
        assert!((s.std - 0.13671875f64.sqrt()).abs() < 1e-12);
        let map = LabelMap::total_segmentator();
        assert_eq!(report.absent_classes(&map).len(), 100);

        let mut out = Vec::new();
        report.write_csv(&map, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "class,tp,fn,recall_run");
        assert_eq!(lines[1], "spleen,3,1,0.750000");
        assert_eq!(lines[4], "gallbladder,0,0,n/a");
        assert_eq!(lines.len(), 1 + 104 + 2);
        assert_eq!(lines[105], "average,,,0.562500");
        assert!(report.to_text(&map).contains("n/a"));
    }
}
