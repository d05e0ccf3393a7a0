//! Anatomical label vocabulary and per-slice label presence.
//!
//! The built-in [`LabelMap`] lists the 104 TotalSegmentator (v1) structures in
//! their original class order (fine id = TS class index − 1) together with the
//! 29 aggregated classes used for coarse evaluation. Coarse ids are assigned in
//! order of first appearance when walking fine ids upwards.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Read, Write};

use crate::error::{Error, Result};
use crate::types::{Granularity, LabelId};

/// `(fine name, coarse name)` in TotalSegmentator v1 class order.
const TOTAL_SEGMENTATOR_V1: [(&str, &str); 104] = [
    ("spleen", "spleen"),
    ("kidney right", "kidney"),
    ("kidney left", "kidney"),
    ("gallbladder", "gallbladder"),
    ("liver", "liver"),
    ("stomach", "stomach"),
    ("aorta", "cardiovascular system"),
    ("inferior vena cava", "cardiovascular system"),
    ("portal and splenic vein", "portal & splenic vein"),
    ("pancreas", "pancreas"),
    ("adrenal gland right", "adrenal gland"),
    ("adrenal gland left", "adrenal gland"),
    ("lung upper lobe left", "lung"),
    ("lung lower lobe left", "lung"),
    ("lung upper lobe right", "lung"),
    ("lung middle lobe right", "lung"),
    ("lung lower lobe right", "lung"),
    ("vertebrae L5", "vertebrae"),
    ("vertebrae L4", "vertebrae"),
    ("vertebrae L3", "vertebrae"),
    ("vertebrae L2", "vertebrae"),
    ("vertebrae L1", "vertebrae"),
    ("vertebrae T12", "vertebrae"),
    ("vertebrae T11", "vertebrae"),
    ("vertebrae T10", "vertebrae"),
    ("vertebrae T9", "vertebrae"),
    ("vertebrae T8", "vertebrae"),
    ("vertebrae T7", "vertebrae"),
    ("vertebrae T6", "vertebrae"),
    ("vertebrae T5", "vertebrae"),
    ("vertebrae T4", "vertebrae"),
    ("vertebrae T3", "vertebrae"),
    ("vertebrae T2", "vertebrae"),
    ("vertebrae T1", "vertebrae"),
    ("vertebrae C7", "vertebrae"),
    ("vertebrae C6", "vertebrae"),
    ("vertebrae C5", "vertebrae"),
    ("vertebrae C4", "vertebrae"),
    ("vertebrae C3", "vertebrae"),
    ("vertebrae C2", "vertebrae"),
    ("vertebrae C1", "vertebrae"),
    ("esophagus", "esophagus"),
    ("trachea", "trachea"),
    ("heart myocardium", "cardiovascular system"),
    ("heart atrium left", "cardiovascular system"),
    ("heart ventricle left", "cardiovascular system"),
    ("heart atrium right", "cardiovascular system"),
    ("heart ventricle right", "cardiovascular system"),
    ("pulmonary artery", "cardiovascular system"),
    ("brain", "brain"),
    ("iliac artery left", "cardiovascular system"),
    ("iliac artery right", "cardiovascular system"),
    ("iliac vena left", "cardiovascular system"),
    ("iliac vena right", "cardiovascular system"),
    ("small bowel", "small bowel"),
    ("duodenum", "duodenum"),
    ("colon", "colon"),
    ("rib left 1", "rib"),
    ("rib left 2", "rib"),
    ("rib left 3", "rib"),
    ("rib left 4", "rib"),
    ("rib left 5", "rib"),
    ("rib left 6", "rib"),
    ("rib left 7", "rib"),
    ("rib left 8", "rib"),
    ("rib left 9", "rib"),
    ("rib left 10", "rib"),
    ("rib left 11", "rib"),
    ("rib left 12", "rib"),
    ("rib right 1", "rib"),
    ("rib right 2", "rib"),
    ("rib right 3", "rib"),
    ("rib right 4", "rib"),
    ("rib right 5", "rib"),
    ("rib right 6", "rib"),
    ("rib right 7", "rib"),
    ("rib right 8", "rib"),
    ("rib right 9", "rib"),
    ("rib right 10", "rib"),
    ("rib right 11", "rib"),
    ("rib right 12", "rib"),
    ("humerus left", "humerus"),
    ("humerus right", "humerus"),
    ("scapula left", "scapula"),
    ("scapula right", "scapula"),
    ("clavicula left", "clavicula"),
    ("clavicula right", "clavicula"),
    ("femur left", "femur"),
    ("femur right", "femur"),
    ("hip left", "hip"),
    ("hip right", "hip"),
    ("sacrum", "sacrum"),
    ("face", "face"),
    ("gluteus maximus left", "gluteus muscles"),
    ("gluteus maximus right", "gluteus muscles"),
    ("gluteus medius left", "gluteus muscles"),
    ("gluteus medius right", "gluteus muscles"),
    ("gluteus minimus left", "gluteus muscles"),
    ("gluteus minimus right", "gluteus muscles"),
    ("autochthon left", "autochthon"),
    ("autochthon right", "autochthon"),
    ("iliopsoas left", "iliopsoas"),
    ("iliopsoas right", "iliopsoas"),
    ("urinary bladder", "urinary bladder"),
];

/// Total map from fine labels to coarse classes, with names both ways.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    fine_names: Vec<String>,
    coarse_of: Vec<LabelId>,
    coarse_names: Vec<String>,
}

/// Lowercase, `_` → space, collapsed whitespace. Lets `adrenal_gland_left`
/// and `Adrenal gland left` name the same class.
fn name_key(name: &str) -> String {
    name.replace('_', " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

impl LabelMap {
    /// The TotalSegmentator v1 mapping onto 29 coarse classes.
    pub fn total_segmentator() -> Self {
        Self::from_pairs(TOTAL_SEGMENTATOR_V1.iter().map(|&(f, c)| (f.to_string(), c.to_string())))
            .expect("built-in table is well formed")
    }

    fn from_pairs(pairs: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut fine_names = Vec::new();
        let mut coarse_of = Vec::new();
        let mut coarse_names: Vec<String> = Vec::new();
        let mut coarse_ids: HashMap<String, LabelId> = HashMap::new();
        for (fine, coarse) in pairs {
            let id = *coarse_ids.entry(name_key(&coarse)).or_insert_with(|| {
                coarse_names.push(coarse.clone());
                LabelId((coarse_names.len() - 1) as u16)
            });
            fine_names.push(fine);
            coarse_of.push(id);
        }
        if fine_names.len() > usize::from(u16::MAX) {
            return Err(Error::Config("label map too large".into()));
        }
        Ok(Self {
            fine_names,
            coarse_of,
            coarse_names,
        })
    }

    /// Parses `fine_id<TAB>fine_name<TAB>coarse_name` rows. Lines starting with
    /// `#` and blank lines are skipped. Fine ids must be exactly `0..n`.
    pub fn from_tsv(reader: impl Read) -> Result<Self> {
        let mut rows: BTreeMap<u16, (String, String)> = BTreeMap::new();
        for (lineno, line) in std::io::BufReader::new(reader).lines().enumerate() {
            let line = line?;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |msg: &str| Error::Parse {
                what: "label map",
                line: lineno + 1,
                msg: msg.to_string(),
            };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(parse_err("expected 3 tab-separated columns"));
            }
            let id: u16 = cols[0].trim().parse().map_err(|_| parse_err("bad fine id"))?;
            if rows
                .insert(id, (cols[1].trim().to_string(), cols[2].trim().to_string()))
                .is_some()
            {
                return Err(parse_err("duplicate fine id"));
            }
        }
        for (expected, &id) in rows.keys().enumerate() {
            if usize::from(id) != expected {
                return Err(Error::Parse {
                    what: "label map",
                    line: 0,
                    msg: format!("fine ids must be contiguous from 0; missing {expected}"),
                });
            }
        }
        Self::from_pairs(rows.into_values())
    }

    pub fn write_tsv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "# fine_id\tfine_name\tcoarse_name")?;
        for (id, name) in self.fine_names.iter().enumerate() {
            let coarse = &self.coarse_names[usize::from(self.coarse_of[id].0)];
            writeln!(w, "{id}\t{name}\t{coarse}")?;
        }
        Ok(())
    }

    pub fn n_fine(&self) -> usize {
        self.fine_names.len()
    }

    pub fn n_coarse(&self) -> usize {
        self.coarse_names.len()
    }

    pub fn n_classes(&self, granularity: Granularity) -> usize {
        match granularity {
            Granularity::Coarse => self.n_coarse(),
            Granularity::Fine => self.n_fine(),
        }
    }

    pub fn coarse_of(&self, fine: LabelId) -> Result<LabelId> {
        self.coarse_of
            .get(usize::from(fine.0))
            .copied()
            .ok_or(Error::UnknownLabel(u32::from(fine.0)))
    }

    pub fn fine_name(&self, fine: LabelId) -> Option<&str> {
        self.fine_names.get(usize::from(fine.0)).map(String::as_str)
    }

    pub fn coarse_name(&self, coarse: LabelId) -> Option<&str> {
        self.coarse_names.get(usize::from(coarse.0)).map(String::as_str)
    }

    pub fn name(&self, label: LabelId, granularity: Granularity) -> Option<&str> {
        match granularity {
            Granularity::Coarse => self.coarse_name(label),
            Granularity::Fine => self.fine_name(label),
        }
    }

    /// Looks a class up by name (case-insensitive, `_` and space equivalent).
    pub fn lookup(&self, name: &str, granularity: Granularity) -> Result<LabelId> {
        let key = name_key(name);
        let names = match granularity {
            Granularity::Coarse => &self.coarse_names,
            Granularity::Fine => &self.fine_names,
        };
        names
            .iter()
            .position(|n| name_key(n) == key)
            .map(|i| LabelId(i as u16))
            .ok_or_else(|| Error::UnknownLabelName(name.to_string()))
    }

    /// Image of a set of fine labels under the map.
    pub fn coarsen(&self, fine: &BTreeSet<LabelId>) -> Result<BTreeSet<LabelId>> {
        fine.iter().map(|&l| self.coarse_of(l)).collect()
    }

    /// Expresses a fine label set at the requested granularity.
    pub fn at(&self, fine: &BTreeSet<LabelId>, granularity: Granularity) -> Result<BTreeSet<LabelId>> {
        match granularity {
            Granularity::Fine => {
                for l in fine {
                    self.coarse_of(*l)?;
                }
                Ok(fine.clone())
            }
            Granularity::Coarse => self.coarsen(fine),
        }
    }
}

/// Which fine labels are present on each `(volume, slice)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SliceLabelTable {
    volumes: BTreeMap<String, Vec<BTreeSet<LabelId>>>,
}

static EMPTY: BTreeSet<LabelId> = BTreeSet::new();

impl SliceLabelTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records the label set of one slice, growing the volume as needed.
    pub fn insert(&mut self, volume_id: &str, slice_index: usize, labels: BTreeSet<LabelId>) {
        let slices = self.volumes.entry(volume_id.to_string()).or_default();
        if slices.len() <= slice_index {
            slices.resize(slice_index + 1, BTreeSet::new());
        }
        slices[slice_index] = labels;
    }

    /// Declares a volume with `n_slices` unlabeled slices.
    pub fn ensure_volume(&mut self, volume_id: &str, n_slices: usize) {
        let slices = self.volumes.entry(volume_id.to_string()).or_default();
        if slices.len() < n_slices {
            slices.resize(n_slices, BTreeSet::new());
        }
    }

    pub fn contains_volume(&self, volume_id: &str) -> bool {
        self.volumes.contains_key(volume_id)
    }

    pub fn volume_ids(&self) -> impl Iterator<Item = &str> {
        self.volumes.keys().map(String::as_str)
    }

    pub fn n_slices(&self, volume_id: &str) -> Option<usize> {
        self.volumes.get(volume_id).map(Vec::len)
    }

    /// Fine labels on a slice; unknown slices have no labels.
    pub fn slice(&self, volume_id: &str, slice_index: usize) -> &BTreeSet<LabelId> {
        self.volumes
            .get(volume_id)
            .and_then(|v| v.get(slice_index))
            .unwrap_or(&EMPTY)
    }

    pub fn slices(&self, volume_id: &str) -> &[BTreeSet<LabelId>] {
        self.volumes.get(volume_id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Union of fine labels over every slice of a volume.
    pub fn volume_union(&self, volume_id: &str) -> BTreeSet<LabelId> {
        self.slices(volume_id).iter().flatten().copied().collect()
    }

    /// Labels of a slice at the requested granularity.
    pub fn slice_at(
        &self,
        map: &LabelMap,
        volume_id: &str,
        slice_index: usize,
        granularity: Granularity,
    ) -> Result<BTreeSet<LabelId>> {
        map.at(self.slice(volume_id, slice_index), granularity)
    }

    pub fn volume_union_at(&self, map: &LabelMap, volume_id: &str, granularity: Granularity) -> Result<BTreeSet<LabelId>> {
        map.at(&self.volume_union(volume_id), granularity)
    }

    /// Reads `volume_id,slice_index,fine_label_ids` rows (header required,
    /// label ids `;`-separated, empty allowed).
    pub fn read_csv(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(false)
            .from_reader(reader);
        let mut table = Self::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let err = |msg: String| Error::Parse {
                what: "slice label table",
                line,
                msg,
            };
            if rec.len() != 3 {
                return Err(err(format!("expected 3 columns, got {}", rec.len())));
            }
            let slice: usize = rec[1]
                .trim()
                .parse()
                .map_err(|_| err(format!("bad slice index '{}'", &rec[1])))?;
            let mut labels = BTreeSet::new();
            for tok in rec[2].split(';').map(str::trim).filter(|t| !t.is_empty()) {
                let id: u16 = tok.parse().map_err(|_| err(format!("bad label id '{tok}'")))?;
                labels.insert(LabelId(id));
            }
            table.insert(rec[0].trim(), slice, labels);
        }
        Ok(table)
    }

    pub fn write_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["volume_id", "slice_index", "fine_label_ids"])?;
        for (vol, slices) in &self.volumes {
            for (s, labels) in slices.iter().enumerate() {
                let ids = labels.iter().map(|l| l.0.to_string()).collect::<Vec<_>>().join(";");
                w.write_record([vol.as_str(), &s.to_string(), &ids])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Checks every label id against the map.
    pub fn validate(&self, map: &LabelMap) -> Result<()> {
        for l in self.volumes.values().flatten().flatten() {
            map.coarse_of(*l)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(map: &LabelMap, names: &[&str]) -> BTreeSet<LabelId> {
        names.iter().map(|n| map.lookup(n, Granularity::Fine).unwrap()).collect()
    }

    #[test]
    fn table_shape() {
        let map = LabelMap::total_segmentator();
        assert_eq!(map.n_fine(), 104);
        assert_eq!(map.n_coarse(), 29);
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for f in 0..104u16 {
            let c = map.coarse_of(LabelId(f)).unwrap();
            *counts.entry(map.coarse_name(c).unwrap()).or_default() += 1;
        }
        assert_eq!(counts["rib"], 24);
        assert_eq!(counts["vertebrae"], 24);
        assert_eq!(counts["cardiovascular system"], 12);
        assert_eq!(counts["lung"], 5);
        assert_eq!(counts["gluteus muscles"], 6);
        assert_eq!(counts["liver"], 1);
        assert_eq!(counts.values().sum::<usize>(), 104);
    }

    #[test]
    fn coarsen_ribs() {
        let map = LabelMap::total_segmentator();
        let out = map.coarsen(&ids(&map, &["rib_left_1", "rib_right_7"])).unwrap();
        assert_eq!(out, [map.lookup("rib", Granularity::Coarse).unwrap()].into());
    }

    #[test]
    fn coarsen_cardiovascular() {
        let map = LabelMap::total_segmentator();
        let out = map.coarsen(&ids(&map, &["heart atrium left", "aorta"])).unwrap();
        assert_eq!(
            out,
            [map.lookup("cardiovascular system", Granularity::Coarse).unwrap()].into()
        );
    }

    #[test]
    fn coarsen_empty_and_unknown() {
        let map = LabelMap::total_segmentator();
        assert!(map.coarsen(&BTreeSet::new()).unwrap().is_empty());
        let bad: BTreeSet<_> = [LabelId(104)].into();
        assert!(matches!(map.coarsen(&bad), Err(Error::UnknownLabel(104))));
    }

    #[test]
    fn tsv_round_trip() {
        let map = LabelMap::total_segmentator();
        let mut buf = Vec::new();
        map.write_tsv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 104);
        assert_eq!(LabelMap::from_tsv(buf.as_slice()).unwrap(), map);
    }

    #[test]
    fn tsv_rejects_gaps() {
        let text = "0\ta\tx\n2\tb\ty\n";
        assert!(LabelMap::from_tsv(text.as_bytes()).is_err());
    }

    #[test]
    fn label_csv_round_trip_with_empty_sets() {
        let csv = "volume_id,slice_index,fine_label_ids\nv1,0,\nv1,1,4;9\nv2,0,4\n";
        let table = SliceLabelTable::read_csv(csv.as_bytes()).unwrap();
        assert!(table.slice("v1", 0).is_empty());
        assert_eq!(table.slice("v1", 1), &[LabelId(4), LabelId(9)].into());
        assert_eq!(table.volume_union("v1").len(), 2);
        let mut out = Vec::new();
        table.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), csv);
    }

    proptest! {
        #[test]
        fn coarsen_is_monotone(a in prop::collection::btree_set(0u16..104, 0..20),
                               extra in prop::collection::btree_set(0u16..104, 0..20)) {
            let map = LabelMap::total_segmentator();
            let a: BTreeSet<LabelId> = a.into_iter().map(LabelId).collect();
            let b: BTreeSet<LabelId> = a.iter().copied().chain(extra.into_iter().map(LabelId)).collect();
            let ca = map.coarsen(&a).unwrap();
            let cb = map.coarsen(&b).unwrap();
            prop_assert!(ca.is_subset(&cb));
            prop_assert!(ca.len() <= a.len());
        }

        #[test]
        fn identity_map_coarsen_is_idempotent(a in prop::collection::btree_set(0u16..10, 0..10)) {
            let tsv: String = (0..10).map(|i| format!("{i}\tc{i}\tc{i}\n")).collect();
            let ident = LabelMap::from_tsv(tsv.as_bytes()).unwrap();
            let a: BTreeSet<LabelId> = a.into_iter().map(LabelId).collect();
            let once = ident.coarsen(&a).unwrap();
            prop_assert_eq!(&once, &a);
            prop_assert_eq!(ident.coarsen(&once).unwrap(), once);
        }
    }
}
