//! Shared domain vocabulary: slice embeddings, volume records, label ids and
//! region queries.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `| ‖v‖₂ − 1 |` for a stored embedding to count as normalized.
pub const NORM_TOLERANCE: f64 = 1e-5;

/// Norms at or below this are treated as zero vectors.
pub const ZERO_NORM: f64 = 1e-12;

/// Dot product with double-precision accumulation.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

#[inline]
pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

/// Returns `v / ‖v‖₂`.
pub fn normalize(v: &[f32]) -> Result<Vec<f32>> {
    let norm = l2_norm(v);
    if norm.is_nan() || norm <= ZERO_NORM {
        return Err(Error::ZeroVector { norm });
    }
    Ok(v.iter().map(|&x| (f64::from(x) / norm) as f32).collect())
}

pub fn is_normalized(v: &[f32]) -> bool {
    (l2_norm(v) - 1.0).abs() <= NORM_TOLERANCE
}

/// One axial slice of a volume together with its embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceEmbedding {
    pub volume_id: String,
    pub slice_index: usize,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Database,
    Query,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Database => "database",
            Split::Query => "query",
        })
    }
}

/// A volume's location inside an embedding store. Slices are `0..n_slices`
/// in storage order and occupy rows `offset..offset + n_slices`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeRecord {
    #[serde(rename = "id")]
    pub volume_id: String,
    pub n_slices: usize,
    #[serde(rename = "offset")]
    pub embedding_offset: usize,
    pub split: Split,
}

impl VolumeRecord {
    pub fn rows(&self) -> std::ops::Range<usize> {
        self.embedding_offset..self.embedding_offset + self.n_slices
    }
}

/// Identifier of an anatomical label. Whether it names a fine or a coarse
/// class depends on the [`Granularity`] it is used with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LabelId(pub u16);

impl fmt::Display for LabelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    /// The 29 aggregated classes.
    #[default]
    Coarse,
    /// The 104 original classes.
    Fine,
}

impl std::str::FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "coarse" | "coarse29" => Ok(Granularity::Coarse),
            "fine" | "fine104" => Ok(Granularity::Fine),
            other => Err(Error::Config(format!("unknown granularity '{other}'"))),
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Granularity::Coarse => "coarse29",
            Granularity::Fine => "fine104",
        })
    }
}

/// A query sub-volume: the inclusive slice span of `volume_id` that covers
/// every slice where `region` appears.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionQuery {
    pub volume_id: String,
    pub region: LabelId,
    pub granularity: Granularity,
    /// Inclusive `[first, last]`.
    pub slice_range: (usize, usize),
}

impl RegionQuery {
    pub fn len(&self) -> usize {
        self.slice_range.1 - self.slice_range.0 + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn slices(&self) -> std::ops::RangeInclusive<usize> {
        self.slice_range.0..=self.slice_range.1
    }
}
