//! `VGE1` embedding store.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "VGE1"            4 bytes magic
//! format_version    u32
//! dim               u32
//! row_count         u64
//! checksum          u64   FNV-1a 64 over the payload bytes
//! manifest_len      u64
//! manifest          manifest_len bytes of UTF-8 JSON {"volumes":[{id,n_slices,offset,split}]}
//! payload           row_count * dim f32, row-major
//! ```
//!
//! Rows are stored already L2-normalized, volume by volume, slices in order.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{is_normalized, l2_norm, normalize, SliceEmbedding, Split, VolumeRecord};

pub const STORE_MAGIC: &[u8; 4] = b"VGE1";
pub const STORE_VERSION: u32 = 1;
/// Bytes before the manifest block.
pub const STORE_HEADER_LEN: usize = 4 + 4 + 4 + 8 + 8 + 8;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreManifest {
    pub format_version: u32,
    pub dim: usize,
    pub volumes: Vec<VolumeRecord>,
    pub checksum: u64,
}

impl StoreManifest {
    pub fn row_count(&self) -> usize {
        self.volumes.iter().map(|v| v.n_slices).sum()
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestJson {
    volumes: Vec<VolumeRecord>,
}

/// An immutable, validated set of per-volume slice embeddings.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dim: usize,
    volumes: Vec<VolumeRecord>,
    data: Vec<f32>,
    by_id: HashMap<String, usize>,
    row_volume: Vec<u32>,
    checksum: u64,
}

impl PartialEq for EmbeddingStore {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.volumes == other.volumes && self.data == other.data
    }
}

/// Accumulates volumes for a new store, normalizing rows on ingest.
#[derive(Debug, Clone)]
pub struct StoreBuilder {
    dim: usize,
    volumes: Vec<VolumeRecord>,
    data: Vec<f32>,
}

impl StoreBuilder {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            volumes: Vec::new(),
            data: Vec::new(),
        }
    }

    /// Appends a volume; each row is normalized. Rejects zero rows, wrong
    /// dimensions, empty volumes and duplicate ids.
    pub fn push_volume<I, V>(&mut self, volume_id: &str, split: Split, rows: I) -> Result<&mut Self>
    where
        I: IntoIterator<Item = V>,
        V: AsRef<[f32]>,
    {
        if self.volumes.iter().any(|v| v.volume_id == volume_id) {
            return Err(Error::Manifest(format!("duplicate volume id '{volume_id}'")));
        }
        let offset = self.data.len() / self.dim.max(1);
        let mut n = 0;
        let mut buf = Vec::new();
        for row in rows {
            let row = row.as_ref();
            if row.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    actual: row.len(),
                });
            }
            buf.extend(normalize(row)?);
            n += 1;
        }
        if n == 0 {
            return Err(Error::Manifest(format!("volume '{volume_id}' has no slices")));
        }
        self.data.extend(buf);
        self.volumes.push(VolumeRecord {
            volume_id: volume_id.to_string(),
            n_slices: n,
            embedding_offset: offset,
            split,
        });
        Ok(self)
    }

    pub fn build(self) -> Result<EmbeddingStore> {
        EmbeddingStore::from_parts(self.dim, self.volumes, self.data)
    }
}

impl EmbeddingStore {
    /// Validates and assembles a store from an already-normalized payload.
    pub fn from_parts(dim: usize, volumes: Vec<VolumeRecord>, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Manifest("embedding dimension must be positive".into()));
        }
        let mut by_id = HashMap::with_capacity(volumes.len());
        let mut expected_offset = 0usize;
        let mut row_volume = Vec::with_capacity(data.len() / dim);
        for (i, v) in volumes.iter().enumerate() {
            if v.n_slices == 0 {
                return Err(Error::Manifest(format!("volume '{}' has no slices", v.volume_id)));
            }
            if v.embedding_offset != expected_offset {
                return Err(Error::Manifest(format!(
                    "volume '{}' offset {} does not follow previous volume (expected {})",
                    v.volume_id, v.embedding_offset, expected_offset
                )));
            }
            if by_id.insert(v.volume_id.clone(), i).is_some() {
                return Err(Error::Manifest(format!("duplicate volume id '{}'", v.volume_id)));
            }
            expected_offset += v.n_slices;
            row_volume.extend(std::iter::repeat_n(i as u32, v.n_slices));
        }
        if expected_offset * dim != data.len() {
            return Err(Error::Manifest(format!(
                "manifest declares {} rows of dim {} but payload holds {} values",
                expected_offset,
                dim,
                data.len()
            )));
        }
        for (row, chunk) in data.chunks_exact(dim).enumerate() {
            if !is_normalized(chunk) {
                return Err(Error::NotNormalized {
                    row,
                    norm: l2_norm(chunk),
                });
            }
        }
        let checksum = fnv1a64(&payload_bytes(&data));
        Ok(Self {
            dim,
            volumes,
            data,
            by_id,
            row_volume,
            checksum,
        })
    }

    /// Builds a store from a manifest's volume list and rows ordered by
    /// `(manifest volume order, slice_index)`.
    pub fn from_slices(dim: usize, volumes: Vec<VolumeRecord>, rows: &[SliceEmbedding]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        let mut it = rows.iter();
        for v in &volumes {
            for s in 0..v.n_slices {
                let row = it
                    .next()
                    .ok_or_else(|| Error::Manifest(format!("missing row {s} of volume '{}'", v.volume_id)))?;
                if row.volume_id != v.volume_id || row.slice_index != s {
                    return Err(Error::Manifest(format!(
                        "row ({}, {}) out of order, expected ({}, {s})",
                        row.volume_id, row.slice_index, v.volume_id
                    )));
                }
                if row.vector.len() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        actual: row.vector.len(),
                    });
                }
                data.extend_from_slice(&row.vector);
            }
        }
        if it.next().is_some() {
            return Err(Error::Manifest("more rows than the manifest declares".into()));
        }
        Self::from_parts(dim, volumes, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row_count(&self) -> usize {
        self.row_volume.len()
    }

    pub fn is_empty(&self) -> bool {
        self.row_volume.is_empty()
    }

    pub fn checksum(&self) -> u64 {
        self.checksum
    }

    pub fn volumes(&self) -> &[VolumeRecord] {
        &self.volumes
    }

    pub fn manifest(&self) -> StoreManifest {
        StoreManifest {
            format_version: STORE_VERSION,
            dim: self.dim,
            volumes: self.volumes.clone(),
            checksum: self.checksum,
        }
    }

    pub fn volume(&self, volume_id: &str) -> Option<&VolumeRecord> {
        self.by_id.get(volume_id).map(|&i| &self.volumes[i])
    }

    pub fn volume_index(&self, volume_id: &str) -> Option<usize> {
        self.by_id.get(volume_id).copied()
    }

    pub fn require(&self, volume_id: &str) -> Result<&VolumeRecord> {
        self.volume(volume_id)
            .ok_or_else(|| Error::UnknownVolumeId(volume_id.to_string()))
    }

    /// Row `r` of the payload.
    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    /// `(volume record, slice index)` owning row `r`.
    #[inline]
    pub fn locate(&self, r: usize) -> (&VolumeRecord, usize) {
        let v = &self.volumes[self.row_volume[r] as usize];
        (v, r - v.embedding_offset)
    }

    /// Position in [`Self::volumes`] of the volume owning row `r`.
    #[inline]
    pub fn volume_of_row(&self, r: usize) -> usize {
        self.row_volume[r] as usize
    }

    pub fn slice(&self, volume_id: &str, slice_index: usize) -> Result<&[f32]> {
        let v = self.require(volume_id)?;
        if slice_index >= v.n_slices {
            return Err(Error::SliceOutOfRange {
                volume: volume_id.to_string(),
                slice: slice_index,
            });
        }
        Ok(self.row(v.embedding_offset + slice_index))
    }

    /// Contiguous `n_slices × dim` block of a volume.
    pub fn volume_rows(&self, volume_id: &str) -> Result<&[f32]> {
        let v = self.require(volume_id)?;
        Ok(&self.data[v.embedding_offset * self.dim..(v.embedding_offset + v.n_slices) * self.dim])
    }

    /// Rows `first..=last` of a volume.
    pub fn slice_range(&self, volume_id: &str, first: usize, last: usize) -> Result<&[f32]> {
        let v = self.require(volume_id)?;
        if first > last || last >= v.n_slices {
            return Err(Error::SliceOutOfRange {
                volume: volume_id.to_string(),
                slice: last,
            });
        }
        let start = v.embedding_offset + first;
        let end = v.embedding_offset + last + 1;
        Ok(&self.data[start * self.dim..end * self.dim])
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&ManifestJson {
            volumes: self.volumes.clone(),
        })?;
        let payload = payload_bytes(&self.data);
        let mut out = Vec::with_capacity(STORE_HEADER_LEN + manifest.len() + payload.len());
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.row_count() as u64).to_le_bytes());
        out.extend_from_slice(&self.checksum.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != STORE_MAGIC {
            return Err(Error::BadMagic { expected: "VGE1" });
        }
        let mut cur = Cursor { bytes, pos: 4 };
        let version = cur.u32()?;
        if version != STORE_VERSION {
            return Err(Error::VersionUnsupported(version));
        }
        let dim = cur.u32()? as usize;
        let rows = cur.u64()? as usize;
        let stored = cur.u64()?;
        let manifest_len = cur.u64()? as usize;
        let manifest = cur.take(manifest_len).ok_or_else(|| truncated(stored, bytes))?;
        let payload = &bytes[cur.pos..];
        let computed = fnv1a64(payload);
        if computed != stored {
            return Err(Error::ChecksumMismatch { stored, computed });
        }
        let manifest: ManifestJson =
            serde_json::from_slice(manifest).map_err(|e| Error::Manifest(e.to_string()))?;
        if payload.len() != rows * dim * 4 {
            return Err(Error::Manifest(format!(
                "header declares {rows} rows of dim {dim} but payload has {} bytes",
                payload.len()
            )));
        }
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let store = Self::from_parts(dim, manifest.volumes, data)?;
        if store.row_count() != rows {
            return Err(Error::Manifest(format!(
                "header row count {rows} disagrees with manifest ({})",
                store.row_count()
            )));
        }
        Ok(store)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Writes `rows` (ordered by manifest volume, then slice) as a `VGE1` file.
pub fn write_store(manifest: &StoreManifest, rows: &[SliceEmbedding], path: impl AsRef<Path>) -> Result<()> {
    EmbeddingStore::from_slices(manifest.dim, manifest.volumes.clone(), rows)?.write(path)
}

/// Reads and validates a `VGE1` file.
pub fn read_store(path: impl AsRef<Path>) -> Result<(StoreManifest, EmbeddingStore)> {
    let store = EmbeddingStore::read(path)?;
    Ok((store.manifest(), store))
}

fn payload_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn truncated(stored: u64, bytes: &[u8]) -> Error {
    Error::ChecksumMismatch {
        stored,
        computed: fnv1a64(&bytes[bytes.len().min(STORE_HEADER_LEN)..]),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    // A header cut short is reported like any other truncation.
    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4).ok_or_else(|| truncated(0, self.bytes))?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8).ok_or_else(|| truncated(0, self.bytes))?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}
