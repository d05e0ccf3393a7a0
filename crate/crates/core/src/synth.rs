//! Deterministic synthetic corpora.
//!
//! Labels live on a body axis `[0, 1)`: label `j` owns an interval around
//! `(j + 0.5) / n_labels`, jittered per volume. Each volume sees a random
//! field of view of that axis, sampled at `n_slices` positions, so every label
//! occupies a contiguous run of slices. Query volume `q{i}` is a rescan of
//! database volume `v{i}`: same layout, fresh noise.
//!
//! A slice embedding is `normalize(sum of its label prototypes
//! + identity_weight * pair vector + sigma * N(0, I))`.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelMap, SliceLabelTable};
use crate::store::{EmbeddingStore, StoreBuilder};
use crate::types::{LabelId, Split};

const MAX_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    /// Database volumes.
    pub n_volumes: usize,
    /// Query volumes; each rescans one of the first `n_queries` database volumes.
    pub n_queries: usize,
    pub slices_min: usize,
    pub slices_max: usize,
    /// Uses the first `n_labels` fine labels of the label map.
    pub n_labels: usize,
    pub dim: usize,
    pub sigma: f64,
    pub identity_weight: f64,
    pub min_angle_deg: f64,
    /// Reject layouts until database label unions are pairwise distinct.
    pub unique_signatures: bool,
    /// Fraction of the body axis covered by one volume.
    pub fov_min: f64,
    pub fov_max: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_volumes: 40,
            n_queries: 40,
            slices_min: 24,
            slices_max: 48,
            n_labels: 20,
            dim: 64,
            sigma: 0.0,
            identity_weight: 0.5,
            min_angle_deg: 60.0,
            unique_signatures: true,
            fov_min: 0.3,
            fov_max: 0.7,
            seed: 42,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self, map: &LabelMap) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.n_volumes == 0 {
            return bad("n_volumes must be at least 1");
        }
        if self.n_queries > self.n_volumes {
            return bad("n_queries must not exceed n_volumes");
        }
        if self.slices_min == 0 || self.slices_min > self.slices_max {
            return bad("need 1 <= slices_min <= slices_max");
        }
        if self.n_labels == 0 || self.n_labels > map.n_fine() {
            return bad("n_labels must be between 1 and the label map size");
        }
        if self.dim < 2 {
            return bad("dim must be at least 2");
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return bad("sigma must be finite and >= 0");
        }
        if !(self.identity_weight.is_finite() && self.identity_weight >= 0.0) {
            return bad("identity_weight must be finite and >= 0");
        }
        if !(0.0..90.0).contains(&self.min_angle_deg) {
            return bad("min_angle_deg must be in [0, 90)");
        }
        if !(self.fov_min > 0.0 && self.fov_min <= self.fov_max && self.fov_max <= 1.0) {
            return bad("need 0 < fov_min <= fov_max <= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub spec: SynthSpec,
    pub database: EmbeddingStore,
    pub queries: EmbeddingStore,
    pub labels: SliceLabelTable,
    pub map: LabelMap,
}

impl SynthCorpus {
    /// Writes `db.vge`, `query.vge`, `labels.csv`, `labelmap.tsv` and
    /// `synth_spec.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.database.write(dir.join("db.vge"))?;
        self.queries.write(dir.join("query.vge"))?;
        let p = dir.join("labels.csv");
        self.labels.write_csv(fs::File::create(&p).map_err(|e| Error::io(&p, e))?)?;
        let p = dir.join("labelmap.tsv");
        self.map.write_tsv(fs::File::create(&p).map_err(|e| Error::io(&p, e))?)?;
        let p = dir.join("synth_spec.json");
        let json = serde_json::to_string_pretty(&self.spec)? + "\n";
        fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
        Ok(())
    }
}

pub fn db_volume_id(i: usize) -> String {
    format!("v{i:03}")
}

pub fn query_volume_id(i: usize) -> String {
    format!("q{i:03}")
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v = gaussian(rng, dim);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn prototypes(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let max_cos = spec.min_angle_deg.to_radians().cos();
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(spec.n_labels);
    for _ in 0..spec.n_labels {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let cand = unit(rng, spec.dim);
            let ok = out
                .iter()
                .all(|p| p.iter().zip(&cand).map(|(a, b)| a * b).sum::<f64>() <= max_cos);
            if ok {
                out.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::InvalidSpec(format!(
                "cannot place {} prototypes {}° apart in {} dimensions",
                spec.n_labels, spec.min_angle_deg, spec.dim
            )));
        }
    }
    Ok(out)
}

/// Per-slice label sets of one volume.
fn layout(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<BTreeSet<LabelId>> {
    let n = rng.random_range(spec.slices_min..=spec.slices_max);
    let fov = rng.random_range(spec.fov_min..=spec.fov_max);
    let start = rng.random_range(0.0..=(1.0 - fov));
    let step = 1.0 / spec.n_labels as f64;
    let intervals: Vec<(f64, f64)> = (0..spec.n_labels)
        .map(|j| {
            let c = (j as f64 + 0.5) * step + rng.random_range(-0.25..0.25) * step;
            let h = rng.random_range(0.6..1.6) * step;
            (c - h, c + h)
        })
        .collect();
    (0..n)
        .map(|s| {
            let z = start + fov * (s as f64 + 0.5) / n as f64;
            intervals
                .iter()
                .enumerate()
                .filter(|(_, &(a, b))| a <= z && z <= b)
                .map(|(j, _)| LabelId(j as u16))
                .collect()
        })
        .collect()
}

fn embed(
    spec: &SynthSpec,
    rng: &mut ChaCha8Rng,
    protos: &[Vec<f64>],
    identity: &[f64],
    labels: &BTreeSet<LabelId>,
) -> Vec<f32> {
    let mut v: Vec<f64> = identity.iter().map(|x| x * spec.identity_weight).collect();
    for l in labels {
        for (a, p) in v.iter_mut().zip(&protos[l.0 as usize]) {
            *a += p;
        }
    }
    if spec.sigma > 0.0 {
        for (a, g) in v.iter_mut().zip(gaussian(rng, spec.dim)) {
            *a += spec.sigma * g;
        }
    }
    v.into_iter().map(|x| x as f32).collect()
}

fn push(b: &mut StoreBuilder, id: &str, split: Split, rows: Vec<Vec<f32>>) -> Result<()> {
    match b.push_volume(id, split, rows) {
        Ok(_) => Ok(()),
        Err(Error::ZeroVector { .. }) => Err(Error::InvalidSpec(format!(
            "volume '{id}' has an unlabeled slice with zero embedding; raise identity_weight or sigma"
        ))),
        Err(e) => Err(e),
    }
}

/// Builds the corpus. Identical specs give byte-identical stores.
pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus> {
    let map = LabelMap::total_segmentator();
    spec.validate(&map)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let protos = prototypes(spec, &mut rng)?;
    let identities: Vec<Vec<f64>> = (0..spec.n_volumes).map(|_| unit(&mut rng, spec.dim)).collect();

    let mut layouts: Vec<Vec<BTreeSet<LabelId>>> = Vec::with_capacity(spec.n_volumes);
    let mut signatures: BTreeSet<BTreeSet<LabelId>> = BTreeSet::new();
    for i in 0..spec.n_volumes {
        let mut found = None;
        for _ in 0..MAX_ATTEMPTS {
            let l = layout(spec, &mut rng);
            let sig: BTreeSet<LabelId> = l.iter().flatten().copied().collect();
            if !spec.unique_signatures || signatures.insert(sig) {
                found = Some(l);
                break;
            }
        }
        layouts.push(found.ok_or_else(|| {
            Error::InvalidSpec(format!("no unique label signature found for volume {i}"))
        })?);
    }

    let mut labels = SliceLabelTable::new();
    let mut db = StoreBuilder::new(spec.dim);
    for (i, lay) in layouts.iter().enumerate() {
        let id = db_volume_id(i);
        let rows = lay.iter().map(|ls| embed(spec, &mut rng, &protos, &identities[i], ls)).collect();
        push(&mut db, &id, Split::Database, rows)?;
        for (s, ls) in lay.iter().enumerate() {
            labels.insert(&id, s, ls.clone());
        }
    }
    let mut q = StoreBuilder::new(spec.dim);
    for (i, lay) in layouts.iter().enumerate().take(spec.n_queries) {
        let id = query_volume_id(i);
        let rows = lay.iter().map(|ls| embed(spec, &mut rng, &protos, &identities[i], ls)).collect();
        push(&mut q, &id, Split::Query, rows)?;
        for (s, ls) in lay.iter().enumerate() {
            labels.insert(&id, s, ls.clone());
        }
    }
    Ok(SynthCorpus {
        spec: spec.clone(),
        database: db.build()?,
        queries: q.build()?,
        labels,
        map,
    })
}
