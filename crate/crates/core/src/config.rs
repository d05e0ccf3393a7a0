//! Run configuration: defaults, overridden by a JSON file, overridden by flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{EvalConfig, Protocol};
use crate::index::{HnswParams, IndexKind, NeighborSelection};
use crate::retrieval::SearchOptions;
use crate::types::Granularity;

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub db: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub labelmap: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub index_kind: IndexKind,
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub neighbor_selection: NeighborSelection,
    pub protocol: Protocol,
    pub granularity: Granularity,
    pub rerank: bool,
    pub top_l: usize,
    pub exclude_self: bool,
    pub stride: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let h = HnswParams::default();
        Self {
            db: None,
            queries: None,
            labels: None,
            labelmap: None,
            index: None,
            out: None,
            index_kind: IndexKind::Flat,
            m: h.m,
            ef_construction: h.ef_construction,
            ef_search: h.ef_search,
            neighbor_selection: h.selection,
            protocol: Protocol::Volume,
            granularity: Granularity::Coarse,
            rerank: false,
            top_l: crate::rerank::DEFAULT_TOP_L,
            exclude_self: false,
            stride: 1,
            seed: h.seed,
        }
    }
}

/// A partial [`RunConfig`]; unset fields leave the base value alone.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigPatch {
    pub db: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub labelmap: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub index_kind: Option<IndexKind>,
    pub m: Option<usize>,
    pub ef_construction: Option<usize>,
    pub ef_search: Option<usize>,
    pub neighbor_selection: Option<NeighborSelection>,
    pub protocol: Option<Protocol>,
    pub granularity: Option<Granularity>,
    pub rerank: Option<bool>,
    pub top_l: Option<usize>,
    pub exclude_self: Option<bool>,
    pub stride: Option<usize>,
    pub seed: Option<u64>,
}

macro_rules! apply_fields {
    ($base:expr, $patch:expr; opt: $($o:ident),*; val: $($v:ident),*) => {
        $(if let Some(x) = $patch.$o { $base.$o = Some(x); })*
        $(if let Some(x) = $patch.$v { $base.$v = x; })*
    };
}

impl RunConfig {
    pub fn apply(&mut self, patch: ConfigPatch) {
        apply_fields!(self, patch;
            opt: db, queries, labels, labelmap, index, out;
            val: index_kind, m, ef_construction, ef_search, neighbor_selection, protocol, granularity,
                 rerank, top_l, exclude_self, stride, seed);
    }

    /// Defaults, then `file` (if any), then `flags`.
    pub fn resolve(file: Option<&Path>, flags: ConfigPatch) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let patch: ConfigPatch =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            cfg.apply(patch);
        }
        cfg.apply(flags);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_l == 0 {
            return Err(Error::Config("top_l must be at least 1".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        self.hnsw_params().validate()
    }

    pub fn hnsw_params(&self) -> HnswParams {
        HnswParams {
            m: self.m,
            ef_construction: self.ef_construction,
            ef_search: self.ef_search,
            seed: self.seed,
            selection: self.neighbor_selection,
        }
    }

    pub fn search_options(&self) -> SearchOptions {
        SearchOptions {
            stride: self.stride,
            exclude_self: self.exclude_self,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            protocol: self.protocol,
            granularity: self.granularity,
            rerank: self.rerank,
            top_l: self.top_l,
            search: self.search_options(),
        }
    }

    /// The path for `name`; it must be set and exist.
    pub fn require(&self, path: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
        let p = path.clone().ok_or_else(|| Error::Config(format!("missing required path '{name}'")))?;
        if !p.exists() {
            return Err(Error::io(
                &p,
                std::io::Error::new(std::io::ErrorKind::NotFound, format!("{name} not found")),
            ));
        }
        Ok(p)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
