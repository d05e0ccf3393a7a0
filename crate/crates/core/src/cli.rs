//! Command-line front end: `synth`, `build-index`, `search`, `eval`.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::{ConfigPatch, RunConfig, RESOLVED_CONFIG_FILE};
use crate::error::{Error, Result};
use crate::eval::{run_protocol, EvalContext, EvalRun, Protocol};
use crate::index::{FlatIndex, HnswGraph, HnswIndex, IndexKind, NeighborSelection, SliceIndex};
use crate::labels::{LabelMap, SliceLabelTable};
use crate::rerank::{candidates_from, rerank, write_localization_csv, write_rerank_csv, EmbeddingMatrix, RerankResult};
use crate::retrieval::{
    region_subvolume, retrieve_volume, write_hit_pairs_csv, write_hit_table_csv, QueryTarget, Retrieval,
};
use crate::store::EmbeddingStore;
use crate::synth::{generate, SynthCorpus, SynthSpec};
use crate::types::Granularity;

#[derive(Debug, Parser)]
#[command(name = "volret", version, about = "Slice-embedding retrieval for 3D volumes")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus.
    Synth(SynthArgs),
    /// Build an index over the database store.
    BuildIndex(RunArgs),
    /// Retrieve volumes for one query volume or region.
    Search(SearchArgs),
    /// Run an evaluation protocol over all query volumes.
    Eval(RunArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON run configuration; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub db: Option<PathBuf>,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Slice label CSV.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Label map TSV (default: built-in 104/29 map).
    #[arg(long)]
    pub labelmap: Option<PathBuf>,
    /// Index file to write (build-index) or read.
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub kind: Option<IndexKind>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub ef_construction: Option<usize>,
    #[arg(long)]
    pub ef_search: Option<usize>,
    /// HNSW neighbor selection: simple or diverse.
    #[arg(long)]
    pub neighbor_selection: Option<NeighborSelection>,
    #[arg(long)]
    pub protocol: Option<Protocol>,
    #[arg(long)]
    pub granularity: Option<Granularity>,
    #[arg(long)]
    pub rerank: bool,
    #[arg(long)]
    pub top_l: Option<usize>,
    #[arg(long)]
    pub exclude_self: bool,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl RunArgs {
    fn patch(&self) -> ConfigPatch {
        ConfigPatch {
            db: self.db.clone(),
            queries: self.queries.clone(),
            labels: self.labels.clone(),
            labelmap: self.labelmap.clone(),
            index: self.index.clone(),
            out: self.out.clone(),
            index_kind: self.kind,
            m: self.m,
            ef_construction: self.ef_construction,
            ef_search: self.ef_search,
            neighbor_selection: self.neighbor_selection,
            protocol: self.protocol,
            granularity: self.granularity,
            rerank: self.rerank.then_some(true),
            top_l: self.top_l,
            exclude_self: self.exclude_self.then_some(true),
            stride: self.stride,
            seed: self.seed,
        }
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        RunConfig::resolve(self.config.as_deref(), self.patch())
    }
}

#[derive(Debug, Clone, Args)]
pub struct SearchArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Query volume id.
    #[arg(long)]
    pub volume: String,
    /// Restrict the query to the sub-volume covering this region.
    #[arg(long)]
    pub region: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// JSON corpus spec; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_volumes: Option<usize>,
    #[arg(long)]
    pub n_queries: Option<usize>,
    #[arg(long)]
    pub slices_min: Option<usize>,
    #[arg(long)]
    pub slices_max: Option<usize>,
    #[arg(long)]
    pub n_labels: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub identity_weight: Option<f64>,
    #[arg(long)]
    pub min_angle_deg: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl SynthArgs {
    pub fn resolve(&self) -> Result<SynthSpec> {
        let mut spec = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => SynthSpec::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { spec.$f = v; })* };
        }
        set!(n_volumes, n_queries, slices_min, slices_max, n_labels, dim, sigma, identity_weight, min_angle_deg, seed);
        Ok(spec)
    }
}

/// Written in place of an index file for the flat kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlatMarker {
    pub kind: IndexKind,
    pub rows: usize,
    pub dim: usize,
    pub store_checksum: u64,
}

pub enum LoadedIndex<'a> {
    Flat(FlatIndex<'a>),
    Hnsw(HnswIndex<'a>),
}

impl LoadedIndex<'_> {
    pub fn as_dyn(&self) -> &dyn SliceIndex {
        match self {
            LoadedIndex::Flat(i) => i,
            LoadedIndex::Hnsw(i) => i,
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out.clone().ok_or_else(|| Error::Config("missing required path 'out'".into()))?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

pub fn load_labelmap(cfg: &RunConfig) -> Result<LabelMap> {
    match &cfg.labelmap {
        Some(_) => LabelMap::from_tsv(open(&cfg.require(&cfg.labelmap, "labelmap")?)?),
        None => Ok(LabelMap::total_segmentator()),
    }
}

pub fn load_labels(cfg: &RunConfig, map: &LabelMap) -> Result<SliceLabelTable> {
    let t = SliceLabelTable::read_csv(open(&cfg.require(&cfg.labels, "labels")?)?)?;
    t.validate(map)?;
    Ok(t)
}

/// The configured index over `db`: loaded from `cfg.index` when given,
/// otherwise built in memory.
pub fn open_index<'a>(cfg: &RunConfig, db: &'a EmbeddingStore) -> Result<LoadedIndex<'a>> {
    match cfg.index_kind {
        IndexKind::Flat => {
            if cfg.index.is_some() {
                let path = cfg.require(&cfg.index, "index")?;
                let marker: FlatMarker = serde_json::from_reader(open(&path)?)
                    .map_err(|e| Error::Config(format!("{}: not a flat index marker: {e}", path.display())))?;
                if marker.store_checksum != db.checksum() {
                    return Err(Error::IndexStoreMismatch { store: db.checksum(), index: marker.store_checksum });
                }
            }
            Ok(LoadedIndex::Flat(FlatIndex::new(db)))
        }
        IndexKind::Hnsw => {
            let mut idx = if cfg.index.is_some() {
                HnswIndex::from_graph(db, HnswGraph::load(cfg.require(&cfg.index, "index")?)?)?
            } else {
                HnswIndex::build(db, cfg.hnsw_params())?
            };
            idx.set_ef_search(cfg.ef_search);
            Ok(LoadedIndex::Hnsw(idx))
        }
    }
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

pub struct BuildSummary {
    pub rows: usize,
    pub seconds: f64,
    pub path: PathBuf,
}

/// Writes a VGI1 file (hnsw) or a JSON marker (flat) to `cfg.index`, plus
/// the resolved config next to it.
pub fn cmd_build_index(cfg: &RunConfig) -> Result<BuildSummary> {
    let db = EmbeddingStore::read(cfg.require(&cfg.db, "db")?)?;
    let path = cfg.index.clone().ok_or_else(|| Error::Config("missing required path 'index'".into()))?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let start = Instant::now();
    match cfg.index_kind {
        IndexKind::Flat => {
            let marker = FlatMarker { kind: IndexKind::Flat, rows: db.row_count(), dim: db.dim(), store_checksum: db.checksum() };
            fs::write(&path, serde_json::to_string_pretty(&marker)? + "\n").map_err(|e| Error::io(&path, e))?;
        }
        IndexKind::Hnsw => HnswGraph::build(&db, cfg.hnsw_params())?.save(&path)?,
    }
    let seconds = start.elapsed().as_secs_f64();
    cfg.write_json(&sidecar(&path))?;
    Ok(BuildSummary { rows: db.row_count(), seconds, path })
}

pub struct SearchOutput {
    pub retrieval: Retrieval,
    pub rerank: Option<RerankResult>,
}

fn non_empty_queries(cfg: &RunConfig) -> Result<EmbeddingStore> {
    let q = EmbeddingStore::read(cfg.require(&cfg.queries, "queries")?)?;
    if q.volumes().is_empty() {
        return Err(Error::EmptyQueryStore);
    }
    Ok(q)
}

/// Writes `hits.csv`, `hit_pairs.csv` and, when re-ranking, `rerank.csv` and
/// `localization.csv` into the output directory.
pub fn cmd_search(cfg: &RunConfig, volume: &str, region: Option<&str>) -> Result<SearchOutput> {
    let db = EmbeddingStore::read(cfg.require(&cfg.db, "db")?)?;
    let queries = non_empty_queries(cfg)?;
    queries.require(volume)?;
    let map = load_labelmap(cfg)?;
    let target = match region {
        None => QueryTarget::Volume(volume.to_string()),
        Some(name) => {
            let labels = load_labels(cfg, &map)?;
            let label = map.lookup(name, cfg.granularity)?;
            QueryTarget::Region(region_subvolume(volume, label, cfg.granularity, &labels, &map)?)
        }
    };
    let index = open_index(cfg, &db)?;
    let dir = out_dir(cfg)?;
    let retrieval = retrieve_volume(&target, &queries, index.as_dyn(), &map, cfg.search_options())?;
    let rerank = if cfg.rerank {
        let (first, last) = target.span(&queries)?;
        let qm = EmbeddingMatrix::new(queries.slice_range(volume, first, last)?, queries.dim())?;
        Some(rerank(&retrieval.table.query_id, qm, &candidates_from(&retrieval.table)?, &db, cfg.top_l)?)
    } else {
        None
    };
    write_hit_table_csv([&retrieval.table], create(&dir.join("hits.csv"))?)?;
    write_hit_pairs_csv([&retrieval.table], create(&dir.join("hit_pairs.csv"))?)?;
    if let Some(r) = &rerank {
        write_rerank_csv([r], create(&dir.join("rerank.csv"))?)?;
        write_localization_csv([r], create(&dir.join("localization.csv"))?)?;
    }
    cfg.write_json(&dir.join(RESOLVED_CONFIG_FILE))?;
    Ok(SearchOutput { retrieval, rerank })
}

/// Report file name for a run.
pub fn report_file(run_name: &str) -> String {
    format!("report_{run_name}.csv")
}

/// Runs the configured protocol over every query volume and writes the
/// report, hit tables, region events and re-rank results.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalRun> {
    let db = EmbeddingStore::read(cfg.require(&cfg.db, "db")?)?;
    let queries = non_empty_queries(cfg)?;
    let map = load_labelmap(cfg)?;
    let labels = load_labels(cfg, &map)?;
    let index = open_index(cfg, &db)?;
    let dir = out_dir(cfg)?;
    let ecfg = cfg.eval_config();
    let ctx = EvalContext { queries: &queries, index: index.as_dyn(), labels: &labels, map: &map };
    let run = run_protocol(ctx, &ecfg)?;
    let name = ecfg.run_name();
    run.report.write_csv(&map, create(&dir.join(report_file(&name)))?)?;
    write_hit_table_csv(&run.tables, create(&dir.join(format!("hits_{name}.csv")))?)?;
    if !run.events.is_empty() {
        let mut w = csv::Writer::from_writer(create(&dir.join(format!("events_{name}.csv")))?);
        w.write_record(["query_id", "region", "retrieved", "region_tp", "localized_tp", "lr"])?;
        for e in &run.events {
            w.write_record([
                e.query_id.as_str(),
                map.name(e.region, cfg.granularity).unwrap_or("?"),
                &e.retrieved,
                &u8::from(e.region_tp).to_string(),
                &u8::from(e.localized_tp).to_string(),
                &format!("{:.6}", e.localization_ratio),
            ])?;
        }
        w.flush()?;
    }
    if !run.reranks.is_empty() {
        write_rerank_csv(&run.reranks, create(&dir.join(format!("rerank_{name}.csv")))?)?;
    }
    cfg.write_json(&dir.join(RESOLVED_CONFIG_FILE))?;
    Ok(run)
}

pub fn cmd_synth(spec: &SynthSpec, out: &Path) -> Result<SynthCorpus> {
    let corpus = generate(spec)?;
    corpus.write_to(out)?;
    Ok(corpus)
}

/// Executes a parsed command line and prints a summary.
pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Synth(args) => {
            let spec = args.resolve()?;
            let c = cmd_synth(&spec, &args.out)?;
            println!(
                "wrote {} database volumes ({} slices) and {} query volumes ({} slices) to {}",
                c.database.volumes().len(),
                c.database.row_count(),
                c.queries.volumes().len(),
                c.queries.row_count(),
                args.out.display()
            );
        }
        Command::BuildIndex(args) => {
            let cfg = args.resolve()?;
            let s = cmd_build_index(&cfg)?;
            println!("indexed {} rows ({}) in {:.3} s -> {}", s.rows, kind_name(cfg.index_kind), s.seconds, s.path.display());
        }
        Command::Search(args) => {
            let cfg = args.run.resolve()?;
            let out = cmd_search(&cfg, &args.volume, args.region.as_deref())?;
            let t = &out.retrieval.table;
            let best = out.retrieval.best();
            println!("query {}: {} slices searched", t.query_id, t.searched());
            println!("rank-1 {} (hits {}, score sum {:.6})", best.volume_id, best.hit_count, best.score_sum);
            if let Some(r) = &out.rerank {
                println!("re-ranked winner {} (RS {:.6})", r.winner, r.ranked[0].rs_score);
            }
        }
        Command::Eval(args) => {
            let cfg = args.resolve()?;
            let run = cmd_eval(&cfg)?;
            let map = load_labelmap(&cfg)?;
            print!("{}", run.report.to_text(&map));
            println!(
                "conservation: {} slices searched, {} hits ({})",
                run.slices_searched(),
                run.total_hits(),
                if run.conserved() { "ok" } else { "VIOLATED" }
            );
        }
    }
    Ok(())
}

fn kind_name(k: IndexKind) -> &'static str {
    match k {
        IndexKind::Flat => "flat",
        IndexKind::Hnsw => "hnsw",
    }
}
