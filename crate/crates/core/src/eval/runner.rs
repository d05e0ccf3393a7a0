use rayon::prelude::*;

use super::{
    localization_ratio_count, localization_ratio_rerank, localized_recall, region_recall, slicewise_recall,
    volume_recall, ClassCounts, EvalReport, Protocol, RatioTable,
};
use crate::error::{Error, Result};
use crate::index::SliceIndex;
use crate::labels::{LabelMap, SliceLabelTable};
use crate::rerank::{candidates_from, rerank, EmbeddingMatrix, RerankResult};
use crate::retrieval::{build_hit_table, region_subvolume, retrieve_volume, HitTable, QueryTarget, RetrievedVolume, SearchOptions};
use crate::store::EmbeddingStore;
use crate::types::{Granularity, LabelId};

/// Everything a protocol run reads. One label table covers both database and
/// query volumes.
#[derive(Clone, Copy)]
pub struct EvalContext<'a> {
    pub queries: &'a EmbeddingStore,
    pub index: &'a dyn SliceIndex,
    pub labels: &'a SliceLabelTable,
    pub map: &'a LabelMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalConfig {
    pub protocol: Protocol,
    pub granularity: Granularity,
    pub rerank: bool,
    pub top_l: usize,
    pub search: SearchOptions,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::Volume,
            granularity: Granularity::Coarse,
            rerank: false,
            top_l: crate::rerank::DEFAULT_TOP_L,
            search: SearchOptions::default(),
        }
    }
}

impl EvalConfig {
    /// `protocol_granularity_method`, e.g. `region_coarse29_rerank`.
    pub fn run_name(&self) -> String {
        let method = if self.rerank && self.protocol != Protocol::Slice { "rerank" } else { "count" };
        format!("{}_{}_{}", self.protocol, self.granularity, method)
    }
}

/// One region query and how it fared.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionEvent {
    pub query_id: String,
    pub region: LabelId,
    pub retrieved: String,
    pub region_tp: bool,
    pub localized_tp: bool,
    pub localization_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRun {
    pub report: EvalReport,
    pub tables: Vec<HitTable>,
    /// Rank-1 volume of each query after count aggregation.
    pub retrieved: Vec<RetrievedVolume>,
    pub reranks: Vec<RerankResult>,
    pub events: Vec<RegionEvent>,
}

impl EvalRun {
    pub fn slices_searched(&self) -> usize {
        self.tables.iter().map(HitTable::searched).sum()
    }

    pub fn total_hits(&self) -> usize {
        self.tables.iter().map(HitTable::total_hits).sum()
    }

    /// Every searched slice contributed exactly one hit.
    pub fn conserved(&self) -> bool {
        self.tables.iter().all(|t| t.searched() == t.total_hits()) && self.slices_searched() == self.total_hits()
    }
}

#[derive(Default)]
struct Partial {
    counts: ClassCounts,
    tables: Vec<HitTable>,
    retrieved: Vec<RetrievedVolume>,
    reranks: Vec<RerankResult>,
    events: Vec<RegionEvent>,
}

/// Runs one protocol over every query volume, in query-store order.
pub fn run_protocol(ctx: EvalContext<'_>, cfg: &EvalConfig) -> Result<EvalRun> {
    if ctx.queries.volumes().is_empty() {
        return Err(Error::EmptyQueryStore);
    }
    if cfg.rerank && cfg.top_l == 0 {
        return Err(Error::InvalidParams("top_l must be at least 1".into()));
    }
    let partials: Vec<Partial> = ctx
        .queries
        .volumes()
        .par_iter()
        .map(|v| match cfg.protocol {
            Protocol::Slice => slice_partial(ctx, cfg, &v.volume_id),
            Protocol::Volume => volume_partial(ctx, cfg, &v.volume_id),
            Protocol::Region | Protocol::Localized => region_partial(ctx, cfg, &v.volume_id),
        })
        .collect::<Result<_>>()?;

    let mut all = Partial::default();
    let mut ratios = RatioTable::default();
    for p in partials {
        all.counts.merge(&p.counts);
        for e in &p.events {
            ratios.record(e.region, e.localization_ratio);
        }
        all.tables.extend(p.tables);
        all.retrieved.extend(p.retrieved);
        all.reranks.extend(p.reranks);
        all.events.extend(p.events);
    }
    let counts = match cfg.protocol {
        Protocol::Region | Protocol::Localized => {
            let mut c = ClassCounts::new();
            for e in &all.events {
                c.record(e.region, if cfg.protocol == Protocol::Region { e.region_tp } else { e.localized_tp });
            }
            c
        }
        _ => all.counts,
    };
    Ok(EvalRun {
        report: EvalReport {
            protocol: cfg.protocol,
            granularity: cfg.granularity,
            reranked: cfg.rerank && cfg.protocol != Protocol::Slice,
            run_name: cfg.run_name(),
            counts,
            localization: (cfg.protocol == Protocol::Localized).then_some(ratios),
        },
        tables: all.tables,
        retrieved: all.retrieved,
        reranks: all.reranks,
        events: all.events,
    })
}

fn slice_partial(ctx: EvalContext<'_>, cfg: &EvalConfig, volume: &str) -> Result<Partial> {
    let target = QueryTarget::Volume(volume.to_string());
    let slices = target.slices(ctx.queries, cfg.search.stride)?;
    let exclude = cfg.search.exclude_self.then_some(volume);
    let table = build_hit_table(volume, &slices, ctx.index, exclude)?;
    let mut pairs = Vec::with_capacity(table.total_hits());
    for e in table.entries() {
        for p in &e.hit_pairs {
            let q = ctx.labels.slice_at(ctx.map, volume, p.query_slice, cfg.granularity)?;
            let f = ctx.labels.slice_at(ctx.map, &e.volume_id, p.db_slice, cfg.granularity)?;
            pairs.push((q, f));
        }
    }
    Ok(Partial {
        counts: slicewise_recall(pairs.iter().map(|(q, f)| (q, f))),
        tables: vec![table],
        ..Partial::default()
    })
}

fn target_matrix<'s>(ctx: EvalContext<'s>, target: &QueryTarget) -> Result<EmbeddingMatrix<'s>> {
    let (first, last) = target.span(ctx.queries)?;
    EmbeddingMatrix::new(ctx.queries.slice_range(target.volume_id(), first, last)?, ctx.queries.dim())
}

fn rerank_target(ctx: EvalContext<'_>, cfg: &EvalConfig, target: &QueryTarget, table: &HitTable) -> Result<RerankResult> {
    let cands = candidates_from(table)?;
    rerank(&table.query_id, target_matrix(ctx, target)?, &cands, ctx.index.store(), cfg.top_l)
}

fn volume_partial(ctx: EvalContext<'_>, cfg: &EvalConfig, volume: &str) -> Result<Partial> {
    let target = QueryTarget::Volume(volume.to_string());
    let r = retrieve_volume(&target, ctx.queries, ctx.index, ctx.map, cfg.search)?;
    let mut out = Partial::default();
    let winner = if cfg.rerank {
        let rr = rerank_target(ctx, cfg, &target, &r.table)?;
        let w = rr.winner.clone();
        out.reranks.push(rr);
        w
    } else {
        r.best().volume_id.clone()
    };
    out.counts = volume_recall(volume, &winner, ctx.labels, ctx.map, cfg.granularity)?;
    out.retrieved.push(r.best().clone());
    out.tables.push(r.table);
    Ok(out)
}

fn region_partial(ctx: EvalContext<'_>, cfg: &EvalConfig, volume: &str) -> Result<Partial> {
    let mut out = Partial::default();
    let regions = ctx.labels.volume_union_at(ctx.map, volume, cfg.granularity)?;
    for region in regions {
        let rq = region_subvolume(volume, region, cfg.granularity, ctx.labels, ctx.map)?;
        let target = QueryTarget::Region(rq);
        let r = retrieve_volume(&target, ctx.queries, ctx.index, ctx.map, cfg.search)?;
        let (retrieved, localized_tp, lr) = if cfg.rerank {
            let rr = rerank_target(ctx, cfg, &target, &r.table)?;
            let loc = localized_recall(region, &rr, ctx.labels, ctx.map, cfg.granularity)?;
            let lr = localization_ratio_rerank(&rr, region, ctx.labels, ctx.map, cfg.granularity, cfg.top_l)?;
            let w = rr.winner.clone();
            out.reranks.push(rr);
            (w, loc, lr)
        } else {
            let best = r.best();
            let loc = localized_recall(region, best, ctx.labels, ctx.map, cfg.granularity)?;
            let lr = localization_ratio_count(best, region, ctx.labels, ctx.map, cfg.granularity)?;
            (best.volume_id.clone(), loc, lr)
        };
        let region_tp = region_recall(region, &retrieved, ctx.labels, ctx.map, cfg.granularity)?;
        out.events.push(RegionEvent {
            query_id: r.table.query_id.clone(),
            region,
            retrieved,
            region_tp,
            localized_tp,
            localization_ratio: lr,
        });
        out.retrieved.push(r.best().clone());
        out.tables.push(r.table);
    }
    Ok(out)
}
