//! End-to-end evaluation: fuse a bundle, rank every query, score the
//! rankings and build a report. Also the experiment drivers built on it
//! (weight sweeps, channel ablations, caption-count sweeps).

mod grid;

use std::collections::BTreeSet;

use rayon::prelude::*;

use crate::bundle::{validate, Bundle};
use crate::error::{Error, Result};
use crate::fusion::{Channel, ChannelSet, Coefficients, FusionWeights, PreparedGallery, PreparedQueries};
use crate::matrix::Matrix;
use crate::metrics::{aggregate, ap_column, hit_column, Metric, MetricKey, QueryScores};
use crate::report::{ConfigEcho, EvalReport, ExclusionPolicy};
use crate::search::{batch_rank, Candidates, FusedGallery, RankedList};

pub use grid::{
    ablate, ablation_preset, ncap_sweep, sweep, AblationResult, AblationRow,
    NcapPoint, NcapResult, Side, SweepCell, SweepGrid, SweepResult,
};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub weights: FusionWeights,
    pub metrics: Vec<MetricKey>,
    pub exclusion: ExclusionPolicy,
    /// Worker threads; `None` uses the global pool. Results never depend on it.
    pub threads: Option<usize>,
}

impl RunConfig {
    /// Default weights and metrics suited to `bundle`.
    pub fn for_bundle(bundle: &Bundle) -> Self {
        Self {
            weights: FusionWeights::default(),
            metrics: default_metrics(bundle),
            exclusion: ExclusionPolicy::default(),
            threads: None,
        }
    }

    pub fn with_weights(mut self, weights: FusionWeights) -> Self {
        self.weights = weights;
        self
    }

    pub fn with_threads(mut self, threads: Option<usize>) -> Self {
        self.threads = threads;
        self
    }
}

/// mAP@{5,10,25,50} and Recall@{1,5,10,50}, plus Recall_subset@{1,2,3} when
/// every query has a candidate subset.
pub fn default_metrics(bundle: &Bundle) -> Vec<MetricKey> {
    let mut kinds = vec![Metric::Map, Metric::Recall];
    if bundle.has_subsets() {
        kinds.push(Metric::RecallSubset);
    }
    kinds
        .into_iter()
        .flat_map(|m| m.default_ks().iter().map(move |&k| MetricKey::new(m, k)))
        .collect()
}

/// Runs `f` on a dedicated pool of `threads` workers, or inline if `None`.
pub fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(0) => Err(Error::Incompatible("thread count must be positive".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Incompatible(format!("cannot start thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Checks that `weights` can be applied to `bundle` and returns the
/// effective coefficients.
pub fn check_compatible(bundle: &Bundle, weights: &FusionWeights) -> Result<Coefficients> {
    let c = weights.coefficients()?;
    let m = &bundle.manifest;
    if c.qm != 0.0 {
        check_captions(weights.query_captions_used, m.captions_per_query, "query")?;
    }
    if c.tc != 0.0 {
        check_captions(weights.target_captions_used, m.captions_per_target, "gallery")?;
    }
    Ok(c)
}

fn check_captions(requested: Option<usize>, available: usize, side: &str) -> Result<()> {
    if available == 0 {
        return Err(Error::Incompatible(format!(
            "{side} caption channel has weight but the bundle stores no {side} captions"
        )));
    }
    match requested {
        Some(n) if n == 0 || n > available => Err(Error::CaptionCount {
            requested: n,
            available,
        }),
        _ => Ok(()),
    }
}

/// Fused query matrix and fused gallery for one weight setting.
pub fn fuse_bundle(bundle: &Bundle, weights: &FusionWeights) -> Result<(Matrix, FusedGallery)> {
    let c = check_compatible(bundle, weights)?;
    let q = PreparedQueries::new(&bundle.queries, &c, weights.query_captions_used, weights.normalize_channels)?
        .fuse(&c)?;
    let g = PreparedGallery::new(&bundle.gallery, &c, weights.target_captions_used, weights.normalize_channels)?
        .fuse(&c)?;
    Ok((q, FusedGallery::new(g)?))
}

fn exclusions(bundle: &Bundle, policy: ExclusionPolicy) -> Vec<Vec<usize>> {
    bundle
        .annotations
        .iter()
        .map(|a| match (policy, a.reference_id) {
            (ExclusionPolicy::ExcludeReference, Some(r)) => vec![r],
            _ => Vec::new(),
        })
        .collect()
}

/// Top-`k` ranking of every query over the whole gallery.
pub fn rank_bundle(bundle: &Bundle, config: &RunConfig, k: usize) -> Result<Vec<RankedList>> {
    with_pool(config.threads, || {
        let (q, g) = fuse_bundle(bundle, &config.weights)?;
        rank_all(bundle, &q, &g, config.exclusion, k)
    })?
}

fn rank_all(
    bundle: &Bundle,
    queries: &Matrix,
    gallery: &FusedGallery,
    policy: ExclusionPolicy,
    k: usize,
) -> Result<Vec<RankedList>> {
    let excl = exclusions(bundle, policy);
    let cands: Vec<Candidates> = excl.iter().map(|e| Candidates::All { exclusions: e }).collect();
    batch_rank(queries, gallery, k, &cands)
}

fn rank_subsets(bundle: &Bundle, queries: &Matrix, gallery: &FusedGallery) -> Result<Vec<RankedList>> {
    let mut cands = Vec::with_capacity(bundle.annotations.len());
    for (q, a) in bundle.annotations.iter().enumerate() {
        match &a.subset_ids {
            Some(s) => cands.push(Candidates::Subset(s)),
            None => return Err(Error::MissingSubset { query: q }),
        }
    }
    batch_rank(queries, gallery, 1, &cands)
}

/// Per-query values of every requested metric for one fused configuration.
pub(crate) fn score_queries(
    bundle: &Bundle,
    queries: &Matrix,
    gallery: &FusedGallery,
    config: &RunConfig,
) -> Result<QueryScores> {
    let keys: BTreeSet<MetricKey> = config.metrics.iter().copied().collect();
    if keys.is_empty() {
        return Err(Error::Incompatible("no metrics requested".into()));
    }
    let depth = keys
        .iter()
        .filter(|k| k.metric != Metric::RecallSubset)
        .map(|k| k.k)
        .max();
    let full = match depth {
        Some(k) => Some(rank_all(bundle, queries, gallery, config.exclusion, k)?),
        None => None,
    };
    let subset = if keys.iter().any(|k| k.metric == Metric::RecallSubset) {
        Some(rank_subsets(bundle, queries, gallery)?)
    } else {
        None
    };
    let ann = &bundle.annotations;
    let mut scores = QueryScores::default();
    for key in keys {
        let column = match key.metric {
            Metric::Map => ap_column(full.as_deref().expect("ranked"), ann, key.k)?,
            Metric::Recall => hit_column(full.as_deref().expect("ranked"), ann, key.k)?,
            Metric::RecallSubset => hit_column(subset.as_deref().expect("ranked"), ann, key.k)?,
        };
        scores.columns.insert(key, column);
    }
    Ok(scores)
}

/// The configuration echo for a report: effective weights and only the
/// caption counts of channels that contributed.
pub fn config_echo(bundle: &Bundle, config: &RunConfig, c: &Coefficients) -> ConfigEcho {
    let w = &config.weights;
    let m = &bundle.manifest;
    ConfigEcho {
        dataset: m.dataset.clone(),
        protocol: m.protocol,
        alpha: c.qm,
        beta: c.qf,
        gamma: c.tc,
        channels: c.active().iter().collect::<Vec<Channel>>(),
        query_captions: (c.qm != 0.0).then(|| w.query_captions_used.unwrap_or(m.captions_per_query)),
        target_captions: (c.tc != 0.0).then(|| w.target_captions_used.unwrap_or(m.captions_per_target)),
        exclusion: config.exclusion,
        normalize_channels: w.normalize_channels,
    }
}

fn check_bundle(bundle: &Bundle) -> Result<()> {
    match validate(bundle).violations.into_iter().next() {
        Some(v) => Err(Error::Invalid(v)),
        None => Ok(()),
    }
}

/// Evaluates one configuration on a bundle.
pub fn evaluate(bundle: &Bundle, config: &RunConfig) -> Result<EvalReport> {
    check_bundle(bundle)?;
    with_pool(config.threads, || {
        let c = check_compatible(bundle, &config.weights)?;
        let (q, g) = fuse_bundle(bundle, &config.weights)?;
        let scores = score_queries(bundle, &q, &g, config)?;
        let agg = aggregate(&scores, bundle.manifest.categories.as_deref())?;
        Ok(EvalReport::new(config_echo(bundle, config, &c), agg))
    })?
}

/// Weights with every enabled channel given coefficient one, so that
/// preparation keeps all of them for later re-weighting.
fn prepare_all(mask: ChannelSet, bundle: &Bundle) -> Coefficients {
    let on = |c: Channel| if mask.contains(c) { 1.0 } else { 0.0 };
    let m = &bundle.manifest;
    Coefficients {
        qm: if m.captions_per_query > 0 { on(Channel::Qm) } else { 0.0 },
        qf: on(Channel::Qf),
        qv: on(Channel::Qv),
        tc: if m.captions_per_target > 0 { on(Channel::Tc) } else { 0.0 },
        tv: on(Channel::Tv),
    }
}

/// Evaluates many weight settings, fusing each distinct gallery once.
/// Caption counts and normalization are taken from `base` for all of them.
/// Output order matches `weights`.
pub(crate) fn evaluate_many(
    bundle: &Bundle,
    base: &RunConfig,
    weights: &[FusionWeights],
) -> Result<Vec<EvalReport>> {
    check_bundle(bundle)?;
    let coeffs = weights
        .iter()
        .map(|w| check_compatible(bundle, w))
        .collect::<Result<Vec<_>>>()?;
    let used = coeffs.iter().fold(ChannelSet::EMPTY, |s, c| s.union(c.active()));
    let all = prepare_all(used, bundle);
    let w0 = &base.weights;
    let pq = PreparedQueries::new(&bundle.queries, &all, w0.query_captions_used, w0.normalize_channels)?;
    let pg = PreparedGallery::new(&bundle.gallery, &all, w0.target_captions_used, w0.normalize_channels)?;

    // group by target coefficients so each fused gallery is built once
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&coeffs[a], &coeffs[b]);
        x.tc.total_cmp(&y.tc).then(x.tv.total_cmp(&y.tv)).then(a.cmp(&b))
    });
    let mut out: Vec<Option<EvalReport>> = vec![None; weights.len()];
    for group in order.chunk_by(|&a, &b| coeffs[a].tc == coeffs[b].tc && coeffs[a].tv == coeffs[b].tv) {
        let gallery = FusedGallery::new(pg.fuse(&coeffs[group[0]])?)?;
        let reports: Vec<(usize, Result<EvalReport>)> = group
            .par_iter()
            .map(|&i| {
                let c = &coeffs[i];
                let config = RunConfig {
                    weights: weights[i],
                    ..base.clone()
                };
                let run = || -> Result<EvalReport> {
                    let q = pq.fuse(c)?;
                    let scores = score_queries(bundle, &q, &gallery, &config)?;
                    let agg = aggregate(&scores, bundle.manifest.categories.as_deref())?;
                    Ok(EvalReport::new(config_echo(bundle, &config, c), agg))
                };
                (i, run())
            })
            .collect();
        for (i, r) in reports {
            out[i] = Some(r?);
        }
    }
    Ok(out.into_iter().map(|r| r.expect("every setting evaluated")).collect())
}
