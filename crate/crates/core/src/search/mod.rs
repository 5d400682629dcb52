//! Exact cosine ranking of fused gallery rows.
//!
//! Two routes produce rankings. The reference route ([`rank_full`],
//! [`rank_subset`]) scores every candidate with an `f64` dot product of the
//! stored `f32` values and sorts. The fast route ([`top_k`], [`batch_rank`])
//! pre-scores with blocked SIMD `f32` kernels, keeps only rows that can still
//! reach the top `k`, and rescores those with the reference scorer, so its
//! output is identical to the prefix of the reference ranking.
//!
//! Ordering is by descending score, ties broken by ascending gallery index.

mod kernel;
mod topk;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub(crate) use kernel::{dot_f64, error_margin, scan};
use topk::{rank_order, CandidateCollector};

/// Queries scored together in one pass over the gallery.
const PANEL: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub gallery_index: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_index: usize,
    pub entries: Vec<Hit>,
    /// Gallery indices that were never candidates, ascending.
    pub exclusions: Vec<usize>,
}

impl RankedList {
    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|h| h.gallery_index)
    }

    /// Zero-based rank of `gallery_index`, if present.
    pub fn position(&self, gallery_index: usize) -> Option<usize> {
        self.ids().position(|i| i == gallery_index)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Fused gallery rows with their `f64` norms, built once per fusion
/// configuration and shared read-only by every query.
#[derive(Debug, Clone)]
pub struct FusedGallery {
    rows: Matrix,
    norms: Vec<f64>,
    inv_norms: Vec<f32>,
}

impl FusedGallery {
    pub fn new(rows: Matrix) -> Result<Self> {
        let norms: Vec<f64> = rows
            .iter_rows()
            .map(|r| dot_f64(r, r).sqrt())
            .collect();
        if let Some(i) = norms.iter().position(|&n| !(n > 0.0 && n.is_finite())) {
            return Err(Error::Incompatible(format!(
                "fused gallery row {i} has norm {}",
                norms[i]
            )));
        }
        let inv_norms = norms.iter().map(|&n| (1.0 / n) as f32).collect();
        Ok(Self {
            rows,
            norms,
            inv_norms,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn rows(&self) -> &Matrix {
        &self.rows
    }

    #[inline]
    fn exact(&self, q: &QueryVec, i: usize) -> f64 {
        dot_f64(q.v, self.rows.row(i)) / (q.norm * self.norms[i])
    }
}

struct QueryVec<'a> {
    v: &'a [f32],
    norm: f64,
}

impl<'a> QueryVec<'a> {
    fn new(v: &'a [f32], dim: usize) -> Result<Self> {
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: v.len(),
            });
        }
        if !v.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("query"));
        }
        let norm = dot_f64(v, v).sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroVector);
        }
        Ok(Self { v, norm })
    }
}

/// `q . t / (|q| |t|)`, accumulated in `f64`.
pub fn cosine(q: &[f32], t: &[f32]) -> Result<f64> {
    if q.len() != t.len() {
        return Err(Error::DimensionMismatch {
            expected: q.len(),
            actual: t.len(),
        });
    }
    let nq = dot_f64(q, q).sqrt();
    let nt = dot_f64(t, t).sqrt();
    if nq == 0.0 || nt == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(dot_f64(q, t) / (nq * nt))
}

fn sorted_ids(ids: &[usize], len: usize) -> Result<Vec<usize>> {
    if let Some(&index) = ids.iter().find(|&&i| i >= len) {
        return Err(Error::IndexOutOfRange { index, len });
    }
    let mut v = ids.to_vec();
    v.sort_unstable();
    v.dedup();
    Ok(v)
}

fn into_list(mut scored: Vec<(usize, f64)>, exclusions: Vec<usize>) -> RankedList {
    scored.sort_unstable_by(rank_order);
    RankedList {
        query_index: 0,
        entries: scored
            .into_iter()
            .map(|(gallery_index, score)| Hit {
                gallery_index,
                score,
            })
            .collect(),
        exclusions,
    }
}

/// Reference ranking of every non-excluded gallery row.
pub fn rank_full(q: &[f32], gallery: &FusedGallery, exclusions: &[usize]) -> Result<RankedList> {
    let q = QueryVec::new(q, gallery.dim())?;
    let excl = sorted_ids(exclusions, gallery.len())?;
    if excl.len() == gallery.len() {
        return Err(Error::EmptyGallery);
    }
    let scored = (0..gallery.len())
        .filter(|i| excl.binary_search(i).is_err())
        .map(|i| (i, gallery.exact(&q, i)))
        .collect();
    Ok(into_list(scored, excl))
}

/// Reference ranking restricted to `subset`.
pub fn rank_subset(q: &[f32], gallery: &FusedGallery, subset: &[usize]) -> Result<RankedList> {
    if subset.is_empty() {
        return Err(Error::EmptySubset);
    }
    let q = QueryVec::new(q, gallery.dim())?;
    let ids = sorted_ids(subset, gallery.len())?;
    let scored = ids.into_iter().map(|i| (i, gallery.exact(&q, i))).collect();
    Ok(into_list(scored, Vec::new()))
}

/// The first `k` entries of [`rank_full`], found by bounded selection over
/// SIMD pre-scores followed by exact rescoring of the survivors.
pub fn top_k(
    q: &[f32],
    gallery: &FusedGallery,
    k: usize,
    exclusions: &[usize],
) -> Result<RankedList> {
    let mut out = top_k_panel(&[(0, q, exclusions)], gallery, k);
    out.pop().expect("one result per query")
}

/// Candidate set of one query in a batch.
#[derive(Debug, Clone, Copy)]
pub enum Candidates<'a> {
    /// The whole gallery minus these indices; ranked to depth `k`.
    All { exclusions: &'a [usize] },
    /// Only these indices; ranked completely.
    Subset(&'a [usize]),
}

/// Ranks every row of `queries`. Element `i` equals [`top_k`] or
/// [`rank_subset`] for query `i`; the result does not depend on the number
/// of worker threads. The first failing query (by index) aborts the batch.
pub fn batch_rank(
    queries: &Matrix,
    gallery: &FusedGallery,
    k: usize,
    candidates: &[Candidates<'_>],
) -> Result<Vec<RankedList>> {
    if candidates.len() != queries.rows() {
        return Err(Error::CountMismatch {
            rankings: queries.rows(),
            annotations: candidates.len(),
        });
    }
    let mut full = Vec::new();
    let mut subset = Vec::new();
    for (i, c) in candidates.iter().enumerate() {
        match *c {
            Candidates::All { exclusions } => full.push((i, queries.row(i), exclusions)),
            Candidates::Subset(ids) => subset.push((i, ids)),
        }
    }

    let mut results: Vec<Option<Result<RankedList>>> = (0..queries.rows()).map(|_| None).collect();
    let panels: Vec<Vec<Result<RankedList>>> = full
        .par_chunks(PANEL)
        .map(|panel| top_k_panel(panel, gallery, k))
        .collect();
    for (panel, lists) in full.chunks(PANEL).zip(panels) {
        for (&(i, _, _), r) in panel.iter().zip(lists) {
            results[i] = Some(r);
        }
    }
    let subset_lists: Vec<Result<RankedList>> = subset
        .par_iter()
        .map(|&(i, ids)| rank_subset(queries.row(i), gallery, ids))
        .collect();
    for (&(i, _), r) in subset.iter().zip(subset_lists) {
        results[i] = Some(r);
    }

    results
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let mut list = r.expect("every query ranked").map_err(|e| e.at_query(i))?;
            list.query_index = i;
            Ok(list)
        })
        .collect()
}

fn top_k_panel(
    panel: &[(usize, &[f32], &[usize])],
    gallery: &FusedGallery,
    k: usize,
) -> Vec<Result<RankedList>> {
    let dim = gallery.dim();
    let margin = error_margin(dim);

    struct Prepared<'a> {
        q: QueryVec<'a>,
        inv_norm: f32,
        excl: Vec<usize>,
    }

    let prepared: Vec<Result<Prepared>> = panel
        .iter()
        .map(|&(_, v, exclusions)| {
            let q = QueryVec::new(v, dim)?;
            let excl = sorted_ids(exclusions, gallery.len())?;
            let available = gallery.len() - excl.len();
            if available == 0 {
                return Err(Error::EmptyGallery);
            }
            if k == 0 || k > available {
                return Err(Error::KOutOfRange { k, max: available });
            }
            let inv_norm = (1.0 / q.norm) as f32;
            Ok(Prepared { q, inv_norm, excl })
        })
        .collect();

    let live: Vec<&Prepared> = prepared.iter().filter_map(|p| p.as_ref().ok()).collect();
    let vecs: Vec<&[f32]> = live.iter().map(|p| p.q.v).collect();
    let mut collectors: Vec<CandidateCollector> = live
        .iter()
        .map(|p| CandidateCollector::new(k, margin, &p.excl))
        .collect();
    let inv_t = &gallery.inv_norms;
    scan(&vecs, gallery.rows.as_slice(), dim, |qi, r, dot| {
        collectors[qi].push(r, dot * inv_t[r] * live[qi].inv_norm);
    });

    let mut survivors = collectors
        .into_iter()
        .map(CandidateCollector::finish)
        .collect::<Vec<_>>()
        .into_iter();
    prepared
        .into_iter()
        .map(|p| {
            let p = p?;
            let rows = survivors.next().expect("collector per live query");
            let scored = rows.into_iter().map(|i| (i, gallery.exact(&p.q, i))).collect();
            let mut list = into_list(scored, p.excl);
            list.entries.truncate(k);
            Ok(list)
        })
        .collect()
}
