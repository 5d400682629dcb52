//! Retrieval metrics over ranked lists: mAP@k, Recall@k and Recall_subset@k,
//! plus per-category aggregation.
//!
//! AP@k for one query with ground-truth set G is
//!
//! ```text
//! AP@k = 1 / min(k, |G|) * sum_{i=1..k} rel(i) * (#G in top i) / i
//! ```
//!
//! Means over queries are accumulated in `f64` in query-index order.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Serialize, Serializer};

use crate::bundle::{Annotation, Category};
use crate::error::{Error, Result};
use crate::search::RankedList;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Map,
    Recall,
    RecallSubset,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Map => "map",
            Metric::Recall => "recall",
            Metric::RecallSubset => "recall_subset",
        }
    }

    /// k values reported by default for each metric.
    pub fn default_ks(self) -> &'static [usize] {
        match self {
            Metric::Map => &[5, 10, 25, 50],
            Metric::Recall => &[1, 5, 10, 50],
            Metric::RecallSubset => &[1, 2, 3],
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "map" => Ok(Metric::Map),
            "recall" => Ok(Metric::Recall),
            "recall_subset" | "rs" => Ok(Metric::RecallSubset),
            other => Err(format!("unknown metric `{other}` (map|recall|recall_subset)")),
        }
    }
}

/// A metric at one cutoff, e.g. `map@10`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MetricKey {
    pub metric: Metric,
    pub k: usize,
}

impl MetricKey {
    pub fn new(metric: Metric, k: usize) -> Self {
        Self { metric, k }
    }
}

impl fmt::Display for MetricKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.metric, self.k)
    }
}

impl FromStr for MetricKey {
    type Err = String;

    /// Parses `map@10`, `recall@1`, `recall_subset@2`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (m, k) = s
            .split_once('@')
            .ok_or_else(|| format!("expected <metric>@<k>, got `{s}`"))?;
        let k: usize = k.trim().parse().map_err(|_| format!("bad cutoff in `{s}`"))?;
        if k == 0 {
            return Err(format!("cutoff must be positive in `{s}`"));
        }
        Ok(Self::new(m.parse()?, k))
    }
}

impl Serialize for MetricKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

pub type MetricValues = BTreeMap<MetricKey, f64>;

/// AP@k of one ranking.
pub fn ap_at_k(ranking: &RankedList, gt_ids: &[usize], k: usize) -> Result<f64> {
    if gt_ids.is_empty() {
        return Err(Error::Incompatible("empty ground-truth set".into()));
    }
    if k == 0 {
        return Err(Error::KOutOfRange { k, max: usize::MAX });
    }
    let gt: HashSet<usize> = gt_ids.iter().copied().collect();
    let mut hits = 0usize;
    let mut sum = 0.0f64;
    for (i, id) in ranking.ids().take(k).enumerate() {
        if gt.contains(&id) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / k.min(gt.len()) as f64)
}

fn hit_at_k(ranking: &RankedList, gt_ids: &[usize], k: usize) -> bool {
    ranking.ids().take(k).any(|id| gt_ids.contains(&id))
}

fn check_counts(rankings: &[RankedList], annotations: &[Annotation]) -> Result<()> {
    if rankings.len() != annotations.len() {
        return Err(Error::CountMismatch {
            rankings: rankings.len(),
            annotations: annotations.len(),
        });
    }
    Ok(())
}

fn check_ks(ks: &[usize]) -> Result<()> {
    match ks.iter().find(|&&k| k == 0) {
        Some(_) => Err(Error::KOutOfRange { k: 0, max: usize::MAX }),
        None => Ok(()),
    }
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Per-query metric values, one column per requested key.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QueryScores {
    pub columns: BTreeMap<MetricKey, Vec<f64>>,
}

impl QueryScores {
    /// Mean of every column over `range` of queries.
    pub fn means(&self, range: std::ops::Range<usize>) -> MetricValues {
        self.columns
            .iter()
            .map(|(key, col)| (*key, mean(&col[range.clone()])))
            .collect()
    }

    pub fn query_count(&self) -> usize {
        self.columns.values().next().map_or(0, Vec::len)
    }
}

pub fn ap_column(rankings: &[RankedList], annotations: &[Annotation], k: usize) -> Result<Vec<f64>> {
    check_counts(rankings, annotations)?;
    rankings
        .iter()
        .zip(annotations)
        .enumerate()
        .map(|(q, (r, a))| ap_at_k(r, &a.gt_ids, k).map_err(|e| e.at_query(q)))
        .collect()
}

pub fn hit_column(rankings: &[RankedList], annotations: &[Annotation], k: usize) -> Result<Vec<f64>> {
    check_counts(rankings, annotations)?;
    check_ks(&[k])?;
    Ok(rankings
        .iter()
        .zip(annotations)
        .map(|(r, a)| if hit_at_k(r, &a.gt_ids, k) { 1.0 } else { 0.0 })
        .collect())
}

/// mAP@k for each k in `ks`.
pub fn map_at_k(
    rankings: &[RankedList],
    annotations: &[Annotation],
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    ks.iter()
        .map(|&k| Ok((k, mean(&ap_column(rankings, annotations, k)?))))
        .collect()
}

/// Fraction of queries with at least one ground truth in the top k.
pub fn recall_at_k(
    rankings: &[RankedList],
    annotations: &[Annotation],
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    ks.iter()
        .map(|&k| Ok((k, mean(&hit_column(rankings, annotations, k)?))))
        .collect()
}

/// Recall@k over rankings restricted to each query's `subset_ids`.
pub fn recall_subset_at_k(
    subset_rankings: &[RankedList],
    annotations: &[Annotation],
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    if let Some(q) = annotations.iter().position(|a| a.subset_ids.is_none()) {
        return Err(Error::MissingSubset { query: q });
    }
    recall_at_k(subset_rankings, annotations, ks)
}

/// Global metrics, optional per-category metrics, and the unweighted mean
/// of the category values.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub query_count: usize,
    pub metrics: MetricValues,
    pub categories: Option<BTreeMap<String, CategoryMetrics>>,
    pub average: Option<MetricValues>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryMetrics {
    pub query_count: usize,
    pub metrics: MetricValues,
}

/// Aggregates per-query scores globally and per category. The category
/// average weights every category equally regardless of its size.
pub fn aggregate(scores: &QueryScores, categories: Option<&[Category]>) -> Result<Aggregate> {
    let q = scores.query_count();
    let metrics = scores.means(0..q);
    let Some(categories) = categories.filter(|c| !c.is_empty()) else {
        return Ok(Aggregate {
            query_count: q,
            metrics,
            categories: None,
            average: None,
        });
    };

    let mut sorted: Vec<&Category> = categories.iter().collect();
    sorted.sort_by_key(|c| (c.start, c.end));
    for pair in sorted.windows(2) {
        if pair[1].start < pair[0].end {
            return Err(Error::OverlappingCategories(
                pair[0].name.clone(),
                pair[1].name.clone(),
            ));
        }
    }
    if let Some(c) = categories.iter().find(|c| c.end > q || c.start >= c.end) {
        return Err(Error::Incompatible(format!(
            "category `{}` range [{}, {}) invalid for {q} queries",
            c.name, c.start, c.end
        )));
    }

    let mut per = BTreeMap::new();
    let mut sums: BTreeMap<MetricKey, f64> = BTreeMap::new();
    // declaration order fixes the summation order of the average
    for c in categories {
        let m = scores.means(c.start..c.end);
        for (k, v) in &m {
            *sums.entry(*k).or_insert(0.0) += v;
        }
        per.insert(
            c.name.clone(),
            CategoryMetrics {
                query_count: c.len(),
                metrics: m,
            },
        );
    }
    let n = categories.len() as f64;
    let average = sums.into_iter().map(|(k, s)| (k, s / n)).collect();
    Ok(Aggregate {
        query_count: q,
        metrics,
        categories: Some(per),
        average: Some(average),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search::Hit;

    fn list(ids: &[usize]) -> RankedList {
        RankedList {
            query_index: 0,
            entries: ids
                .iter()
                .enumerate()
                .map(|(i, &gallery_index)| Hit {
                    gallery_index,
                    score: 1.0 - i as f64 * 0.01,
                })
                .collect(),
            exclusions: vec![],
        }
    }

    #[test]
    fn ap_hand_case() {
        // gts at ranks 1 and 3: (1/2)(1/1 + 2/3)
        let r = list(&[7, 1, 9, 2, 3, 4]);
        let ap = ap_at_k(&r, &[7, 9], 5).unwrap();
        assert!((ap - 0.833_333_333_333_333_4).abs() < 1e-15);
        assert_eq!(format!("{ap:.6}"), "0.833333");
    }

    #[test]
    fn ap_edges() {
        let r = list(&[4, 1, 2]);
        for k in 1..=3 {
            assert_eq!(ap_at_k(&r, &[4], k).unwrap(), 1.0);
        }
        assert_eq!(ap_at_k(&r, &[8], 3).unwrap(), 0.0);
        assert!(ap_at_k(&r, &[], 3).is_err());
    }

    #[test]
    fn recall_window() {
        let r = vec![list(&[5, 6, 0, 1, 2])];
        let a = vec![Annotation::single(0)];
        let rec = recall_at_k(&r, &a, &[1, 5]).unwrap();
        assert_eq!(rec[&1], 0.0);
        assert_eq!(rec[&5], 1.0);
    }

    #[test]
    fn map_means_and_mismatch() {
        let r = vec![list(&[0, 1]), list(&[1, 0])];
        let a = vec![Annotation::single(0), Annotation::single(5)];
        assert_eq!(map_at_k(&r, &a, &[1]).unwrap()[&1], 0.5);
        assert!(matches!(
            map_at_k(&r, &a[..1], &[1]),
            Err(Error::CountMismatch { .. })
        ));
        assert_eq!(map_at_k(&r[..1], &a[..1], &[2]).unwrap()[&2], 1.0);
    }

    #[test]
    fn subset_recall_requires_subsets() {
        let r = vec![list(&[3, 0, 1, 2, 4, 5])];
        let mut a = vec![Annotation::single(0)];
        assert!(matches!(
            recall_subset_at_k(&r, &a, &[1]),
            Err(Error::MissingSubset { query: 0 })
        ));
        a[0].subset_ids = Some(vec![0, 1, 2, 3, 4, 5]);
        let m = recall_subset_at_k(&r, &a, &[1, 2, 6]).unwrap();
        assert_eq!((m[&1], m[&2], m[&6]), (0.0, 1.0, 1.0));
    }

    #[test]
    fn category_average_is_unweighted() {
        let key = MetricKey::new(Metric::Recall, 10);
        // category a: 1 query hit; b: 3 queries, 1 hit; c: 2 queries, 2 hits
        let col = vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0];
        let scores = QueryScores {
            columns: [(key, col)].into_iter().collect(),
        };
        let cats = [
            Category::new("a", 0, 1),
            Category::new("b", 1, 4),
            Category::new("c", 4, 6),
        ];
        let agg = aggregate(&scores, Some(&cats)).unwrap();
        let unweighted = (1.0 + 1.0 / 3.0 + 1.0) / 3.0;
        let pooled = 4.0 / 6.0;
        assert!((agg.average.as_ref().unwrap()[&key] - unweighted).abs() < 1e-15);
        assert!((agg.metrics[&key] - pooled).abs() < 1e-15);
        assert!((unweighted - pooled).abs() > 0.1);

        let overlapping = [Category::new("a", 0, 3), Category::new("b", 2, 6)];
        assert!(matches!(
            aggregate(&scores, Some(&overlapping)),
            Err(Error::OverlappingCategories(..))
        ));
    }

    #[test]
    fn category_arithmetic() {
        let key = MetricKey::new(Metric::Recall, 10);
        let col = vec![0.2, 0.4, 0.6];
        let scores = QueryScores {
            columns: [(key, col)].into_iter().collect(),
        };
        let cats = [
            Category::new("shirt", 0, 1),
            Category::new("dress", 1, 2),
            Category::new("toptee", 2, 3),
        ];
        let agg = aggregate(&scores, Some(&cats)).unwrap();
        assert!((agg.average.unwrap()[&key] - 0.4).abs() < 1e-15);
        let one = aggregate(&scores, Some(&[Category::new("all", 0, 3)])).unwrap();
        assert_eq!(one.average.unwrap()[&key], one.metrics[&key]);
    }

    #[test]
    fn metric_key_display() {
        assert_eq!(MetricKey::new(Metric::RecallSubset, 2).to_string(), "recall_subset@2");
        assert_eq!("Recall".parse::<Metric>().unwrap(), Metric::Recall);
        assert_eq!("map@25".parse::<MetricKey>().unwrap(), MetricKey::new(Metric::Map, 25));
        assert!("map@0".parse::<MetricKey>().is_err());
        assert!("ndcg@5".parse::<MetricKey>().is_err());
    }
}
