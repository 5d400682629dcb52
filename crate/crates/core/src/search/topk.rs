use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

/// `f32` with a total order, for heap keys.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Key(f32);

impl Eq for Key {}

impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Streams approximate scores and keeps every row that may still belong to
/// the exact top `k`.
///
/// A bounded min-heap tracks the `k`-th best approximate score `A`. If each
/// approximate score is within `margin` of the exact one, every exact top-k
/// row has approximate score `>= A - 2 * margin`, so rows below that line are
/// dropped and everything else is kept for exact rescoring.
pub(crate) struct CandidateCollector<'a> {
    k: usize,
    slack: f32,
    heap: BinaryHeap<Reverse<Key>>,
    kept: Vec<(u32, f32)>,
    prune_at: usize,
    excluded: &'a [usize],
}

impl<'a> CandidateCollector<'a> {
    /// `excluded` must be sorted.
    pub(crate) fn new(k: usize, margin: f32, excluded: &'a [usize]) -> Self {
        debug_assert!(k > 0);
        debug_assert!(excluded.windows(2).all(|w| w[0] < w[1]));
        Self {
            k,
            slack: 2.0 * margin,
            heap: BinaryHeap::with_capacity(k + 1),
            kept: Vec::with_capacity(2 * k + 16),
            prune_at: 4 * k + 256,
            excluded,
        }
    }

    #[inline]
    fn threshold(&self) -> f32 {
        if self.heap.len() < self.k {
            f32::NEG_INFINITY
        } else {
            self.heap.peek().map_or(f32::NEG_INFINITY, |r| r.0 .0) - self.slack
        }
    }

    #[inline]
    pub(crate) fn push(&mut self, row: usize, score: f32) {
        if score < self.threshold() {
            return;
        }
        if self.excluded.binary_search(&row).is_ok() {
            return;
        }
        if self.heap.len() < self.k {
            self.heap.push(Reverse(Key(score)));
        } else if score > self.heap.peek().map_or(f32::NEG_INFINITY, |r| r.0 .0) {
            self.heap.pop();
            self.heap.push(Reverse(Key(score)));
        }
        self.kept.push((row as u32, score));
        if self.kept.len() >= self.prune_at {
            self.prune();
            self.prune_at = (2 * self.kept.len()).max(4 * self.k + 256);
        }
    }

    fn prune(&mut self) {
        let t = self.threshold();
        self.kept.retain(|&(_, s)| s >= t);
    }

    /// Rows that survived the final threshold, in ascending row order.
    pub(crate) fn finish(mut self) -> Vec<usize> {
        self.prune();
        let mut rows: Vec<usize> = self.kept.into_iter().map(|(r, _)| r as usize).collect();
        rows.sort_unstable();
        rows
    }
}

/// Descending score, ties broken by ascending index.
#[inline]
pub(crate) fn rank_order(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}
