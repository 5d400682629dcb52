//! Blocked `f32` dot-product kernels used to pre-score the gallery.
//!
//! Scores from here are approximate: they only decide which gallery rows are
//! worth rescoring exactly. [`error_margin`] bounds their deviation from the
//! exact cosine so candidate selection can never lose a true top-k row.

pub(crate) const LANES: usize = 8;

/// Queries scored together against each gallery row pair.
const QUERY_GROUP: usize = 4;

/// Upper bound on `|approx - exact|` for a cosine score at dimension `dim`.
///
/// Each lane accumulates `dim / LANES` products, followed by a 3-level
/// horizontal reduction, a scalar tail of at most `LANES - 1` terms, and
/// three scaling multiplications. Every step contributes at most one unit
/// roundoff `u = EPSILON / 2` relative to `sum |q_i t_i| <= |q||t|`; without
/// FMA the products add one rounding each. The margin doubles that count.
pub(crate) fn error_margin(dim: usize) -> f32 {
    let steps = 2 * (dim / LANES) + LANES + 8;
    steps as f32 * f32::EPSILON
}

/// Exact-product dot in `f64`, accumulated in index order.
#[inline]
pub(crate) fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

#[cfg(target_arch = "x86_64")]
fn has_avx2_fma() -> bool {
    is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma")
}

/// Calls `sink(query, row, dot)` exactly once for every query in `queries`
/// and every row of the row-major `gallery` (rows of length `dim`). The
/// gallery is walked in blocks of rows; inside a block, groups of four
/// queries are scored against row pairs so each loaded chunk feeds eight
/// accumulators. Calls for one query arrive in ascending row order within a
/// block, and blocks are visited in ascending order.
pub(crate) fn scan<F: FnMut(usize, usize, f32)>(
    queries: &[&[f32]],
    gallery: &[f32],
    dim: usize,
    sink: F,
) {
    #[cfg(target_arch = "x86_64")]
    {
        if has_avx2_fma() {
            // SAFETY: the required CPU features were detected at runtime.
            unsafe { avx2::scan(queries, gallery, dim, sink) };
            return;
        }
    }
    portable::scan(queries, gallery, dim, sink)
}

macro_rules! scan_body {
    ($queries:expr, $gallery:expr, $dim:expr, $sink:expr, $dot4x2:path, $dot:path) => {{
        let queries = $queries;
        let dim = $dim;
        let mut sink = $sink;
        if dim == 0 {
            return;
        }
        let n_rows = $gallery.len() / dim;
        let groups = queries.len() / QUERY_GROUP;
        let block = super::row_block(dim);
        let mut start = 0;
        while start < n_rows {
            let end = (start + block).min(n_rows);
            let row = |r: usize| &$gallery[r * dim..(r + 1) * dim];
            for g in 0..groups {
                let base = g * QUERY_GROUP;
                let qs = [queries[base], queries[base + 1], queries[base + 2], queries[base + 3]];
                let mut r = start;
                while r + 1 < end {
                    let s = $dot4x2(qs, row(r), row(r + 1));
                    for j in 0..QUERY_GROUP {
                        sink(base + j, r, s[j]);
                        sink(base + j, r + 1, s[QUERY_GROUP + j]);
                    }
                    r += 2;
                }
                if r < end {
                    for (j, q) in qs.iter().enumerate() {
                        sink(base + j, r, $dot(q, row(r)));
                    }
                }
            }
            for (qi, q) in queries.iter().enumerate().skip(groups * QUERY_GROUP) {
                for r in start..end {
                    sink(qi, r, $dot(q, row(r)));
                }
            }
            start = end;
        }
    }};
}

/// Gallery rows per block: about 128 KiB, so a block stays in L2 while every
/// query group sweeps it, and each group's four queries stay in L1.
fn row_block(dim: usize) -> usize {
    ((32 * 1024) / dim.max(1)).clamp(2, 256) & !1
}

mod portable {
    use super::{LANES, QUERY_GROUP};

    #[inline(always)]
    fn hsum(acc: [f32; LANES]) -> f32 {
        let a = [acc[0] + acc[4], acc[1] + acc[5], acc[2] + acc[6], acc[3] + acc[7]];
        let b = [a[0] + a[2], a[1] + a[3]];
        b[0] + b[1]
    }

    #[inline(always)]
    pub(super) fn dot(a: &[f32], b: &[f32]) -> f32 {
        let mut acc = [0.0f32; LANES];
        let ca = a.chunks_exact(LANES);
        let cb = b.chunks_exact(LANES);
        let (ta, tb) = (ca.remainder(), cb.remainder());
        for (x, y) in ca.zip(cb) {
            for l in 0..LANES {
                acc[l] += x[l] * y[l];
            }
        }
        let mut s = hsum(acc);
        for (x, y) in ta.iter().zip(tb) {
            s += x * y;
        }
        s
    }

    #[inline(always)]
    pub(super) fn dot4x2(q: [&[f32]; QUERY_GROUP], r0: &[f32], r1: &[f32]) -> [f32; 2 * QUERY_GROUP] {
        let mut out = [0.0; 2 * QUERY_GROUP];
        for j in 0..QUERY_GROUP {
            out[j] = dot(q[j], r0);
            out[QUERY_GROUP + j] = dot(q[j], r1);
        }
        out
    }

    pub(super) fn scan<F: FnMut(usize, usize, f32)>(
        queries: &[&[f32]],
        gallery: &[f32],
        dim: usize,
        sink: F,
    ) {
        scan_body!(queries, gallery, dim, sink, dot4x2, dot)
    }
}

#[cfg(target_arch = "x86_64")]
mod avx2 {
    use std::arch::x86_64::*;

    use super::{LANES, QUERY_GROUP};

    #[inline(always)]
    unsafe fn hsum(v: __m256) -> f32 {
        let lo = _mm256_castps256_ps128(v);
        let hi = _mm256_extractf128_ps(v, 1);
        let s = _mm_add_ps(lo, hi);
        let s = _mm_add_ps(s, _mm_movehl_ps(s, s));
        let s = _mm_add_ss(s, _mm_shuffle_ps(s, s, 0b01));
        _mm_cvtss_f32(s)
    }

    #[inline]
    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn dot(a: &[f32], b: &[f32]) -> f32 {
        let n = a.len().min(b.len());
        let body = n - n % LANES;
        let mut acc = _mm256_setzero_ps();
        let mut i = 0;
        while i < body {
            let x = _mm256_loadu_ps(a.as_ptr().add(i));
            let y = _mm256_loadu_ps(b.as_ptr().add(i));
            acc = _mm256_fmadd_ps(x, y, acc);
            i += LANES;
        }
        let mut s = hsum(acc);
        while i < n {
            s = a[i].mul_add(b[i], s);
            i += 1;
        }
        s
    }

    #[inline]
    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn dot4x2(
        q: [&[f32]; QUERY_GROUP],
        r0: &[f32],
        r1: &[f32],
    ) -> [f32; 2 * QUERY_GROUP] {
        let n = r0.len();
        let body = n - n % LANES;
        let mut a = [_mm256_setzero_ps(); 2 * QUERY_GROUP];
        let mut i = 0;
        while i < body {
            let t0 = _mm256_loadu_ps(r0.as_ptr().add(i));
            let t1 = _mm256_loadu_ps(r1.as_ptr().add(i));
            for j in 0..QUERY_GROUP {
                let x = _mm256_loadu_ps(q[j].as_ptr().add(i));
                a[j] = _mm256_fmadd_ps(x, t0, a[j]);
                a[QUERY_GROUP + j] = _mm256_fmadd_ps(x, t1, a[QUERY_GROUP + j]);
            }
            i += LANES;
        }
        let mut out = [0.0f32; 2 * QUERY_GROUP];
        for j in 0..QUERY_GROUP {
            let mut s0 = hsum(a[j]);
            let mut s1 = hsum(a[QUERY_GROUP + j]);
            for t in body..n {
                s0 = q[j][t].mul_add(r0[t], s0);
                s1 = q[j][t].mul_add(r1[t], s1);
            }
            out[j] = s0;
            out[QUERY_GROUP + j] = s1;
        }
        out
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn scan<F: FnMut(usize, usize, f32)>(
        queries: &[&[f32]],
        gallery: &[f32],
        dim: usize,
        sink: F,
    ) {
        for q in queries {
            assert_eq!(q.len(), dim, "query width must match the gallery");
        }
        scan_body!(queries, gallery, dim, sink, dot4x2, dot)
    }
}
