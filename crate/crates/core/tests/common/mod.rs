//! Independent reference implementations used as test oracles. Nothing here
//! calls into the library's scoring or metric code.

#![allow(dead_code)]

use std::collections::HashSet;

/// Neumaier-compensated sum of exact `f32` products.
fn compensated_dot(a: &[f32], b: &[f32]) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let p = f64::from(x) * f64::from(y);
        let t = sum + p;
        if sum.abs() >= p.abs() {
            c += (sum - t) + p;
        } else {
            c += (p - t) + sum;
        }
        sum = t;
    }
    sum + c
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let na = compensated_dot(a, a).sqrt();
    let nb = compensated_dot(b, b).sqrt();
    compensated_dot(a, b) / na / nb
}

/// All non-excluded rows with their cosine, best first, ties by index.
pub fn rank(q: &[f32], rows: &[Vec<f32>], excluded: &[usize]) -> Vec<(usize, f64)> {
    let mut v: Vec<(usize, f64)> = rows
        .iter()
        .enumerate()
        .filter(|(i, _)| !excluded.contains(i))
        .map(|(i, r)| (i, cosine(q, r)))
        .collect();
    v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    v
}

/// Precision-at-cutoff form of AP@k: sum over relevant ranks i <= k of
/// |top_i ∩ G| / i, recounted from scratch at each rank.
pub fn average_precision(ranking: &[usize], gt: &[usize], k: usize) -> f64 {
    let g: HashSet<usize> = gt.iter().copied().collect();
    let mut total = 0.0;
    for i in 1..=k.min(ranking.len()) {
        if g.contains(&ranking[i - 1]) {
            let hits = ranking[..i].iter().filter(|r| g.contains(r)).count();
            total += hits as f64 / i as f64;
        }
    }
    total / k.min(g.len()) as f64
}

pub fn hit(ranking: &[usize], gt: &[usize], k: usize) -> f64 {
    if ranking.iter().take(k).any(|r| gt.contains(r)) {
        1.0
    } else {
        0.0
    }
}

pub fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Gaps below this are treated as ties whose order may legitimately differ.
pub const FLIP_GAP: f64 = 1e-9;

/// Compares a fast top-k list against the oracle ranking. Position
/// mismatches are allowed only between items whose oracle scores differ by
/// less than `FLIP_GAP`; those are counted and returned.
pub fn compare_prefix(fast: &[usize], oracle: &[(usize, f64)], k: usize) -> Result<usize, String> {
    let k = k.min(oracle.len());
    if fast.len() != k {
        return Err(format!("fast list has {} entries, expected {k}", fast.len()));
    }
    let score = |id: usize| oracle.iter().find(|(i, _)| *i == id).map(|(_, s)| *s);
    let mut flagged = 0;
    for (pos, (&f, &(o, os))) in fast.iter().zip(oracle).enumerate() {
        if f == o {
            continue;
        }
        let fs = score(f).ok_or_else(|| format!("rank {pos}: {f} is not a candidate"))?;
        if (fs - os).abs() >= FLIP_GAP {
            return Err(format!(
                "rank {pos}: got {f} ({fs:.17}), oracle has {o} ({os:.17})"
            ));
        }
        flagged += 1;
    }
    Ok(flagged)
}
