//! Caption averaging and weighted complementary fusion of feature channels.
//!
//! The query vector is `alpha * q_m + beta * q_f + (1 - alpha - beta) * q_v`
//! and each gallery vector is `gamma * t_c + (1 - gamma) * t_v`, where `q_m`
//! and `t_c` are means over per-caption text features. Constituent channels
//! are unit-normalized before they are combined (switchable), and all
//! arithmetic runs in `f64` before the result is rounded to `f32`.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{GalleryChannels, QueryChannels};
use crate::error::{Error, Result};
use crate::matrix::{CaptionTensor, Matrix};

/// Slack allowed on `alpha + beta <= 1` for decimal inputs such as 0.7 + 0.3.
const WEIGHT_SUM_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Channel {
    /// Averaged modified-caption features of the query.
    #[serde(rename = "QM")]
    Qm,
    /// Fine-grained prompt features of the query.
    #[serde(rename = "QF")]
    Qf,
    /// Reference-image features.
    #[serde(rename = "QV")]
    Qv,
    /// Averaged caption features of a gallery image.
    #[serde(rename = "TC")]
    Tc,
    /// Gallery image features.
    #[serde(rename = "TV")]
    Tv,
}

impl Channel {
    pub const ALL: [Channel; 5] = [Channel::Qm, Channel::Qf, Channel::Qv, Channel::Tc, Channel::Tv];

    fn bit(self) -> u8 {
        1 << self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::Qm => "QM",
            Channel::Qf => "QF",
            Channel::Qv => "QV",
            Channel::Tc => "TC",
            Channel::Tv => "TV",
        }
    }

    pub fn is_query(self) -> bool {
        matches!(self, Channel::Qm | Channel::Qf | Channel::Qv)
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Channel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "QM" => Ok(Channel::Qm),
            "QF" => Ok(Channel::Qf),
            "QV" => Ok(Channel::Qv),
            "TC" => Ok(Channel::Tc),
            "TV" => Ok(Channel::Tv),
            other => Err(format!("unknown channel `{other}` (QM|QF|QV|TC|TV)")),
        }
    }
}

/// A set of channels.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct ChannelSet(u8);

impl ChannelSet {
    pub const EMPTY: ChannelSet = ChannelSet(0);
    pub const ALL: ChannelSet = ChannelSet(0b1_1111);
    pub const QUERY: ChannelSet = ChannelSet(0b0_0111);
    pub const TARGET: ChannelSet = ChannelSet(0b1_1000);

    pub fn of(channels: &[Channel]) -> Self {
        channels.iter().fold(Self::EMPTY, |s, &c| s.with(c))
    }

    pub fn contains(self, c: Channel) -> bool {
        self.0 & c.bit() != 0
    }

    pub fn with(self, c: Channel) -> Self {
        ChannelSet(self.0 | c.bit())
    }

    pub fn without(self, c: Channel) -> Self {
        ChannelSet(self.0 & !c.bit())
    }

    pub fn union(self, other: Self) -> Self {
        ChannelSet(self.0 | other.0)
    }

    pub fn difference(self, other: Self) -> Self {
        ChannelSet(self.0 & !other.0)
    }

    pub fn intersection(self, other: Self) -> Self {
        ChannelSet(self.0 & other.0)
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Channel> {
        Channel::ALL.into_iter().filter(move |c| self.contains(*c))
    }
}

impl Serialize for ChannelSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl fmt::Debug for ChannelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

impl fmt::Display for ChannelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("none");
        }
        let names: Vec<_> = self.iter().map(Channel::name).collect();
        f.write_str(&names.join("+"))
    }
}

impl FromStr for ChannelSet {
    type Err = String;

    /// Accepts `QF,QV`, `QF+QV`, or `none`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.is_empty() || s.eq_ignore_ascii_case("none") {
            return Ok(ChannelSet::EMPTY);
        }
        s.split([',', '+'])
            .map(str::parse::<Channel>)
            .try_fold(ChannelSet::EMPTY, |set, c| Ok(set.with(c?)))
    }
}

/// Fusion configuration: channel weights, channel mask, caption counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionWeights {
    /// Weight of the averaged modified-caption channel.
    pub alpha: f64,
    /// Weight of the fine-grained channel; the reference image gets `1 - alpha - beta`.
    pub beta: f64,
    /// Weight of the gallery caption channel; gallery images get `1 - gamma`.
    pub gamma: f64,
    /// Enabled channels.
    pub mask: ChannelSet,
    /// Leading query captions averaged into `q_m`; `None` uses all of them.
    pub query_captions_used: Option<usize>,
    /// Leading gallery captions averaged into `t_c`; `None` uses all of them.
    pub target_captions_used: Option<usize>,
    /// Permit `alpha + beta > 1`, which gives the reference image a negative weight.
    pub allow_negative_residual: bool,
    /// Unit-normalize each channel before the weighted sum.
    pub normalize_channels: bool,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self::semantic_dominant()
    }
}

impl FusionWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        Self {
            alpha,
            beta,
            gamma,
            mask: ChannelSet::ALL,
            query_captions_used: None,
            target_captions_used: None,
            allow_negative_residual: false,
            normalize_channels: true,
        }
    }

    /// Weights for benchmarks with long, complex modification texts:
    /// alpha = 0.6, beta = 0.4, gamma = 0.2.
    pub fn semantic_dominant() -> Self {
        Self::new(0.6, 0.4, 0.2)
    }

    /// Weights for benchmarks where the reference image dominates:
    /// alpha = 0.2, beta = 0.6, gamma = 0.1.
    pub fn visual_dominant() -> Self {
        Self::new(0.2, 0.6, 0.1)
    }

    pub fn with_mask(mut self, mask: ChannelSet) -> Self {
        self.mask = mask;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !w.is_finite() || !(0.0..=1.0).contains(&w) {
                return Err(Error::InvalidWeights(format!("{name} = {w} is outside [0, 1]")));
            }
        }
        if !self.allow_negative_residual && self.alpha + self.beta > 1.0 + WEIGHT_SUM_SLACK {
            return Err(Error::InvalidWeights(format!(
                "alpha + beta = {} exceeds 1 (reference-image weight would be negative)",
                self.alpha + self.beta
            )));
        }
        if self.query_captions_used == Some(0) || self.target_captions_used == Some(0) {
            return Err(Error::InvalidWeights("caption counts must be positive".into()));
        }
        if self.mask.intersection(ChannelSet::QUERY).is_empty() {
            return Err(Error::NoChannel("query"));
        }
        if self.mask.intersection(ChannelSet::TARGET).is_empty() {
            return Err(Error::NoChannel("target"));
        }
        Ok(())
    }

    /// Per-channel coefficients after masking, renormalized within the query
    /// group and within the target group so each sums to 1.
    pub fn coefficients(&self) -> Result<Coefficients> {
        self.validate()?;
        let mut residual = 1.0 - self.alpha - self.beta;
        // rounding residue such as 1 - 0.7 - 0.3 must not switch a channel on
        if residual.abs() < WEIGHT_SUM_SLACK {
            residual = 0.0;
        }
        let mask = |c: Channel, w: f64| if self.mask.contains(c) { w } else { 0.0 };
        let [qm, qf, qv] = renormalize(
            [
                mask(Channel::Qm, self.alpha),
                mask(Channel::Qf, self.beta),
                mask(Channel::Qv, residual),
            ],
            "query",
        )?;
        let [tc, tv] = renormalize(
            [mask(Channel::Tc, self.gamma), mask(Channel::Tv, 1.0 - self.gamma)],
            "target",
        )?;
        Ok(Coefficients { qm, qf, qv, tc, tv })
    }
}

fn renormalize<const N: usize>(w: [f64; N], group: &str) -> Result<[f64; N]> {
    let sum: f64 = w.iter().sum();
    if !sum.is_finite() || sum <= 0.0 {
        return Err(Error::InvalidWeights(format!(
            "enabled {group} channels carry no weight"
        )));
    }
    // `+ 0.0` turns -0.0 into 0.0 so that echoed configs print identically
    Ok(w.map(|x| x / sum + 0.0))
}

/// Effective weight of every channel; zero for masked channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub qm: f64,
    pub qf: f64,
    pub qv: f64,
    pub tc: f64,
    pub tv: f64,
}

impl Coefficients {
    pub fn get(&self, c: Channel) -> f64 {
        match c {
            Channel::Qm => self.qm,
            Channel::Qf => self.qf,
            Channel::Qv => self.qv,
            Channel::Tc => self.tc,
            Channel::Tv => self.tv,
        }
    }

    /// Channels with a non-zero effective weight.
    pub fn active(&self) -> ChannelSet {
        Channel::ALL
            .into_iter()
            .filter(|&c| self.get(c) != 0.0)
            .fold(ChannelSet::EMPTY, ChannelSet::with)
    }
}

/// Masks the channels in `drop` and renormalizes the surviving weights,
/// preserving their ratios within the query and target groups.
pub fn apply_ablation(w: &FusionWeights, drop: ChannelSet) -> Result<FusionWeights> {
    let mask = w.mask.difference(drop);
    if mask.intersection(ChannelSet::QUERY).is_empty() {
        return Err(Error::NoChannel("query"));
    }
    if mask.intersection(ChannelSet::TARGET).is_empty() {
        return Err(Error::NoChannel("target"));
    }
    let c = FusionWeights { mask, ..*w }.coefficients()?;
    Ok(FusionWeights {
        alpha: c.qm,
        beta: c.qf,
        gamma: c.tc,
        mask,
        ..*w
    })
}

fn norm_f64(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

fn check_finite(v: &[f32], what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Returns `v / |v|`.
pub fn unit_normalize(v: &[f32]) -> Result<Vec<f32>> {
    check_finite(v, "vector")?;
    let n = norm_f64(v);
    if n == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(v.iter().map(|&x| (f64::from(x) / n) as f32).collect())
}

/// Unit-normalized mean of the first `n_used` unit-normalized rows of a
/// row-major `N x dim` block.
pub fn mean_caption_features(rows: &[f32], dim: usize, n_used: usize) -> Result<Vec<f32>> {
    caption_mean(rows, dim, n_used, true)
}

pub(crate) fn caption_mean(
    rows: &[f32],
    dim: usize,
    n_used: usize,
    normalize: bool,
) -> Result<Vec<f32>> {
    let available = rows.len().checked_div(dim).unwrap_or(0);
    if n_used == 0 || n_used > available {
        return Err(Error::CaptionCount {
            requested: n_used,
            available,
        });
    }
    let mut acc = vec![0.0f64; dim];
    for row in rows.chunks_exact(dim).take(n_used) {
        check_finite(row, "caption features")?;
        let scale = if normalize {
            let n = norm_f64(row);
            if n == 0.0 {
                return Err(Error::ZeroVector);
            }
            1.0 / n
        } else {
            1.0
        };
        for (a, &x) in acc.iter_mut().zip(row) {
            *a += f64::from(x) * scale;
        }
    }
    let inv_n = 1.0 / n_used as f64;
    acc.iter_mut().for_each(|a| *a *= inv_n);
    if normalize {
        let n = acc.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::ZeroVector);
        }
        acc.iter_mut().for_each(|a| *a /= n);
    } else if acc.iter().all(|&a| a == 0.0) {
        return Err(Error::ZeroVector);
    }
    Ok(acc.into_iter().map(|a| a as f32).collect())
}

/// Weighted sum of (already prepared) channel vectors; channels with a zero
/// coefficient are skipped entirely, so a single surviving channel with
/// coefficient 1 is reproduced bit for bit.
fn weighted_sum(parts: &[(f64, Option<&[f32]>, &'static str)], dim: usize) -> Result<Vec<f32>> {
    let mut acc = vec![0.0f64; dim];
    let mut any = false;
    for &(w, v, name) in parts {
        if w == 0.0 {
            continue;
        }
        let v = v.ok_or_else(|| {
            Error::Incompatible(format!("channel {name} has weight {w} but is absent"))
        })?;
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: v.len(),
            });
        }
        check_finite(v, name)?;
        any = true;
        for (a, &x) in acc.iter_mut().zip(v) {
            *a += w * f64::from(x);
        }
    }
    if !any {
        return Err(Error::NoChannel("weighted"));
    }
    Ok(acc.into_iter().map(|a| a as f32).collect())
}

/// `q = alpha * q_m + beta * q_f + (1 - alpha - beta) * q_v` with masked
/// channels removed and the survivors renormalized. Inputs are expected to be
/// unit-normalized already; the output is not re-normalized.
pub fn fuse_query(
    q_m: Option<&[f32]>,
    q_f: &[f32],
    q_v: &[f32],
    w: &FusionWeights,
) -> Result<Vec<f32>> {
    let c = w.coefficients()?;
    fuse_query_with(&c, q_m, q_f, q_v)
}

pub(crate) fn fuse_query_with(
    c: &Coefficients,
    q_m: Option<&[f32]>,
    q_f: &[f32],
    q_v: &[f32],
) -> Result<Vec<f32>> {
    weighted_sum(
        &[(c.qm, q_m, "QM"), (c.qf, Some(q_f), "QF"), (c.qv, Some(q_v), "QV")],
        q_f.len(),
    )
}

/// `t = gamma * t_c + (1 - gamma) * t_v` with masked channels removed.
pub fn fuse_target(
    t_c: Option<&[f32]>,
    t_v: &[f32],
    gamma: f64,
    mask: ChannelSet,
) -> Result<Vec<f32>> {
    if !gamma.is_finite() || !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidWeights(format!("gamma = {gamma} is outside [0, 1]")));
    }
    let w = |c: Channel, x: f64| if mask.contains(c) { x } else { 0.0 };
    let [tc, tv] = renormalize([w(Channel::Tc, gamma), w(Channel::Tv, 1.0 - gamma)], "target")
        .map_err(|e| match mask.intersection(ChannelSet::TARGET).is_empty() {
            true => Error::NoChannel("target"),
            false => e,
        })?;
    fuse_target_with(tc, tv, t_c, t_v)
}

pub(crate) fn fuse_target_with(
    tc: f64,
    tv: f64,
    t_c: Option<&[f32]>,
    t_v: &[f32],
) -> Result<Vec<f32>> {
    weighted_sum(&[(tc, t_c, "TC"), (tv, Some(t_v), "TV")], t_v.len())
}

/// Query channels prepared for fusion: caption means computed and every
/// channel normalized (unless normalization is switched off). Channels whose
/// coefficient is zero are left out.
#[derive(Debug, Clone)]
pub struct PreparedQueries {
    pub qm: Option<Matrix>,
    pub qf: Matrix,
    pub qv: Matrix,
}

#[derive(Debug, Clone)]
pub struct PreparedGallery {
    pub tc: Option<Matrix>,
    pub tv: Matrix,
}

fn prepare_rows(m: &Matrix, normalize: bool, what: &'static str) -> Result<Matrix> {
    if !normalize {
        return Ok(m.clone());
    }
    let rows: Vec<Vec<f32>> = (0..m.rows())
        .into_par_iter()
        .map(|i| unit_normalize(m.row(i)).map_err(|e| with_row(e, what, i)))
        .collect::<Result<_>>()?;
    Matrix::from_rows(m.cols(), &rows)
}

fn prepare_captions(
    t: &CaptionTensor,
    n_used: Option<usize>,
    normalize: bool,
    what: &'static str,
) -> Result<Matrix> {
    let n = n_used.unwrap_or(t.captions());
    if n == 0 || n > t.captions() {
        return Err(Error::CaptionCount {
            requested: n,
            available: t.captions(),
        });
    }
    let rows: Vec<Vec<f32>> = (0..t.items())
        .into_par_iter()
        .map(|i| caption_mean(t.item(i), t.dim(), n, normalize).map_err(|e| with_row(e, what, i)))
        .collect::<Result<_>>()?;
    Matrix::from_rows(t.dim(), &rows)
}

fn with_row(e: Error, what: &'static str, row: usize) -> Error {
    Error::Incompatible(format!("{what} row {row}: {e}"))
}

impl PreparedQueries {
    pub fn new(
        q: &QueryChannels,
        c: &Coefficients,
        n_used: Option<usize>,
        normalize: bool,
    ) -> Result<Self> {
        let qm = if c.qm != 0.0 {
            Some(prepare_captions(&q.qm, n_used, normalize, "q_m")?)
        } else {
            None
        };
        let qf = if c.qf != 0.0 { prepare_rows(&q.qf, normalize, "q_f")? } else { q.qf.clone() };
        let qv = if c.qv != 0.0 { prepare_rows(&q.qv, normalize, "q_v")? } else { q.qv.clone() };
        Ok(Self { qm, qf, qv })
    }

    /// Fused query matrix, one row per query.
    pub fn fuse(&self, c: &Coefficients) -> Result<Matrix> {
        let rows: Vec<Vec<f32>> = (0..self.qf.rows())
            .into_par_iter()
            .map(|i| {
                fuse_query_with(
                    c,
                    self.qm.as_ref().map(|m| m.row(i)),
                    self.qf.row(i),
                    self.qv.row(i),
                )
                .map_err(|e| e.at_query(i))
            })
            .collect::<Result<_>>()?;
        Matrix::from_rows(self.qf.cols(), &rows)
    }
}

impl PreparedGallery {
    pub fn new(
        g: &GalleryChannels,
        c: &Coefficients,
        n_used: Option<usize>,
        normalize: bool,
    ) -> Result<Self> {
        let tc = if c.tc != 0.0 {
            Some(prepare_captions(&g.tc, n_used, normalize, "t_c")?)
        } else {
            None
        };
        let tv = if c.tv != 0.0 { prepare_rows(&g.tv, normalize, "t_v")? } else { g.tv.clone() };
        Ok(Self { tc, tv })
    }

    /// Fused gallery matrix, one row per gallery item.
    pub fn fuse(&self, c: &Coefficients) -> Result<Matrix> {
        let dim = self.tv.cols();
        let mut out = Matrix::zeros(self.tv.rows(), dim);
        out.as_mut_slice()
            .par_chunks_mut(dim.max(1))
            .enumerate()
            .try_for_each(|(i, dst)| {
                let row = fuse_target_with(
                    c.tc,
                    c.tv,
                    self.tc.as_ref().map(|m| m.row(i)),
                    self.tv.row(i),
                )?;
                dst.copy_from_slice(&row);
                Ok::<_, Error>(())
            })?;
        Ok(out)
    }
}
