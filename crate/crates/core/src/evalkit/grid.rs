use std::fmt::Write as _;

use serde::Serialize;

use super::{evaluate, evaluate_many, RunConfig};
use crate::bundle::Bundle;
use crate::error::{Error, Result};
use crate::fusion::{apply_ablation, Channel, ChannelSet, FusionWeights};
use crate::metrics::{MetricKey, MetricValues};
use crate::report::EvalReport;

/// Simplex grid over `(alpha, beta)` with `alpha + beta <= 1`, repeated for
/// each gallery weight in `gammas`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    /// Must be `1 / n` for a positive integer `n`.
    pub step: f64,
    pub gammas: Vec<f64>,
}

impl SweepGrid {
    pub fn new(step: f64, gammas: Vec<f64>) -> Self {
        Self { step, gammas }
    }

    fn divisions(&self) -> Result<usize> {
        let n = (1.0 / self.step).round();
        if !(self.step > 0.0 && self.step <= 1.0) || (n * self.step - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidGrid(format!(
                "step {} does not divide 1 into equal parts",
                self.step
            )));
        }
        Ok(n as usize)
    }

    /// Grid points in output order: gamma outermost, then alpha, then beta.
    pub fn points(&self) -> Result<Vec<(f64, f64, f64)>> {
        let n = self.divisions()?;
        if self.gammas.is_empty() {
            return Err(Error::InvalidGrid("no gamma values".into()));
        }
        if let Some(g) = self.gammas.iter().find(|g| !(0.0..=1.0).contains(*g)) {
            return Err(Error::InvalidGrid(format!("gamma {g} is outside [0, 1]")));
        }
        let mut out = Vec::new();
        for &gamma in &self.gammas {
            for i in 0..=n {
                for j in 0..=n - i {
                    out.push((i as f64 / n as f64, j as f64 / n as f64, gamma));
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
}

/// Headline value of a report: the category average when there is one.
fn headline(report: &EvalReport, key: &MetricKey) -> Option<f64> {
    report.average.as_ref().unwrap_or(&report.metrics).get(key).copied()
}

fn metric_rows(out: &mut String, prefix: &str, report: &EvalReport) {
    let mut put = |label: &str, values: &MetricValues| {
        for (key, v) in values {
            let _ = writeln!(out, "{prefix},{label}{},{},{v:.6}", key.metric, key.k);
        }
    };
    put("", &report.metrics);
    if let Some(cats) = &report.categories {
        for (name, c) in cats {
            put(&format!("{name}/"), &c.metrics);
        }
    }
    if let Some(avg) = &report.average {
        put("avg/", avg);
    }
}

impl SweepResult {
    /// One row per cell and metric: `alpha,beta,gamma,metric,k,value`.
    /// Category rows are labelled `<category>/<metric>` and the category
    /// average `avg/<metric>`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,beta,gamma,metric,k,value\n");
        for c in &self.cells {
            let prefix = format!("{},{},{}", c.alpha, c.beta, c.gamma);
            metric_rows(&mut out, &prefix, &c.report);
        }
        out
    }

    /// First cell with the highest headline value of `key`.
    pub fn best(&self, key: &MetricKey) -> Option<&SweepCell> {
        let mut best: Option<(&SweepCell, f64)> = None;
        for c in &self.cells {
            if let Some(v) = headline(&c.report, key) {
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((c, v));
                }
            }
        }
        best.map(|(c, _)| c)
    }
}

/// Evaluates every grid point with the other settings of `base`.
pub fn sweep(bundle: &Bundle, grid: &SweepGrid, base: &RunConfig) -> Result<SweepResult> {
    let points = grid.points()?;
    let weights: Vec<FusionWeights> = points
        .iter()
        .map(|&(alpha, beta, gamma)| FusionWeights {
            alpha,
            beta,
            gamma,
            ..base.weights
        })
        .collect();
    let reports = super::with_pool(base.threads, || evaluate_many(bundle, base, &weights))??;
    Ok(SweepResult {
        cells: points
            .into_iter()
            .zip(reports)
            .map(|((alpha, beta, gamma), report)| SweepCell {
                alpha,
                beta,
                gamma,
                report,
            })
            .collect(),
    })
}

/// Channel-removal rows: no visual channels, no semantic channels, then
/// each channel on its own.
pub fn ablation_preset() -> Vec<(String, ChannelSet)> {
    use Channel::*;
    [
        ("no_visual", ChannelSet::of(&[Qf, Qv, Tv])),
        ("no_semantic", ChannelSet::of(&[Qm, Tc])),
        ("no_reference_image", ChannelSet::of(&[Qv])),
        ("no_fine_grained", ChannelSet::of(&[Qf])),
        ("no_query_captions", ChannelSet::of(&[Qm])),
        ("no_target_image", ChannelSet::of(&[Tv])),
        ("no_target_captions", ChannelSet::of(&[Tc])),
    ]
    .into_iter()
    .map(|(n, s)| (n.to_string(), s))
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub drop: ChannelSet,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationResult {
    /// The unablated configuration first, then one row per drop set.
    pub rows: Vec<AblationRow>,
}

impl AblationResult {
    /// `row,drop,alpha,beta,gamma,metric,k,value`, with effective weights.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,drop,alpha,beta,gamma,metric,k,value\n");
        for r in &self.rows {
            let c = &r.report.config;
            let prefix = format!("{},{},{},{},{}", r.name, r.drop, c.alpha, c.beta, c.gamma);
            metric_rows(&mut out, &prefix, &r.report);
        }
        out
    }

    /// Headline value of `key` for the named row.
    pub fn value(&self, row: &str, key: &MetricKey) -> Option<f64> {
        self.rows.iter().find(|r| r.name == row).and_then(|r| headline(&r.report, key))
    }
}

/// Evaluates `base` and then `base` with each drop set removed, the
/// surviving weights renormalized in proportion.
pub fn ablate(bundle: &Bundle, base: &RunConfig, drops: &[(String, ChannelSet)]) -> Result<AblationResult> {
    let mut names = vec!["full".to_string()];
    let mut sets = vec![ChannelSet::EMPTY];
    let mut weights = vec![base.weights];
    for (name, drop) in drops {
        names.push(name.clone());
        sets.push(*drop);
        weights.push(apply_ablation(&base.weights, *drop)?);
    }
    let reports = super::with_pool(base.threads, || evaluate_many(bundle, base, &weights))??;
    Ok(AblationResult {
        rows: names
            .into_iter()
            .zip(sets)
            .zip(reports)
            .map(|((name, drop), report)| AblationRow { name, drop, report })
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Query,
    Target,
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Side::Query => "query",
            Side::Target => "target",
        })
    }
}

impl std::str::FromStr for Side {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "query" => Ok(Side::Query),
            "target" => Ok(Side::Target),
            other => Err(format!("unknown side `{other}` (query|target)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NcapPoint {
    pub n: usize,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NcapResult {
    pub side: Side,
    pub points: Vec<NcapPoint>,
}

impl NcapResult {
    /// `side,n,metric,k,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("side,n,metric,k,value\n");
        for p in &self.points {
            metric_rows(&mut out, &format!("{},{}", self.side, p.n), &p.report);
        }
        out
    }
}

/// Evaluates `base` averaging only the first `n` captions on one side, for
/// each `n` in `ns`.
pub fn ncap_sweep(bundle: &Bundle, ns: &[usize], side: Side, base: &RunConfig) -> Result<NcapResult> {
    let available = match side {
        Side::Query => bundle.manifest.captions_per_query,
        Side::Target => bundle.manifest.captions_per_target,
    };
    if let Some(&n) = ns.iter().find(|&&n| n == 0 || n > available) {
        return Err(Error::CaptionCount {
            requested: n,
            available,
        });
    }
    let points = ns
        .iter()
        .map(|&n| {
            let mut weights = base.weights;
            match side {
                Side::Query => weights.query_captions_used = Some(n),
                Side::Target => weights.target_captions_used = Some(n),
            }
            let report = evaluate(bundle, &RunConfig { weights, ..base.clone() })?;
            Ok(NcapPoint { n, report })
        })
        .collect::<Result<_>>()?;
    Ok(NcapResult { side, points })
}
