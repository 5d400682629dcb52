//! Evaluation reports and their canonical JSON form: keys sorted, every float
//! printed with six decimals, so equal results give identical bytes.

use std::collections::BTreeMap;
use std::io;

use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::bundle::Protocol;
use crate::fusion::Channel;
use crate::metrics::{Aggregate, CategoryMetrics, MetricValues};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionPolicy {
    /// Every gallery item is a candidate.
    None,
    /// The query's reference image is removed from its candidates.
    #[default]
    ExcludeReference,
}

impl std::fmt::Display for ExclusionPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ExclusionPolicy::None => "none",
            ExclusionPolicy::ExcludeReference => "exclude_reference",
        })
    }
}

/// The configuration that actually produced a report. Weights are the
/// effective ones after masking and renormalization, and caption counts are
/// only present for channels that contributed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfigEcho {
    pub dataset: String,
    pub protocol: Protocol,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub channels: Vec<Channel>,
    pub query_captions: Option<usize>,
    pub target_captions: Option<usize>,
    pub exclusion: ExclusionPolicy,
    pub normalize_channels: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub config: ConfigEcho,
    pub query_count: usize,
    pub metrics: MetricValues,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub categories: Option<BTreeMap<String, CategoryMetrics>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub average: Option<MetricValues>,
}

impl EvalReport {
    pub fn new(config: ConfigEcho, aggregate: Aggregate) -> Self {
        Self {
            config,
            query_count: aggregate.query_count,
            metrics: aggregate.metrics,
            categories: aggregate.categories,
            average: aggregate.average,
        }
    }

    pub fn to_json(&self) -> String {
        to_canonical_json(self)
    }
}

/// Pretty JSON with sorted object keys and floats as `{:.6}`.
pub fn to_canonical_json<T: Serialize>(value: &T) -> String {
    // routing through `Value` sorts every object by key
    let value = serde_json::to_value(value).expect("report values serialize");
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, FixedDecimals::default());
    value.serialize(&mut ser).expect("writing to memory");
    out.push(b'\n');
    String::from_utf8(out).expect("JSON is UTF-8")
}

#[derive(Default)]
struct FixedDecimals<'a>(PrettyFormatter<'a>);

impl Formatter for FixedDecimals<'_> {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{:.6}", value + 0.0)
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, f64::from(value))
    }

    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }

    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }

    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }

    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }

    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }

    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}
