//! Embedding bundles: precomputed query and gallery feature channels plus
//! ground-truth annotations, stored as a directory of raw binary32 matrices
//! described by a JSON manifest.

mod format;
mod synth;
mod validate;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::matrix::{CaptionTensor, Matrix};

pub use format::{load_bundle, read_bundle, write_bundle, FileNames};
pub use synth::{synth_bundle, synth_with_plan, SynthSpec};
pub use validate::{validate, ValidationReport, Violation};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Exactly one ground-truth target per query.
    SingleGt,
    /// One or more ground-truth targets per query.
    MultiGt,
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Protocol::SingleGt => "single_gt",
            Protocol::MultiGt => "multi_gt",
        })
    }
}

impl std::str::FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single_gt" => Ok(Protocol::SingleGt),
            "multi_gt" => Ok(Protocol::MultiGt),
            other => Err(format!("unknown protocol `{other}` (single_gt|multi_gt)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Dtype {
    #[default]
    #[serde(rename = "float32_le")]
    Float32Le,
}

/// A named half-open range `[start, end)` of query indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub name: String,
    pub start: usize,
    pub end: usize,
}

impl Category {
    pub fn new(name: impl Into<String>, start: usize, end: usize) -> Self {
        Self {
            name: name.into(),
            start,
            end,
        }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dataset: String,
    pub dim: usize,
    pub gallery_count: usize,
    pub query_count: usize,
    pub captions_per_target: usize,
    pub captions_per_query: usize,
    pub protocol: Protocol,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<Category>>,
    #[serde(default)]
    pub dtype: Dtype,
    pub files: BTreeMap<String, String>,
}

/// Query-side channels. `qm` holds one row per modified caption, before averaging.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryChannels {
    pub qv: Matrix,
    pub qf: Matrix,
    pub qm: CaptionTensor,
}

/// Gallery-side channels. `tc` holds one row per caption, before averaging.
#[derive(Debug, Clone, PartialEq)]
pub struct GalleryChannels {
    pub tv: Matrix,
    pub tc: CaptionTensor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub gt_ids: Vec<usize>,
    pub reference_id: Option<usize>,
    pub subset_ids: Option<Vec<usize>>,
}

impl Annotation {
    pub fn single(gt: usize) -> Self {
        Self {
            gt_ids: vec![gt],
            reference_id: None,
            subset_ids: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub manifest: Manifest,
    pub queries: QueryChannels,
    pub gallery: GalleryChannels,
    pub annotations: Vec<Annotation>,
}

impl Bundle {
    /// Assembles a bundle and derives its manifest from the channel shapes.
    pub fn from_parts(
        dataset: impl Into<String>,
        protocol: Protocol,
        categories: Option<Vec<Category>>,
        queries: QueryChannels,
        gallery: GalleryChannels,
        annotations: Vec<Annotation>,
    ) -> Self {
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            dataset: dataset.into(),
            dim: gallery.tv.cols(),
            gallery_count: gallery.tv.rows(),
            query_count: queries.qv.rows(),
            captions_per_target: gallery.tc.captions(),
            captions_per_query: queries.qm.captions(),
            protocol,
            categories,
            dtype: Dtype::Float32Le,
            files: FileNames::default().to_map(),
        };
        Self {
            manifest,
            queries,
            gallery,
            annotations,
        }
    }

    pub fn dim(&self) -> usize {
        self.manifest.dim
    }

    pub fn gallery_count(&self) -> usize {
        self.manifest.gallery_count
    }

    pub fn query_count(&self) -> usize {
        self.manifest.query_count
    }

    /// Rebuilds the manifest's shape fields after channels were replaced.
    pub fn refresh_manifest(&mut self) {
        let m = &mut self.manifest;
        m.dim = self.gallery.tv.cols();
        m.gallery_count = self.gallery.tv.rows();
        m.query_count = self.queries.qv.rows();
        m.captions_per_target = self.gallery.tc.captions();
        m.captions_per_query = self.queries.qm.captions();
    }

    /// Field-by-field bitwise equality of all scalars and metadata.
    pub fn bit_eq(&self, other: &Bundle) -> bool {
        self.manifest == other.manifest
            && self.annotations == other.annotations
            && self.queries.qv.bit_eq(&other.queries.qv)
            && self.queries.qf.bit_eq(&other.queries.qf)
            && self.queries.qm.bit_eq(&other.queries.qm)
            && self.gallery.tv.bit_eq(&other.gallery.tv)
            && self.gallery.tc.bit_eq(&other.gallery.tc)
    }

    pub fn has_subsets(&self) -> bool {
        !self.annotations.is_empty() && self.annotations.iter().all(|a| a.subset_ids.is_some())
    }
}
