use std::collections::HashSet;
use std::fmt;

use super::{Bundle, Protocol, FORMAT_VERSION};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    UnsupportedVersion(u32),
    ZeroDimension {
        field: &'static str,
    },
    Shape {
        channel: &'static str,
        expected: String,
        actual: String,
    },
    /// First offending coordinate of a channel and the number of bad values in it.
    NonFinite {
        channel: &'static str,
        coordinate: Vec<usize>,
        count: usize,
    },
    AnnotationCount {
        expected: usize,
        actual: usize,
    },
    EmptyGroundTruth {
        query: usize,
    },
    GroundTruthCount {
        query: usize,
        count: usize,
    },
    IndexOutOfRange {
        query: usize,
        field: &'static str,
        index: usize,
        gallery_count: usize,
    },
    DuplicateIndex {
        query: usize,
        field: &'static str,
        index: usize,
    },
    SubsetWithoutGroundTruth {
        query: usize,
    },
    CategoryRange {
        name: String,
        start: usize,
        end: usize,
        query_count: usize,
    },
    CategoryOverlap {
        first: String,
        second: String,
    },
    CategoryGap {
        start: usize,
        end: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnsupportedVersion(v) => {
                write!(f, "format_version {v} is not {FORMAT_VERSION}")
            }
            Violation::ZeroDimension { field } => write!(f, "manifest `{field}` must be positive"),
            Violation::Shape {
                channel,
                expected,
                actual,
            } => write!(f, "shape mismatch in {channel}: expected {expected}, found {actual}"),
            Violation::NonFinite {
                channel,
                coordinate,
                count,
            } => {
                write!(f, "non-finite value at ({channel}")?;
                for c in coordinate {
                    write!(f, ", {c}")?;
                }
                write!(f, ")")?;
                if *count > 1 {
                    write!(f, " and {} more in {channel}", count - 1)?;
                }
                Ok(())
            }
            Violation::AnnotationCount { expected, actual } => {
                write!(f, "expected {expected} annotation records, found {actual}")
            }
            Violation::EmptyGroundTruth { query } => write!(f, "query {query}: empty gt_ids"),
            Violation::GroundTruthCount { query, count } => write!(
                f,
                "query {query}: single_gt protocol requires one gt id, found {count}"
            ),
            Violation::IndexOutOfRange {
                query,
                field,
                index,
                gallery_count,
            } => write!(
                f,
                "query {query}: {field} index {index} out of range [0, {gallery_count})"
            ),
            Violation::DuplicateIndex {
                query,
                field,
                index,
            } => write!(f, "query {query}: duplicate {field} index {index}"),
            Violation::SubsetWithoutGroundTruth { query } => {
                write!(f, "query {query}: subset_ids contain no gt id")
            }
            Violation::CategoryRange {
                name,
                start,
                end,
                query_count,
            } => write!(
                f,
                "category `{name}` range [{start}, {end}) invalid for {query_count} queries"
            ),
            Violation::CategoryOverlap { first, second } => {
                write!(f, "categories `{first}` and `{second}` overlap")
            }
            Violation::CategoryGap { start, end } => {
                write!(f, "queries [{start}, {end}) belong to no category")
            }
        }
    }
}

/// Every violated invariant of a bundle; empty iff the bundle is valid.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate(bundle: &Bundle) -> ValidationReport {
    let mut out = Vec::new();
    let m = &bundle.manifest;

    if m.format_version != FORMAT_VERSION {
        out.push(Violation::UnsupportedVersion(m.format_version));
    }
    for (field, value) in [
        ("dim", m.dim),
        ("gallery_count", m.gallery_count),
        ("query_count", m.query_count),
    ] {
        if value == 0 {
            out.push(Violation::ZeroDimension { field });
        }
    }

    let (k, q, d) = (m.gallery_count, m.query_count, m.dim);
    let qs = &bundle.queries;
    let gs = &bundle.gallery;
    check_shape(&mut out, "t_v", [k, d], [gs.tv.rows(), gs.tv.cols()]);
    check_shape(&mut out, "q_v", [q, d], [qs.qv.rows(), qs.qv.cols()]);
    check_shape(&mut out, "q_f", [q, d], [qs.qf.rows(), qs.qf.cols()]);
    check_shape(
        &mut out,
        "t_c",
        [k, m.captions_per_target, d],
        [gs.tc.items(), gs.tc.captions(), gs.tc.dim()],
    );
    check_shape(
        &mut out,
        "q_m",
        [q, m.captions_per_query, d],
        [qs.qm.items(), qs.qm.captions(), qs.qm.dim()],
    );

    check_finite(&mut out, "t_v", gs.tv.as_slice(), &[gs.tv.cols()]);
    check_finite(&mut out, "t_c", gs.tc.as_slice(), &[gs.tc.captions(), gs.tc.dim()]);
    check_finite(&mut out, "q_v", qs.qv.as_slice(), &[qs.qv.cols()]);
    check_finite(&mut out, "q_f", qs.qf.as_slice(), &[qs.qf.cols()]);
    check_finite(&mut out, "q_m", qs.qm.as_slice(), &[qs.qm.captions(), qs.qm.dim()]);

    check_annotations(bundle, &mut out);

    if let Some(categories) = &m.categories {
        check_categories(categories, q, &mut out);
    }

    ValidationReport { violations: out }
}

fn check_shape<const N: usize>(
    out: &mut Vec<Violation>,
    channel: &'static str,
    expected: [usize; N],
    actual: [usize; N],
) {
    if expected != actual {
        let fmt = |s: [usize; N]| {
            s.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join("x")
        };
        out.push(Violation::Shape {
            channel,
            expected: fmt(expected),
            actual: fmt(actual),
        });
    }
}

/// `inner` lists the trailing extents, so a flat offset can be turned back
/// into a coordinate.
fn check_finite(out: &mut Vec<Violation>, channel: &'static str, data: &[f32], inner: &[usize]) {
    let mut bad = data.iter().enumerate().filter(|(_, x)| !x.is_finite());
    let Some((first, _)) = bad.next() else {
        return;
    };
    let count = 1 + bad.count();
    let mut coordinate = Vec::with_capacity(inner.len() + 1);
    let mut rest = first;
    for &extent in inner.iter().rev() {
        coordinate.push(rest % extent.max(1));
        rest /= extent.max(1);
    }
    coordinate.push(rest);
    coordinate.reverse();
    out.push(Violation::NonFinite {
        channel,
        coordinate,
        count,
    });
}

fn check_annotations(bundle: &Bundle, out: &mut Vec<Violation>) {
    let m = &bundle.manifest;
    let k = m.gallery_count;
    if bundle.annotations.len() != m.query_count {
        out.push(Violation::AnnotationCount {
            expected: m.query_count,
            actual: bundle.annotations.len(),
        });
    }

    for (query, ann) in bundle.annotations.iter().enumerate() {
        if ann.gt_ids.is_empty() {
            out.push(Violation::EmptyGroundTruth { query });
        } else if m.protocol == Protocol::SingleGt && ann.gt_ids.len() != 1 {
            out.push(Violation::GroundTruthCount {
                query,
                count: ann.gt_ids.len(),
            });
        }
        check_ids(out, query, "gt_ids", &ann.gt_ids, k);
        if let Some(r) = ann.reference_id {
            if r >= k {
                out.push(Violation::IndexOutOfRange {
                    query,
                    field: "reference_id",
                    index: r,
                    gallery_count: k,
                });
            }
        }
        if let Some(subset) = &ann.subset_ids {
            check_ids(out, query, "subset_ids", subset, k);
            if !ann.gt_ids.iter().any(|g| subset.contains(g)) {
                out.push(Violation::SubsetWithoutGroundTruth { query });
            }
        }
    }
}

fn check_ids(out: &mut Vec<Violation>, query: usize, field: &'static str, ids: &[usize], k: usize) {
    let mut seen = HashSet::with_capacity(ids.len());
    for &index in ids {
        if index >= k {
            out.push(Violation::IndexOutOfRange {
                query,
                field,
                index,
                gallery_count: k,
            });
        }
        if !seen.insert(index) {
            out.push(Violation::DuplicateIndex {
                query,
                field,
                index,
            });
        }
    }
}

fn check_categories(categories: &[super::Category], q: usize, out: &mut Vec<Violation>) {
    for c in categories {
        if c.start >= c.end || c.end > q {
            out.push(Violation::CategoryRange {
                name: c.name.clone(),
                start: c.start,
                end: c.end,
                query_count: q,
            });
        }
    }
    let mut sorted: Vec<_> = categories.iter().filter(|c| c.start < c.end).collect();
    sorted.sort_by_key(|c| (c.start, c.end));
    let mut covered = 0;
    for pair in sorted.windows(2) {
        if pair[1].start < pair[0].end {
            out.push(Violation::CategoryOverlap {
                first: pair[0].name.clone(),
                second: pair[1].name.clone(),
            });
        }
    }
    for c in &sorted {
        if c.start > covered {
            out.push(Violation::CategoryGap {
                start: covered,
                end: c.start,
            });
        }
        covered = covered.max(c.end);
    }
    if covered < q {
        out.push(Violation::CategoryGap {
            start: covered,
            end: q,
        });
    }
}
