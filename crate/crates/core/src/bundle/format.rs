//! On-disk bundle layout.
//!
//! A bundle directory holds `manifest.json`, `annotations.json` and one raw
//! file per feature channel: row-major IEEE-754 binary32, little-endian, no
//! header. The manifest's `files` map resolves logical channel names to file
//! names so the loader never guesses paths.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, ErrorKind, Write};
use std::path::Path;

use super::{
    validate, Annotation, Bundle, GalleryChannels, Manifest, QueryChannels, FORMAT_VERSION,
};
use crate::error::{Error, Result};
use crate::matrix::{CaptionTensor, Matrix};

const MANIFEST: &str = "manifest.json";

const GALLERY_IMG: &str = "gallery.img";
const GALLERY_CAP: &str = "gallery.cap";
const QUERY_QV: &str = "query.qv";
const QUERY_QF: &str = "query.qf";
const QUERY_QM: &str = "query.qm";
const ANNOTATIONS: &str = "annotations";

/// File names for each logical channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileNames {
    pub gallery_img: String,
    pub gallery_cap: String,
    pub query_qv: String,
    pub query_qf: String,
    pub query_qm: String,
    pub annotations: String,
}

impl Default for FileNames {
    fn default() -> Self {
        Self {
            gallery_img: "gallery.img.bin".into(),
            gallery_cap: "gallery.cap.bin".into(),
            query_qv: "query.qv.bin".into(),
            query_qf: "query.qf.bin".into(),
            query_qm: "query.qm.bin".into(),
            annotations: "annotations.json".into(),
        }
    }
}

impl FileNames {
    pub fn to_map(&self) -> BTreeMap<String, String> {
        [
            (GALLERY_IMG, &self.gallery_img),
            (GALLERY_CAP, &self.gallery_cap),
            (QUERY_QV, &self.query_qv),
            (QUERY_QF, &self.query_qf),
            (QUERY_QM, &self.query_qm),
            (ANNOTATIONS, &self.annotations),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect()
    }

    fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let get = |key: &str| {
            map.get(key).cloned().ok_or_else(|| Error::Format {
                file: MANIFEST.into(),
                message: format!("`files` has no entry for `{key}`"),
            })
        };
        Ok(Self {
            gallery_img: get(GALLERY_IMG)?,
            gallery_cap: get(GALLERY_CAP)?,
            query_qv: get(QUERY_QV)?,
            query_qf: get(QUERY_QF)?,
            query_qm: get(QUERY_QM)?,
            annotations: get(ANNOTATIONS)?,
        })
    }
}

/// Reads a bundle and checks its structure (files present, byte lengths,
/// format version) without checking the data invariants. See [`load_bundle`].
pub fn read_bundle(dir: impl AsRef<Path>) -> Result<Bundle> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let names = FileNames::from_map(&manifest.files)?;
    let (k, q, d) = (manifest.gallery_count, manifest.query_count, manifest.dim);
    let (nt, nq) = (manifest.captions_per_target, manifest.captions_per_query);

    let tv = read_matrix(dir, &names.gallery_img, k, d)?;
    let tc = read_matrix(dir, &names.gallery_cap, k * nt, d)?;
    let qv = read_matrix(dir, &names.query_qv, q, d)?;
    let qf = read_matrix(dir, &names.query_qf, q, d)?;
    let qm = read_matrix(dir, &names.query_qm, q * nq, d)?;

    let ann_path = dir.join(&names.annotations);
    let text = read_file(&ann_path)?;
    let annotations: Vec<Annotation> =
        serde_json::from_slice(&text).map_err(|e| Error::Format {
            file: names.annotations.clone(),
            message: e.to_string(),
        })?;

    Ok(Bundle {
        queries: QueryChannels {
            qv,
            qf,
            qm: CaptionTensor::new(q, nq, d, qm.into_vec())?,
        },
        gallery: GalleryChannels {
            tv,
            tc: CaptionTensor::new(k, nt, d, tc.into_vec())?,
        },
        annotations,
        manifest,
    })
}

/// Reads a bundle and rejects it unless every invariant holds. The error
/// carries the first violation found, with its location.
pub fn load_bundle(dir: impl AsRef<Path>) -> Result<Bundle> {
    let bundle = read_bundle(dir)?;
    let report = validate(&bundle);
    match report.violations.into_iter().next() {
        Some(v) => Err(Error::Invalid(v)),
        None => Ok(bundle),
    }
}

/// Writes `bundle` into `dir` (created if needed). Output bytes depend only
/// on the bundle contents.
pub fn write_bundle(bundle: &Bundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let report = validate(bundle);
    if let Some(v) = report.violations.into_iter().next() {
        return Err(Error::Invalid(v));
    }
    let names = FileNames::from_map(&bundle.manifest.files)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    write_f32(&dir.join(&names.gallery_img), bundle.gallery.tv.as_slice())?;
    write_f32(&dir.join(&names.gallery_cap), bundle.gallery.tc.as_slice())?;
    write_f32(&dir.join(&names.query_qv), bundle.queries.qv.as_slice())?;
    write_f32(&dir.join(&names.query_qf), bundle.queries.qf.as_slice())?;
    write_f32(&dir.join(&names.query_qm), bundle.queries.qm.as_slice())?;

    let mut ann = serde_json::to_vec_pretty(&bundle.annotations).expect("annotations serialize");
    ann.push(b'\n');
    write_bytes(&dir.join(&names.annotations), &ann)?;

    let mut manifest = serde_json::to_vec_pretty(&bundle.manifest).expect("manifest serializes");
    manifest.push(b'\n');
    write_bytes(&dir.join(MANIFEST), &manifest)
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let bytes = read_file(&dir.join(MANIFEST))?;
    let format_err = |message: String| Error::Format {
        file: MANIFEST.into(),
        message,
    };
    let value: serde_json::Value =
        serde_json::from_slice(&bytes).map_err(|e| format_err(e.to_string()))?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| format_err("missing integer `format_version`".into()))?;
    if version != u64::from(FORMAT_VERSION) {
        return Err(Error::UnsupportedVersion(version.min(u32::MAX as u64) as u32));
    }
    serde_json::from_value(value).map_err(|e| format_err(e.to_string()))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::io(path, e),
    })
}

fn read_matrix(dir: &Path, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
    let path = dir.join(name);
    let expected = (rows as u64) * (cols as u64) * 4;
    let actual = match fs::metadata(&path) {
        Ok(m) => m.len(),
        Err(e) if e.kind() == ErrorKind::NotFound => return Err(Error::MissingFile(path)),
        Err(e) => return Err(Error::io(path, e)),
    };
    if actual != expected {
        return Err(Error::SizeMismatch {
            file: name.to_string(),
            rows,
            cols,
            expected,
            actual,
        });
    }
    let bytes = read_file(&path)?;
    if bytes.len() as u64 != expected {
        // the file changed between stat and read
        return Err(Error::SizeMismatch {
            file: name.to_string(),
            rows,
            cols,
            expected,
            actual: bytes.len() as u64,
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Matrix::new(rows, cols, data)
}

fn write_f32(path: &Path, data: &[f32]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::with_capacity(1 << 16, file);
    for chunk in data.chunks(4096) {
        let bytes: Vec<u8> = chunk.iter().flat_map(|x| x.to_le_bytes()).collect();
        w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
