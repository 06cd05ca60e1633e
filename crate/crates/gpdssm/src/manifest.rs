//! Dataset manifest: a CSV file with header
//! `id,mesh_path,landmarks_path,label,lcea,ai,split`.
//!
//! Paths are resolved against the manifest's directory. Labels are `control`
//! or `dysplastic` (empty when unknown); `split` is `train` or `test`.
//!
//! Test-row labels are only reachable through [`Manifest::evaluation_labels`],
//! which counts every access so pipeline stages can prove they never read them.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use gpdssm_core::cup::Label;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};

pub const HEADER: [&str; 7] = ["id", "mesh_path", "landmarks_path", "label", "lcea", "ai", "split"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub id: String,
    pub mesh_path: Option<PathBuf>,
    pub landmarks_path: Option<PathBuf>,
    label: Option<Label>,
    pub lcea: Option<f64>,
    pub ai: Option<f64>,
    pub split: Split,
}

impl ManifestRow {
    pub fn new(
        id: impl Into<String>,
        mesh_path: Option<PathBuf>,
        landmarks_path: Option<PathBuf>,
        label: Option<Label>,
        lcea: Option<f64>,
        ai: Option<f64>,
        split: Split,
    ) -> Self {
        ManifestRow { id: id.into(), mesh_path, landmarks_path, label, lcea, ai, split }
    }

    pub fn angles(&self) -> Option<(f64, f64)> {
        Some((self.lcea?, self.ai?))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawRow {
    id: String,
    mesh_path: Option<String>,
    landmarks_path: Option<String>,
    label: Option<String>,
    lcea: Option<f64>,
    ai: Option<f64>,
    split: String,
}

#[derive(Debug)]
pub struct Manifest {
    rows: Vec<ManifestRow>,
    base_dir: PathBuf,
    test_label_reads: AtomicUsize,
}

fn parse_label(s: &str) -> Option<Option<Label>> {
    match s.trim().to_ascii_lowercase().as_str() {
        "" => Some(None),
        "control" | "0" => Some(Some(Label::Control)),
        "dysplastic" | "1" => Some(Some(Label::Dysplastic)),
        _ => None,
    }
}

impl Manifest {
    pub fn new(rows: Vec<ManifestRow>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &rows {
            if r.id.is_empty() {
                return Err(AppError::validation("manifest row with empty id"));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(AppError::validation(format!("duplicate manifest id `{}`", r.id)));
            }
        }
        Ok(Manifest { rows, base_dir: base_dir.into(), test_label_reads: AtomicUsize::new(0) })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::io::read_text(path)?;
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let headers = rdr.headers().map_err(|e| AppError::format(path, 1, e.to_string()))?.clone();
        if headers.iter().ne(HEADER.iter().copied()) {
            return Err(AppError::format(path, 1, format!("header must be `{}`", HEADER.join(","))));
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.deserialize::<RawRow>().enumerate() {
            let line = i + 2;
            let raw = rec.map_err(|e| AppError::format(path, line, e.to_string()))?;
            let label = parse_label(raw.label.as_deref().unwrap_or(""))
                .ok_or_else(|| AppError::format(path, line, "label must be `control`, `dysplastic` or empty"))?;
            let split = match raw.split.as_str() {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(AppError::format(path, line, format!("split must be train or test, got `{other}`"))),
            };
            let nonempty = |s: Option<String>| s.filter(|s| !s.is_empty()).map(PathBuf::from);
            rows.push(ManifestRow {
                id: raw.id,
                mesh_path: nonempty(raw.mesh_path),
                landmarks_path: nonempty(raw.landmarks_path),
                label,
                lcea: raw.lcea,
                ai: raw.ai,
                split,
            });
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Manifest::new(rows, base)
    }

    /// CSV text with paths written as given (relative paths stay relative).
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            let path_str = |p: &Option<PathBuf>| p.as_ref().map(|p| p.to_string_lossy().into_owned());
            w.serialize(RawRow {
                id: r.id.clone(),
                mesh_path: path_str(&r.mesh_path),
                landmarks_path: path_str(&r.landmarks_path),
                label: r.label.map(|l| l.as_str().to_string()),
                lcea: r.lcea,
                ai: r.ai,
                split: r.split.as_str().to_string(),
            })
            .map_err(|e| AppError::validation(e.to_string()))?;
        }
        if self.rows.is_empty() {
            w.write_record(HEADER).map_err(|e| AppError::validation(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| AppError::validation(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn rows(&self) -> &[ManifestRow] {
        &self.rows
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn split(&self, s: Split) -> Vec<&ManifestRow> {
        self.rows.iter().filter(|r| r.split == s).collect()
    }

    /// Labels of training rows. Errors when a training row is unlabeled.
    pub fn train_labels(&self) -> Result<Vec<(&ManifestRow, Label)>> {
        self.split(Split::Train)
            .into_iter()
            .map(|r| {
                r.label
                    .map(|l| (r, l))
                    .ok_or_else(|| AppError::validation(format!("training row `{}` has no label", r.id)))
            })
            .collect()
    }

    /// Training rows that carry a label.
    pub fn labeled_train(&self) -> Vec<(&ManifestRow, Label)> {
        self.split(Split::Train).into_iter().filter_map(|r| r.label.map(|l| (r, l))).collect()
    }

    /// Labels of test rows, `None` where unlabeled. Counted as a test-label read.
    pub fn evaluation_labels(&self) -> Vec<(&ManifestRow, Option<Label>)> {
        self.test_label_reads.fetch_add(1, Ordering::SeqCst);
        self.split(Split::Test).into_iter().map(|r| (r, r.label)).collect()
    }

    pub fn test_label_reads(&self) -> usize {
        self.test_label_reads.load(Ordering::SeqCst)
    }
}
