//! Image manifests, contamination-aware splits and class-balanced sampling.
//!
//! A manifest is a CSV with the header `image_id,path,label,group_id`.
//! Labels are class names from a configured label set; an empty label marks
//! an unlabeled image (segmentation-only data). `group_id` identifies the
//! lesion or case an image belongs to. Every split keeps groups whole.

mod batches;
mod splits;

pub use batches::{balanced_batches, BatchEntry, BatchPlan};
pub use splits::{make_splits, Role, SplitParams, Splits};

use std::collections::HashSet;
use std::io::Read;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("manifest header must be exactly `image_id,path,label,group_id`, found `{0}`")]
    BadHeader(String),
    #[error("duplicate image_id `{0}`")]
    DuplicateId(String),
    #[error("unknown label `{label}` for image `{image_id}`; valid labels: {valid:?}")]
    UnknownLabel {
        image_id: String,
        label: String,
        valid: Vec<String>,
    },
    #[error("image `{0}` has an empty group_id")]
    EmptyGroup(String),
    #[error("image `{0}` has an empty image_id or path")]
    EmptyField(String),
    #[error("split file: {0}")]
    SplitFormat(String),
    #[error(
        "group `{group}` has {size} images but the {stage} target is only {target}; \
         use a larger fraction"
    )]
    GroupTooLarge {
        group: String,
        size: usize,
        target: usize,
        stage: String,
    },
    #[error("invalid split parameter: {0}")]
    BadParam(String),
    #[error("role `{0}` does not exist in these splits")]
    UnknownRole(String),
    #[error("image `{0}` is not in the manifest")]
    UnknownImage(String),
    #[error("class `{0}` has no labeled examples in the selection")]
    EmptyClass(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub image_id: String,
    pub path: String,
    pub label: Option<usize>,
    pub group_id: String,
    pub width: Option<u32>,
    pub height: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    labels: Vec<String>,
    records: Vec<ImageRecord>,
}

#[derive(Deserialize)]
struct Row {
    image_id: String,
    path: String,
    label: String,
    group_id: String,
}

const HEADER: [&str; 4] = ["image_id", "path", "label", "group_id"];

pub fn load_manifest(path: &Path, labels: &[String]) -> Result<Manifest, ManifestError> {
    let file = std::fs::File::open(path).map_err(|source| ManifestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Manifest::from_reader(file, labels)
}

impl Manifest {
    /// Builds a manifest, checking id uniqueness, label range and group ids.
    pub fn new(labels: Vec<String>, records: Vec<ImageRecord>) -> Result<Self, ManifestError> {
        let mut seen = HashSet::new();
        for r in &records {
            if r.image_id.is_empty() || r.path.is_empty() {
                return Err(ManifestError::EmptyField(r.image_id.clone()));
            }
            if !seen.insert(r.image_id.as_str()) {
                return Err(ManifestError::DuplicateId(r.image_id.clone()));
            }
            if r.group_id.is_empty() {
                return Err(ManifestError::EmptyGroup(r.image_id.clone()));
            }
            if let Some(l) = r.label {
                if l >= labels.len() {
                    return Err(ManifestError::UnknownLabel {
                        image_id: r.image_id.clone(),
                        label: l.to_string(),
                        valid: labels.clone(),
                    });
                }
            }
        }
        Ok(Self { labels, records })
    }

    pub fn from_reader<R: Read>(reader: R, labels: &[String]) -> Result<Self, ManifestError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers()?.clone();
        if header.iter().ne(HEADER.iter().copied()) {
            return Err(ManifestError::BadHeader(header.iter().collect::<Vec<_>>().join(",")));
        }
        let mut records = Vec::new();
        for row in rdr.deserialize() {
            let row: Row = row?;
            let label = if row.label.is_empty() {
                None
            } else {
                Some(labels.iter().position(|l| *l == row.label).ok_or_else(|| {
                    ManifestError::UnknownLabel {
                        image_id: row.image_id.clone(),
                        label: row.label.clone(),
                        valid: labels.to_vec(),
                    }
                })?)
            };
            records.push(ImageRecord {
                image_id: row.image_id,
                path: row.path,
                label,
                group_id: row.group_id,
                width: None,
                height: None,
            });
        }
        Self::new(labels.to_vec(), records)
    }

    /// The distinct non-empty labels of a manifest CSV, sorted, for when no
    /// label set is configured.
    pub fn scan_labels<R: Read>(reader: R) -> Result<Vec<String>, ManifestError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers()?.clone();
        if header.iter().ne(HEADER.iter().copied()) {
            return Err(ManifestError::BadHeader(header.iter().collect::<Vec<_>>().join(",")));
        }
        let mut labels = std::collections::BTreeSet::new();
        for row in rdr.deserialize() {
            let row: Row = row?;
            if !row.label.is_empty() {
                labels.insert(row.label);
            }
        }
        Ok(labels.into_iter().collect())
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), ManifestError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(HEADER)?;
        for r in &self.records {
            let label = r.label.map(|l| self.labels[l].as_str()).unwrap_or("");
            w.write_record([&r.image_id, &r.path, label, &r.group_id])?;
        }
        w.flush().map_err(|source| ManifestError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.image_id == image_id)
    }

    /// Records of one split role, in manifest order.
    pub fn select(&self, splits: &Splits, role: Role) -> Result<Vec<&ImageRecord>, ManifestError> {
        let members: HashSet<&str> = splits.members(role)?.into_iter().collect();
        Ok(self
            .records
            .iter()
            .filter(|r| members.contains(r.image_id.as_str()))
            .collect())
    }
}

/// Per-class counts and frequencies over labeled records.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub counts: Vec<usize>,
    pub frequencies: Vec<f64>,
}

impl ClassStats {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Unlabeled records are skipped. An empty selection gives all-zero counts
/// and frequencies.
pub fn class_stats<'a>(
    records: impl IntoIterator<Item = &'a ImageRecord>,
    n_classes: usize,
) -> ClassStats {
    let mut counts = vec![0usize; n_classes];
    for r in records {
        if let Some(l) = r.label {
            counts[l] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let frequencies = counts
        .iter()
        .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
        .collect();
    ClassStats {
        counts,
        frequencies,
    }
}
