//! JSON-Lines dataset manifests.
//!
//! The first line is a header `{"schema": 1, "name": ...}`; every following
//! non-blank line is one [`SampleRecord`]. Paths inside records are relative
//! to the manifest's directory.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::EmotionLabel;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    #[default]
    Unassigned,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "unassigned" => Ok(Split::Unassigned),
            other => Err(Error::Invalid(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub image_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<EmotionLabel>,
    #[serde(default)]
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmark_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub person_mask_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demographic_tags: Option<BTreeMap<String, String>>,
    #[serde(default)]
    pub masked: bool,
}

impl SampleRecord {
    pub fn new(id: impl Into<String>, image_path: impl Into<PathBuf>) -> Self {
        SampleRecord {
            id: id.into(),
            image_path: image_path.into(),
            label: None,
            split: Split::Unassigned,
            landmark_path: None,
            person_mask_path: None,
            demographic_tags: None,
            masked: false,
        }
    }

    pub fn with_label(mut self, label: EmotionLabel) -> Self {
        self.label = Some(label);
        self
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("record id is empty".into());
        }
        if self.image_path.as_os_str().is_empty() {
            return Err(format!("record `{}` has an empty image_path", self.id));
        }
        if self.split != Split::Unassigned && self.label.is_none() {
            return Err(format!(
                "record `{}` is assigned to split `{}` but has no label",
                self.id, self.split
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema: u32,
    name: String,
}

/// An immutable, validated list of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    name: String,
    records: Vec<SampleRecord>,
    class_counts: BTreeMap<EmotionLabel, usize>,
    base_dir: PathBuf,
}

fn count_classes(records: &[SampleRecord]) -> BTreeMap<EmotionLabel, usize> {
    let mut counts: BTreeMap<EmotionLabel, usize> =
        EmotionLabel::ALL.iter().map(|l| (*l, 0)).collect();
    for label in records.iter().filter_map(|r| r.label) {
        *counts.entry(label).or_default() += 1;
    }
    counts
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, records: Vec<SampleRecord>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            r.validate().map_err(Error::Invalid)?;
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
        }
        let class_counts = count_classes(&records);
        Ok(DatasetManifest {
            name: name.into(),
            records,
            class_counts,
            base_dir: PathBuf::from("."),
        })
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = dir.into();
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<SampleRecord> {
        self.records
    }

    pub fn class_counts(&self) -> &BTreeMap<EmotionLabel, usize> {
        &self.class_counts
    }

    /// Directory that relative record paths resolve against.
    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn resolve(&self, relative: &Path) -> PathBuf {
        if relative.is_absolute() {
            relative.to_path_buf()
        } else {
            self.base_dir.join(relative)
        }
    }

    pub fn get(&self, id: &str) -> Option<&SampleRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Labeled records in the given split, in manifest order.
    pub fn split_records(&self, split: Split) -> Vec<&SampleRecord> {
        self.records
            .iter()
            .filter(|r| r.split == split && r.label.is_some())
            .collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let reader = BufReader::new(file);
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };

        let mut header: Option<Header> = None;
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (idx, line) in reader.lines().enumerate() {
            let lineno = idx + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            if header.is_none() {
                let h: Header = serde_json::from_str(&line)
                    .map_err(|e| parse_err(lineno, format!("bad header: {e}")))?;
                if h.schema != SCHEMA_VERSION {
                    return Err(parse_err(
                        lineno,
                        format!("unsupported schema version {}", h.schema),
                    ));
                }
                header = Some(h);
                continue;
            }
            let record: SampleRecord =
                serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
            record.validate().map_err(|m| parse_err(lineno, m))?;
            if !seen.insert(record.id.clone()) {
                return Err(Error::DuplicateId(record.id));
            }
            records.push(record);
        }
        let header = header.ok_or_else(|| parse_err(1, "missing header line".into()))?;
        let base = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(DatasetManifest::new(header.name, records)?.with_base_dir(base))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        let header = Header {
            schema: SCHEMA_VERSION,
            name: self.name.clone(),
        };
        serde_json::to_writer(&mut out, &header).expect("header serializes");
        out.push(b'\n');
        for r in &self.records {
            serde_json::to_writer(&mut out, r).expect("record serializes");
            out.push(b'\n');
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceReport {
    pub counts: BTreeMap<EmotionLabel, usize>,
    pub imbalance_ratio: f64,
}

/// Per-class counts plus max count over the smallest nonzero count.
pub fn balance_report(manifest: &DatasetManifest) -> Result<BalanceReport> {
    balance_from_counts(manifest.class_counts().clone())
}

pub fn balance_from_counts(counts: BTreeMap<EmotionLabel, usize>) -> Result<BalanceReport> {
    let mut full: BTreeMap<EmotionLabel, usize> =
        EmotionLabel::ALL.iter().map(|l| (*l, 0)).collect();
    full.extend(counts);
    let max = full.values().copied().max().unwrap_or(0);
    let min_nonzero = full.values().copied().filter(|c| *c > 0).min();
    let Some(min) = min_nonzero else {
        return Err(Error::NoLabels);
    };
    Ok(BalanceReport {
        counts: full,
        imbalance_ratio: max as f64 / min as f64,
    })
}
