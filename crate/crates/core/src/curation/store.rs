use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use super::consensus::AnnotationRecord;
use crate::error::{Error, Result};

/// Append-only JSON-Lines annotation log. Every append is flushed and
/// synced before it is acknowledged.
#[derive(Debug)]
pub struct AnnotationStore {
    path: PathBuf,
    file: File,
    records: Vec<AnnotationRecord>,
}

impl AnnotationStore {
    /// Opens (creating if needed) and replays the log. A torn final line,
    /// left by a crash mid-write, is dropped with a warning.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(Error::io(&path, e)),
        };
        let lines: Vec<&str> = text.lines().collect();
        let mut records = Vec::with_capacity(lines.len());
        let mut torn = false;
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<AnnotationRecord>(line) {
                Ok(r) => records.push(r),
                Err(e) if i + 1 == lines.len() && !text.ends_with('\n') => {
                    log::warn!("{}: dropping incomplete final line ({e})", path.display());
                    torn = true;
                }
                Err(e) => {
                    return Err(Error::Parse {
                        path: path.clone(),
                        line: i + 1,
                        message: e.to_string(),
                    })
                }
            }
        }
        if torn {
            let mut clean = String::new();
            for r in &records {
                clean.push_str(&serde_json::to_string(r).expect("record serializes"));
                clean.push('\n');
            }
            fs::write(&path, clean).map_err(|e| Error::io(&path, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(AnnotationStore { path, file, records })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn records(&self) -> &[AnnotationRecord] {
        &self.records
    }

    pub fn append(&mut self, record: AnnotationRecord) -> Result<()> {
        let mut line = serde_json::to_string(&record).expect("record serializes");
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.sync_data())
            .map_err(|e| Error::io(&self.path, e))?;
        self.records.push(record);
        Ok(())
    }

    pub fn for_image<'a>(&'a self, image_id: &'a str) -> impl Iterator<Item = &'a AnnotationRecord> + 'a {
        self.records.iter().filter(move |r| r.image_id == image_id)
    }
}
