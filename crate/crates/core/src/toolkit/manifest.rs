//! JSON-lines dataset manifests.
//!
//! Each line is `{"id": ..., "path": ..., "split": "train"|"query"|"gallery"}`.
//! Relative paths resolve against the manifest's directory.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorcore::Tensor;

use super::tensor_file;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub path: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<Record>,
}

/// Images of one split with their identity strings.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub images: Vec<Tensor>,
    pub ids: Vec<String>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let rec: Record = serde_json::from_str(line).map_err(|source| Error::Json {
                path: path.to_path_buf(),
                source,
            })?;
            records.push(rec);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Manifest { root, records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut buf, r).map_err(|source| Error::Json {
                path: path.to_path_buf(),
                source,
            })?;
            buf.push(b'\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, record: &Record) -> PathBuf {
        let p = Path::new(&record.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Checks that every path exists and that query and gallery share an identity.
    pub fn validate(&self) -> Result<()> {
        for r in &self.records {
            let p = self.resolve(r);
            if !p.is_file() {
                return Err(Error::io(p, std::io::Error::from(std::io::ErrorKind::NotFound)));
            }
        }
        let gallery: HashSet<&str> = self.split(Split::Gallery).map(|r| r.id.as_str()).collect();
        if self.split(Split::Query).next().is_some() && !self.split(Split::Query).any(|r| gallery.contains(r.id.as_str())) {
            return Err(Error::contract("no query identity appears in the gallery"));
        }
        Ok(())
    }

    pub fn load_split(&self, split: Split) -> Result<SplitData> {
        let mut images = Vec::new();
        let mut ids = Vec::new();
        for r in self.split(split) {
            images.push(tensor_file::read_tensor(self.resolve(r))?);
            ids.push(r.id.clone());
        }
        Ok(SplitData { images, ids })
    }
}
