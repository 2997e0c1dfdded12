//! Dataset manifests: which subjects exist, where their files are and
//! which split they belong to.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    /// Relative to the manifest's directory unless absolute.
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<PathBuf>,
    /// Voxel `(x, y, z)` the network crop is centered on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop_center: Option<[usize; 3]>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub v: u32,
    pub subjects: Vec<Subject>,
}

impl Manifest {
    pub fn new(subjects: Vec<Subject>) -> Self {
        Manifest { v: SCHEMA_VERSION, subjects }
    }

    /// Unique ids, labels present for training and validation subjects.
    pub fn validate(&self) -> Result<()> {
        if self.v != SCHEMA_VERSION {
            return Err(CliError::Manifest(format!("schema version {} (expected {SCHEMA_VERSION})", self.v)));
        }
        let mut seen = BTreeSet::new();
        for s in &self.subjects {
            if !seen.insert(s.id.as_str()) {
                return Err(CliError::Manifest(format!("duplicate subject id {}", s.id)));
            }
            if s.split != Split::Test && s.label.is_none() {
                return Err(CliError::Manifest(format!("{} subject {} has no label file", s.split.name(), s.id)));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Subject> {
        self.subjects.iter().filter(move |s| s.split == split)
    }

    pub fn counts(&self) -> [usize; 3] {
        [Split::Train, Split::Val, Split::Test].map(|s| self.split(s).count())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text).map_err(|e| CliError::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| CliError::io(path, e))
    }
}

/// Resolves a manifest entry's path against the manifest's directory.
pub fn resolve(manifest_path: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}
