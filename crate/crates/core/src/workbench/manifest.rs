//! Dataset manifests: sections, atlases and SHA-256 checksums of every file
//! they reference. Paths are relative to the manifest's directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::section::{Age, Marker};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionEntry {
    pub id: String,
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expression: Option<PathBuf>,
    pub age: Age,
    pub marker: Marker,
    pub ml_index: u32,
    /// Id of the atlas this section is registered against.
    pub atlas: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtlasEntry {
    pub id: String,
    pub labels: PathBuf,
    pub regions: PathBuf,
    pub nissl: PathBuf,
    /// Labels already lie in the frame of every section using this atlas.
    #[serde(default)]
    pub registered: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub sections: Vec<SectionEntry>,
    pub atlases: Vec<AtlasEntry>,
    /// Relative path to lowercase hex SHA-256.
    #[serde(default)]
    pub checksums: BTreeMap<PathBuf, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl DatasetManifest {
    fn referenced(&self) -> Vec<&Path> {
        let mut out: Vec<&Path> = Vec::new();
        for s in &self.sections {
            out.push(&s.image);
            if let Some(e) = &s.expression {
                out.push(e);
            }
        }
        for a in &self.atlases {
            out.extend([a.labels.as_path(), a.regions.as_path(), a.nissl.as_path()]);
        }
        out
    }

    /// Fills `checksums` from the files under `root`.
    pub fn compute_checksums(&mut self, root: &Path) -> Result<()> {
        let mut sums = BTreeMap::new();
        for p in self.referenced() {
            sums.insert(p.to_path_buf(), sha256_file(&root.join(p))?);
        }
        self.checksums = sums;
        Ok(())
    }

    pub fn atlas(&self, id: &str) -> Option<&AtlasEntry> {
        self.atlases.iter().find(|a| a.id == id)
    }

    /// Structural checks: unique ids and resolvable atlas references.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for s in &self.sections {
            if !seen.insert(&s.id) {
                return Err(Error::InvalidArgument(format!("duplicate section id {}", s.id)));
            }
            if self.atlas(&s.atlas).is_none() {
                return Err(Error::NotFound(format!("atlas {} for section {}", s.atlas, s.id)));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for a in &self.atlases {
            if !seen.insert(&a.id) {
                return Err(Error::InvalidArgument(format!("duplicate atlas id {}", a.id)));
            }
        }
        Ok(())
    }

    /// Reads a manifest and checks that every referenced file exists and
    /// matches its recorded checksum.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        m.validate()?;
        let root = path.parent().unwrap_or(Path::new("."));
        for p in m.referenced() {
            let full = root.join(p);
            if !full.is_file() {
                return Err(Error::NotFound(full.display().to_string()));
            }
            let want = m.checksums.get(p).ok_or_else(|| Error::Format {
                what: "manifest",
                detail: format!("no checksum for {}", p.display()),
            })?;
            if &sha256_file(&full)? != want {
                return Err(Error::Checksum { path: full });
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
