//! Dataset manifests: one JSONL file per dataset.
//!
//! The first line is a header carrying the schema version, seed, provenance
//! and per-object density windows; every following line is one sample record.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::DensityWindow;
use crate::error::{Result, SamctError};
use crate::vocab;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One image/mask/object sample. `mask_path = None` means the object has no
/// foreground on this image (the mask is all background).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image_path: String,
    pub mask_path: Option<String>,
    pub object_id: String,
    pub has_foreground: bool,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    seed: u64,
    provenance: String,
    windows: BTreeMap<String, DensityWindow>,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub seed: u64,
    pub provenance: String,
    /// Density window used per object ID.
    pub windows: BTreeMap<String, DensityWindow>,
    pub records: Vec<SampleRecord>,
    /// Directory record paths are relative to (set on load/save).
    pub root: PathBuf,
}

impl Manifest {
    pub fn new(provenance: &str, seed: u64) -> Self {
        Self {
            seed,
            provenance: provenance.to_string(),
            windows: BTreeMap::new(),
            records: Vec::new(),
            root: PathBuf::new(),
        }
    }

    /// No duplicate (image, object) pairs, valid object IDs, foreground flag
    /// consistent with a missing mask path.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (i, r) in self.records.iter().enumerate() {
            if !vocab::is_valid_object_id(&r.object_id) {
                return Err(SamctError::Data(format!(
                    "record {i}: invalid object id '{}'",
                    r.object_id
                )));
            }
            if !seen.insert((r.image_path.clone(), r.object_id.clone())) {
                return Err(SamctError::Data(format!(
                    "record {i}: duplicate (image, object) pair ({}, {})",
                    r.image_path, r.object_id
                )));
            }
            if r.mask_path.is_none() && r.has_foreground {
                return Err(SamctError::Data(format!(
                    "record {i}: has_foreground without a mask path"
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| SamctError::io(dir.to_path_buf(), e))?;
        }
        let file =
            std::fs::File::create(path).map_err(|e| SamctError::io(path.to_path_buf(), e))?;
        let mut w = std::io::BufWriter::new(file);
        let header = Header {
            schema_version: SCHEMA_VERSION,
            seed: self.seed,
            provenance: self.provenance.clone(),
            windows: self.windows.clone(),
        };
        let mut line = serde_json::to_string(&header).map_err(|e| SamctError::Serde(e.to_string()))?;
        line.push('\n');
        w.write_all(line.as_bytes())
            .map_err(|e| SamctError::io(path.to_path_buf(), e))?;
        for r in &self.records {
            let mut line =
                serde_json::to_string(r).map_err(|e| SamctError::Serde(e.to_string()))?;
            line.push('\n');
            w.write_all(line.as_bytes())
                .map_err(|e| SamctError::io(path.to_path_buf(), e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| SamctError::io(path.to_path_buf(), e))?;
        let mut lines = BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| SamctError::Data(format!("{}: empty manifest", path.display())))?
            .map_err(|e| SamctError::io(path.to_path_buf(), e))?;
        let header: Header = serde_json::from_str(&header_line)
            .map_err(|e| SamctError::Data(format!("{}: bad header: {e}", path.display())))?;
        if header.schema_version != SCHEMA_VERSION {
            return Err(SamctError::Data(format!(
                "{}: unsupported manifest schema version {}",
                path.display(),
                header.schema_version
            )));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| SamctError::io(path.to_path_buf(), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| {
                SamctError::Data(format!("{}: bad record on line {}: {e}", path.display(), i + 2))
            })?;
            records.push(rec);
        }
        let manifest = Self {
            seed: header.seed,
            provenance: header.provenance,
            windows: header.windows,
            records,
            root: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::DensityWindow;

    fn record(img: &str, obj: &str, split: Split) -> SampleRecord {
        SampleRecord {
            image_path: img.into(),
            mask_path: Some(format!("masks/{obj}/{img}")),
            object_id: obj.into(),
            has_foreground: true,
            split,
        }
    }

    #[test]
    fn round_trips_byte_identically() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Manifest::new("unit", 42);
        m.windows.insert("A6".into(), DensityWindow::tissue());
        m.records.push(record("a.png", "A6", Split::Train));
        m.records.push(record("b.png", "A6", Split::Test));
        let p1 = dir.path().join("m1.jsonl");
        let p2 = dir.path().join("m2.jsonl");
        m.save(&p1).unwrap();
        let loaded = Manifest::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(
            std::fs::read(&p1).unwrap(),
            std::fs::read(&p2).unwrap(),
            "save/load/save must be byte-identical"
        );
        assert_eq!(loaded.records, m.records);
        assert_eq!(loaded.seed, 42);
    }

    #[test]
    fn duplicate_pairs_rejected() {
        let mut m = Manifest::new("unit", 0);
        m.records.push(record("a.png", "A6", Split::Train));
        m.records.push(record("a.png", "A6", Split::Val));
        assert!(m.validate().is_err());
    }

    #[test]
    fn foreground_requires_mask() {
        let mut m = Manifest::new("unit", 0);
        let mut r = record("a.png", "A6", Split::Train);
        r.mask_path = None;
        m.records.push(r);
        assert!(m.validate().is_err());
    }
}
