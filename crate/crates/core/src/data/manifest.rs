//! JSON-lines case manifests and paired two-modality scan records.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{load_volume, normalize_volume, DataError, Modality, Volume};

/// One manifest line: `{"id", "t1", "t2", "label"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub t1: PathBuf,
    pub t2: PathBuf,
    pub label: usize,
}

/// A case with both modalities loaded. Label 0 is normal, 1 low grade, 2 high grade.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanRecord {
    pub case_id: String,
    pub t1: Volume,
    pub t2: Volume,
    pub label: usize,
}

impl ScanRecord {
    pub fn new(
        case_id: impl Into<String>,
        t1: Volume,
        t2: Volume,
        label: usize,
    ) -> Result<Self, DataError> {
        let case_id = case_id.into();
        if label > 2 {
            return Err(DataError::Validation(format!(
                "case {case_id}: label {label} outside {{0, 1, 2}}"
            )));
        }
        if t1.extents() != t2.extents() {
            return Err(DataError::Validation(format!(
                "case {case_id}: T1 extents {:?} differ from T2 extents {:?}",
                t1.extents(),
                t2.extents()
            )));
        }
        Ok(Self {
            case_id,
            t1,
            t2,
            label,
        })
    }

    /// Loads both volumes named by a manifest entry and checks their pairing.
    pub fn load(entry: &ManifestEntry) -> Result<Self, DataError> {
        let t1 = load_volume(&entry.t1)?;
        let t2 = load_volume(&entry.t2)?;
        for (v, want, path) in [
            (&t1, Modality::T1, &entry.t1),
            (&t2, Modality::T2, &entry.t2),
        ] {
            if v.modality != want {
                return Err(DataError::Validation(format!(
                    "case {}: {} holds {:?}, expected {want:?}",
                    entry.id,
                    path.display(),
                    v.modality
                )));
            }
        }
        Self::new(entry.id.clone(), t1, t2, entry.label)
    }

    pub fn depth(&self) -> usize {
        self.t1.depth
    }

    /// Both volumes min-max scaled to `[0, 1]` independently.
    pub fn normalized(&self) -> Self {
        Self {
            case_id: self.case_id.clone(),
            t1: normalize_volume(&self.t1),
            t2: normalize_volume(&self.t2),
            label: self.label,
        }
    }

    pub fn volume(&self, modality: Modality) -> &Volume {
        match modality {
            Modality::T1 => &self.t1,
            Modality::T2 => &self.t2,
        }
    }
}

/// Loads and normalizes every case listed in a manifest.
pub fn load_records(manifest: &Path) -> Result<Vec<ScanRecord>, DataError> {
    parse_manifest(manifest)?
        .iter()
        .map(|e| ScanRecord::load(e).map(|r| r.normalized()))
        .collect()
}

/// Parses a manifest; relative volume paths resolve against the manifest's directory.
pub fn parse_manifest(path: &Path) -> Result<Vec<ManifestEntry>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| DataError::Manifest { line: line_no, msg };
        let obj: Value =
            serde_json::from_str(line).map_err(|e| err(format!("invalid JSON: {e}")))?;
        let field = |key: &str| {
            obj.get(key)
                .ok_or_else(|| err(format!("missing key `{key}`")))
        };
        let as_str = |key: &str| -> Result<String, DataError> {
            field(key)?
                .as_str()
                .map(str::to_owned)
                .ok_or_else(|| err(format!("`{key}` must be a string")))
        };
        let id = as_str("id")?;
        let t1 = as_str("t1")?;
        let t2 = as_str("t2")?;
        let label = field("label")?
            .as_u64()
            .filter(|&l| l <= 2)
            .ok_or_else(|| err(format!("label {} not in {{0, 1, 2}}", obj["label"])))?;
        if !seen.insert(id.clone()) {
            return Err(err(format!("duplicate case id `{id}`")));
        }
        out.push(ManifestEntry {
            id,
            t1: base.join(t1),
            t2: base.join(t2),
            label: label as usize,
        });
    }
    Ok(out)
}

/// Writes entries as JSON lines, with paths made relative to `base` where possible.
pub fn write_manifest(
    entries: &[ManifestEntry],
    path: &Path,
    base: &Path,
) -> Result<(), DataError> {
    let mut buf = Vec::new();
    for e in entries {
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).to_path_buf();
        let line = ManifestEntry {
            t1: rel(&e.t1),
            t2: rel(&e.t2),
            ..e.clone()
        };
        serde_json::to_writer(&mut buf, &line).expect("manifest entry serializes");
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    f.write_all(&buf).map_err(|e| DataError::io(path, e))
}
