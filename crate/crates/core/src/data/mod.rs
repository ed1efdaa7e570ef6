//! Volume ingest, slice windows, grid packing, modality fusion, augmentation,
//! and the synthetic dataset generator.

mod augment;
mod grid;
mod manifest;
mod synth;
mod volume;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use augment::{apply_augment, augment, AugmentDraw};
pub use grid::{
    build_sample, central_window, extract_windows, fuse_early, grid_cell, is_perfect_square,
    pack_grid, GridSample,
};
pub use manifest::{load_records, parse_manifest, write_manifest, ManifestEntry, ScanRecord};
pub use synth::{gen_synthetic, SyntheticSpec};
pub use volume::{load_volume, normalize_volume, save_volume, Modality, Volume};

/// Which modalities feed the model, and how they are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    T1,
    T2,
    Late,
    #[default]
    Early,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [Self::T1, Self::T2, Self::Late, Self::Early];

    /// Channels of the packed input image.
    pub fn input_channels(self) -> usize {
        match self {
            Self::T1 | Self::T2 => 1,
            Self::Late | Self::Early => 2,
        }
    }

    /// Channels seen by each encoder tower.
    pub fn tower_channels(self) -> usize {
        match self {
            Self::Early => 2,
            _ => 1,
        }
    }

    pub fn towers(self) -> usize {
        match self {
            Self::Late => 2,
            _ => 1,
        }
    }

    /// Row label used in ablation reports.
    pub fn label(self) -> &'static str {
        match self {
            Self::T1 => "T1",
            Self::T2 => "T2",
            Self::Late => "Late fusion",
            Self::Early => "Early fusion",
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "t1" => Ok(Self::T1),
            "t2" => Ok(Self::T2),
            "late" => Ok(Self::Late),
            "early" => Ok(Self::Early),
            other => Err(format!(
                "unknown fusion mode `{other}` (expected t1|t2|early|late)"
            )),
        }
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not an RVF1 volume (bad magic)")]
    BadMagic { path: PathBuf },
    #[error("{path}: invalid volume header: {msg}")]
    Header { path: PathBuf, msg: String },
    #[error("{path}: truncated payload, expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}: {extra} unexpected bytes after the voxel payload")]
    TrailingBytes { path: PathBuf, extra: usize },
    #[error("{path}: non-finite voxel at flat index {index}")]
    NonFiniteVoxel { path: PathBuf, index: usize },
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("insufficient depth: window of {k} slices needs at least {k} but volume has {depth}")]
    InsufficientDepth { k: usize, depth: usize },
    #[error("invalid synthetic spec field `{field}`: {msg}")]
    Spec { field: String, msg: String },
    #[error("validation error: {0}")]
    Validation(String),
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
