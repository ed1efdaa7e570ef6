//! Single-modality volumes and the RVF1 file format.
//!
//! Layout: `RVF1\n`, one JSON header line, then `dz·h·w` little-endian `f32`
//! voxels in (slice, row, col) order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DataError;

const MAGIC: &[u8] = b"RVF1\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    T1,
    T2,
}

/// One modality's scalar field indexed `(slice, row, col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub voxels: Vec<f32>,
    pub modality: Modality,
    pub case_id: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dz: usize,
    h: usize,
    w: usize,
    dtype: String,
    modality: Modality,
    case_id: String,
}

impl Volume {
    pub fn new(
        extents: (usize, usize, usize),
        voxels: Vec<f32>,
        modality: Modality,
        case_id: impl Into<String>,
    ) -> Result<Self, DataError> {
        let (depth, height, width) = extents;
        if depth == 0 || height == 0 || width == 0 {
            return Err(DataError::Validation(format!(
                "volume extents must be positive, got {extents:?}"
            )));
        }
        if voxels.len() != depth * height * width {
            return Err(DataError::Validation(format!(
                "volume {extents:?} needs {} voxels, got {}",
                depth * height * width,
                voxels.len()
            )));
        }
        if let Some(i) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(DataError::Validation(format!(
                "non-finite voxel at index {i}"
            )));
        }
        Ok(Self {
            depth,
            height,
            width,
            voxels,
            modality,
            case_id: case_id.into(),
        })
    }

    pub fn extents(&self) -> (usize, usize, usize) {
        (self.depth, self.height, self.width)
    }

    pub fn slice(&self, z: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.voxels[z * n..(z + 1) * n]
    }
}

pub fn save_volume(volume: &Volume, path: &Path) -> Result<(), DataError> {
    let header = Header {
        dz: volume.depth,
        h: volume.height,
        w: volume.width,
        dtype: "f32le".into(),
        modality: volume.modality,
        case_id: volume.case_id.clone(),
    };
    let mut buf = Vec::with_capacity(64 + volume.voxels.len() * 4);
    buf.extend_from_slice(MAGIC);
    serde_json::to_writer(&mut buf, &header).expect("header serializes");
    buf.push(b'\n');
    for v in &volume.voxels {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    file.write_all(&buf).map_err(|e| DataError::io(path, e))
}

pub fn load_volume(path: &Path) -> Result<Volume, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    if !bytes.starts_with(MAGIC) {
        return Err(DataError::BadMagic { path: path.into() });
    }
    let rest = &bytes[MAGIC.len()..];
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| DataError::Header {
            path: path.into(),
            msg: "missing header terminator".into(),
        })?;
    let header: Header = serde_json::from_slice(&rest[..nl]).map_err(|e| DataError::Header {
        path: path.into(),
        msg: e.to_string(),
    })?;
    if header.dtype != "f32le" {
        return Err(DataError::Header {
            path: path.into(),
            msg: format!("unsupported dtype `{}`", header.dtype),
        });
    }
    if header.dz == 0 || header.h == 0 || header.w == 0 {
        return Err(DataError::Header {
            path: path.into(),
            msg: format!("zero extent {}×{}×{}", header.dz, header.h, header.w),
        });
    }
    let payload = &rest[nl + 1..];
    let expected = header.dz * header.h * header.w * 4;
    if payload.len() < expected {
        return Err(DataError::Truncated {
            path: path.into(),
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(DataError::TrailingBytes {
            path: path.into(),
            extra: payload.len() - expected,
        });
    }
    let voxels: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(index) = voxels.iter().position(|v| !v.is_finite()) {
        return Err(DataError::NonFiniteVoxel {
            path: path.into(),
            index,
        });
    }
    Ok(Volume {
        depth: header.dz,
        height: header.h,
        width: header.w,
        voxels,
        modality: header.modality,
        case_id: header.case_id,
    })
}

/// Per-volume min-max scaling to `[0, 1]`; a constant volume maps to zeros.
pub fn normalize_volume(volume: &Volume) -> Volume {
    let (lo, hi) = volume
        .voxels
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    let voxels = if range > 0.0 && range.is_finite() {
        volume.voxels.iter().map(|&v| (v - lo) / range).collect()
    } else {
        vec![0.0; volume.voxels.len()]
    };
    Volume {
        voxels,
        ..volume.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vol(extents: (usize, usize, usize), voxels: Vec<f32>) -> Volume {
        Volume::new(extents, voxels, Modality::T2, "c0").unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.rvf");
        let v = vol((2, 2, 2), vec![0.1, -3.5, 1e-30, 7.0, 0.0, -0.0, 2.5, 1e30]);
        save_volume(&v, &p).unwrap();
        let back = load_volume(&p).unwrap();
        assert_eq!(back.extents(), v.extents());
        let bits = |v: &Volume| v.voxels.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&v));
        assert_eq!(back.modality, Modality::T2);
    }

    #[test]
    fn truncated_payload_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.rvf");
        save_volume(&vol((4, 8, 8), vec![0.5; 256]), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 64 * 4]).unwrap();
        assert!(matches!(load_volume(&p), Err(DataError::Truncated { .. })));
    }

    #[test]
    fn bad_magic_and_non_finite_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.rvf");
        std::fs::write(&p, b"NOPE\n{}\n").unwrap();
        assert!(matches!(load_volume(&p), Err(DataError::BadMagic { .. })));

        save_volume(&vol((1, 1, 2), vec![1.0, 2.0]), &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            load_volume(&p),
            Err(DataError::NonFiniteVoxel { index: 1, .. })
        ));
    }

    #[test]
    fn normalize_cases() {
        let n = normalize_volume(&vol((1, 1, 3), vec![2.0, 4.0, 6.0]));
        assert_eq!(n.voxels, vec![0.0, 0.5, 1.0]);
        let n = normalize_volume(&vol((1, 2, 2), vec![3.0; 4]));
        assert_eq!(n.voxels, vec![0.0; 4]);
    }

    proptest! {
        #[test]
        fn normalize_spans_unit_interval_preserves_ranks_and_is_idempotent(
            voxels in prop::collection::vec(-1e3f32..1e3, 2..64)
        ) {
            let n = voxels.len();
            let v = vol((1, 1, n), voxels.clone());
            let out = normalize_volume(&v);
            let lo = voxels.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = voxels.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            if hi > lo {
                prop_assert_eq!(out.voxels.iter().cloned().fold(f32::INFINITY, f32::min), 0.0);
                prop_assert_eq!(out.voxels.iter().cloned().fold(f32::NEG_INFINITY, f32::max), 1.0);
            }
            for i in 0..n {
                for j in 0..n {
                    if voxels[i] < voxels[j] {
                        prop_assert!(out.voxels[i] <= out.voxels[j]);
                    }
                }
            }
            prop_assert_eq!(normalize_volume(&out).voxels, out.voxels.clone());
        }
    }
}
