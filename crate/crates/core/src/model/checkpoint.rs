//! Checkpoint files: `GVCK1\n`, a one-line JSON header, then little-endian f32 data.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{expected_shapes, ModelConfig, ModelError, ModelParams};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8] = b"GVCK1\n";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    path: &Path,
) -> Result<(), ModelError> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (name, t) in params.named_tensors() {
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: payload.len(),
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        config: cfg.clone(),
        tensors,
    };
    let mut bytes = CHECKPOINT_MAGIC.to_vec();
    bytes.extend(serde_json::to_vec(&header).expect("header serializes"));
    bytes.push(b'\n');
    bytes.extend(payload);
    fs::write(path, bytes).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams<f32>, ModelConfig), ModelError> {
    let bytes = fs::read(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let p = || path.to_path_buf();
    if !bytes.starts_with(CHECKPOINT_MAGIC) {
        if bytes.starts_with(b"GVCK") {
            let end = bytes
                .iter()
                .position(|&b| b == b'\n')
                .unwrap_or(bytes.len())
                .min(16);
            return Err(ModelError::Version {
                path: p(),
                found: String::from_utf8_lossy(&bytes[4..end]).into_owned(),
            });
        }
        return Err(ModelError::BadMagic { path: p() });
    }
    let rest = &bytes[CHECKPOINT_MAGIC.len()..];
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| ModelError::Header {
            path: p(),
            msg: "header line is not terminated".into(),
        })?;
    let header: Header = serde_json::from_slice(&rest[..nl]).map_err(|e| ModelError::Header {
        path: p(),
        msg: e.to_string(),
    })?;
    let payload = &rest[nl + 1..];
    let cfg = header.config;
    cfg.validate()?;
    let mut named = Vec::new();
    for (name, shape) in expected_shapes(&cfg) {
        let entry = header
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| ModelError::MissingTensor {
                tensor: name.clone(),
            })?;
        if entry.shape != shape {
            return Err(ModelError::ShapeContradiction {
                tensor: name,
                expected: shape,
                found: entry.shape.clone(),
            });
        }
        let n: usize = shape.iter().product();
        let end = entry
            .offset
            .checked_add(n * 4)
            .filter(|&e| e <= payload.len());
        let Some(end) = end else {
            return Err(ModelError::Truncated { tensor: name });
        };
        let data = payload[entry.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        named.push((name, Tensor::from_vec(&shape, data)?));
    }
    if header.tensors.len() != named.len() {
        return Err(ModelError::Header {
            path: p(),
            msg: format!(
                "{} tensors stored but the config implies {}",
                header.tensors.len(),
                named.len()
            ),
        });
    }
    Ok((ModelParams::from_named(&cfg, named)?, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FusionMode;
    use crate::model::forward_classify;

    fn saved(cfg: &ModelConfig) -> (tempfile::TempDir, std::path::PathBuf, ModelParams<f32>) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.gvck");
        let params = ModelParams::init(cfg, 5).unwrap();
        save_checkpoint(&params, cfg, &path).unwrap();
        (dir, path, params)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig::micro().with_fusion(FusionMode::Late);
        let (_d, path, params) = saved(&cfg);
        let (back, cfg2) = load_checkpoint(&path).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(back, params);
        let img = Tensor::full(&cfg.image_shape(), 0.7f32);
        let a = forward_classify(&img, &params, &cfg, false).unwrap();
        let b = forward_classify(&img, &back, &cfg, false).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn truncation_names_the_tensor() {
        let cfg = ModelConfig::micro();
        let (_d, path, _) = saved(&cfg);
        let bytes = fs::read(&path).unwrap();
        // The head bias is the final 12 bytes.
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        match load_checkpoint(&path) {
            Err(ModelError::Truncated { tensor }) => assert_eq!(tensor, "head.bias"),
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn edited_config_contradicts_shapes() {
        let cfg = ModelConfig {
            embed_dim: 16,
            ..ModelConfig::micro()
        };
        let (_d, path, _) = saved(&cfg);
        let bytes = fs::read(&path).unwrap();
        let text = String::from_utf8_lossy(&bytes).into_owned();
        assert!(text.contains("\"embed_dim\":16"));
        let patched: Vec<u8> = {
            let nl = CHECKPOINT_MAGIC.len()
                + bytes[CHECKPOINT_MAGIC.len()..]
                    .iter()
                    .position(|&b| b == b'\n')
                    .unwrap();
            let header = String::from_utf8(bytes[..nl].to_vec())
                .unwrap()
                .replace("\"embed_dim\":16", "\"embed_dim\":32");
            let mut v = header.into_bytes();
            v.extend_from_slice(&bytes[nl..]);
            v
        };
        fs::write(&path, patched).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(ModelError::ShapeContradiction { .. })
        ));
    }

    #[test]
    fn magic_and_version_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x");
        fs::write(&path, b"GVCK2\n{}\n").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(ModelError::Version { .. })
        ));
        fs::write(&path, b"PNG").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(ModelError::BadMagic { .. })
        ));
        fs::write(&path, b"GVCK1\n{not json\n").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(ModelError::Header { .. })
        ));
        assert!(matches!(
            load_checkpoint(&dir.path().join("missing")),
            Err(ModelError::Io { .. })
        ));
    }
}
