//! Attention rollout and class-token heatmaps.
//!
//! Everything here consumes recorded attention only; no function takes model
//! parameters.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::numerics::{matmul, Tensor};

#[derive(Debug, Error)]
pub enum InterpretError {
    #[error("invalid attention: {0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed heatmap CSV at line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
}

/// Softmax weights of every layer, each `[heads, T, T]` with `T = N + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    pub layers: Vec<Tensor<f64>>,
}

impl AttentionStack {
    pub fn tokens(&self) -> usize {
        self.layers.first().map(|l| l.shape()[1]).unwrap_or(0)
    }

    /// Checks shapes and that every row is a probability vector within `tol`.
    pub fn validate(&self, tol: f64) -> Result<(), InterpretError> {
        let t = self.tokens();
        for (l, layer) in self.layers.iter().enumerate() {
            match layer.shape() {
                [_, a, b] if *a == t && *b == t => {}
                s => {
                    return Err(InterpretError::Validation(format!(
                        "layer {l} has shape {s:?}, expected [heads, {t}, {t}]"
                    )))
                }
            }
            check_rows(layer.data(), t, tol)
                .map_err(|m| InterpretError::Validation(format!("layer {l}: {m}")))?;
        }
        Ok(())
    }
}

fn check_rows(data: &[f64], t: usize, tol: f64) -> Result<(), String> {
    for (r, row) in data.chunks(t).enumerate() {
        let s: f64 = row.iter().sum();
        if !s.is_finite() || (s - 1.0).abs() > tol {
            return Err(format!("row {r} sums to {s}"));
        }
        if let Some(v) = row.iter().find(|&&v| !(-tol..=1.0 + tol).contains(&v)) {
            return Err(format!("row {r} has entry {v} outside [0, 1]"));
        }
    }
    Ok(())
}

/// Mean over heads, one `[T, T]` matrix per layer.
pub fn average_heads(stack: &AttentionStack) -> Vec<Tensor<f64>> {
    stack
        .layers
        .iter()
        .map(|layer| {
            let (heads, t) = (layer.shape()[0], layer.shape()[1]);
            let mut out = vec![0.0; t * t];
            for head in layer.data().chunks(t * t) {
                for (o, &v) in out.iter_mut().zip(head) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|v| *v /= heads as f64);
            Tensor::from_vec(&[t, t], out).expect("square")
        })
        .collect()
}

/// Product of residual-adjusted layer matrices, last layer leftmost.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutMap {
    pub matrix: Tensor<f64>,
}

/// Rows of `0.5·A + 0.5·I`, renormalized.
fn with_residual(a: &Tensor<f64>) -> Tensor<f64> {
    let t = a.shape()[0];
    let mut out = a.map(|v| 0.5 * v);
    for (r, row) in out.data_mut().chunks_mut(t).enumerate() {
        row[r] += 0.5;
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

/// Attention rollout over head-averaged layers.
///
/// Each layer is mixed with the identity to account for the residual path,
/// then the layers are multiplied from last to first.
pub fn rollout(averaged: &[Tensor<f64>]) -> Result<RolloutMap, InterpretError> {
    let first = averaged
        .first()
        .ok_or_else(|| InterpretError::Validation("no layers to roll out".into()))?;
    let t = first.shape()[0];
    for (l, a) in averaged.iter().enumerate() {
        if a.shape() != [t, t] {
            return Err(InterpretError::Validation(format!(
                "layer {l} has shape {:?}, expected [{t}, {t}]",
                a.shape()
            )));
        }
        check_rows(a.data(), t, 1e-4)
            .map_err(|m| InterpretError::Validation(format!("layer {l}: {m}")))?;
    }
    let mut acc = with_residual(first);
    for a in &averaged[1..] {
        acc = matmul(&with_residual(a), &acc).expect("square matrices of one size");
    }
    Ok(RolloutMap { matrix: acc })
}

/// Patch layout of a grid image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
}

impl PatchGrid {
    pub fn from_config(cfg: &crate::model::ModelConfig) -> Self {
        Self {
            rows: cfg.grid_h() / cfg.patch_size,
            cols: cfg.grid_w() / cfg.patch_size,
            patch_size: cfg.patch_size,
        }
    }

    pub fn patches(&self) -> usize {
        self.rows * self.cols
    }
}

/// How much the class token draws from each patch.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMap {
    pub grid: PatchGrid,
    /// Row 0 of the rollout over patch columns, in patch order.
    pub class_map: Vec<f32>,
    /// Weight of the class token on itself.
    pub self_weight: f64,
    /// `class_map` painted over each `P×P` block, `[grid_h, grid_w]`.
    pub overlay: Tensor<f64>,
    /// `overlay` min-max scaled to `[0, 1]` (all zeros when constant).
    pub scaled: Tensor<f64>,
}

pub fn class_attention_map(r: &RolloutMap, grid: PatchGrid) -> Result<ClassMap, InterpretError> {
    let t = r.matrix.shape()[0];
    if t != grid.patches() + 1 {
        return Err(InterpretError::Validation(format!(
            "rollout over {t} tokens does not fit a {}×{} patch grid",
            grid.rows, grid.cols
        )));
    }
    let row0 = r.matrix.row(0);
    let class_map: Vec<f32> = row0[1..].iter().map(|&v| v.max(0.0) as f32).collect();
    let (h, w, p) = (
        grid.rows * grid.patch_size,
        grid.cols * grid.patch_size,
        grid.patch_size,
    );
    let mut overlay = vec![0.0; h * w];
    for (y, row) in overlay.chunks_mut(w).enumerate() {
        for (x, v) in row.iter_mut().enumerate() {
            *v = f64::from(class_map[(y / p) * grid.cols + x / p]);
        }
    }
    let overlay = Tensor::from_vec(&[h, w], overlay)
        .map_err(|e| InterpretError::Validation(e.to_string()))?;
    let lo = overlay.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = overlay
        .data()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let scaled = overlay.map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 });
    Ok(ClassMap {
        grid,
        class_map,
        self_weight: row0[0],
        overlay,
        scaled,
    })
}

/// Writes `{prefix}.pgm` (binary 8-bit grayscale of the scaled overlay) and
/// `{prefix}.csv` (raw per-patch values). Returns both paths.
pub fn export_heatmap(map: &ClassMap, prefix: &Path) -> Result<(PathBuf, PathBuf), InterpretError> {
    if !map.overlay.all_finite() {
        return Err(InterpretError::Validation(
            "overlay has non-finite values".into(),
        ));
    }
    let pgm = with_suffix(prefix, ".pgm");
    let csv = with_suffix(prefix, ".csv");
    let (h, w) = (map.scaled.shape()[0], map.scaled.shape()[1]);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(map.scaled.data().iter().map(|&v| quantize(v)));
    write(&pgm, &bytes)?;
    let mut text = String::from("patch_row,patch_col,value\n");
    for (i, v) in map.class_map.iter().enumerate() {
        writeln!(
            text,
            "{},{},{:.8e}",
            i / map.grid.cols,
            i % map.grid.cols,
            v
        )
        .expect("string write");
    }
    write(&csv, text.as_bytes())?;
    Ok((pgm, csv))
}

/// Appends a suffix without touching any dot already in the prefix.
fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Gray level for a scaled value in `[0, 1]`.
pub fn quantize(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), InterpretError> {
    fs::write(path, bytes).map_err(|source| InterpretError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads the per-patch CSV written by [`export_heatmap`] back in patch order.
pub fn read_heatmap_csv(path: &Path) -> Result<Vec<(usize, usize, f32)>, InterpretError> {
    let text = fs::read_to_string(path).map_err(|source| InterpretError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |line: usize, msg: &str| InterpretError::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "patch_row,patch_col,value")) => {}
        _ => return Err(bad(1, "missing header")),
    }
    lines
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(bad(i + 1, "expected three fields"));
            }
            let r = f[0].parse().map_err(|_| bad(i + 1, "bad patch_row"))?;
            let c = f[1].parse().map_err(|_| bad(i + 1, "bad patch_col"))?;
            let v = f[2].parse().map_err(|_| bad(i + 1, "bad value"))?;
            Ok((r, c, v))
        })
        .collect()
}

/// Reads a binary P5 graymap into `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>), InterpretError> {
    let bytes = fs::read(path).map_err(|source| InterpretError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |msg: &str| InterpretError::Parse {
        path: path.to_path_buf(),
        line: 1,
        msg: msg.into(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("short header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("not an 8-bit P5 graymap"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let pixels = bytes.get(pos + 1..).unwrap_or_default().to_vec();
    if pixels.len() != w * h {
        return Err(bad("pixel count does not match extents"));
    }
    Ok((w, h, pixels))
}
