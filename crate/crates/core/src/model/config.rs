//! Model hyperparameters and the geometry they imply.

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::data::{is_perfect_square, FusionMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Slices per grid; a perfect square.
    pub k: usize,
    pub slice_h: usize,
    pub slice_w: usize,
    pub patch_size: usize,
    /// Input channels per encoder tower.
    pub channels: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub fusion: FusionMode,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

fn default_ln_eps() -> f64 {
    1e-6
}

impl Default for ModelConfig {
    /// `gridvit-tiny`: nine 64×64 slices, 16-pixel patches, D = 192, six layers.
    fn default() -> Self {
        Self {
            k: 9,
            slice_h: 64,
            slice_w: 64,
            patch_size: 16,
            channels: 2,
            embed_dim: 192,
            layers: 6,
            heads: 3,
            mlp_ratio: 4,
            num_classes: 3,
            fusion: FusionMode::Early,
            ln_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    /// A desk-scale preset for 16×16 slices: 48×48 grids, 36 patches of 8×8, D = 32.
    pub fn micro() -> Self {
        Self {
            slice_h: 16,
            slice_w: 16,
            patch_size: 8,
            embed_dim: 32,
            layers: 2,
            heads: 2,
            mlp_ratio: 2,
            ..Self::default()
        }
    }

    /// Same geometry with the input layout of another fusion mode.
    pub fn with_fusion(mut self, fusion: FusionMode) -> Self {
        self.fusion = fusion;
        self.channels = fusion.tower_channels();
        self
    }

    pub fn grid_side(&self) -> usize {
        (1..=self.k).find(|s| s * s >= self.k).unwrap_or(1)
    }

    pub fn grid_h(&self) -> usize {
        self.grid_side() * self.slice_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_side() * self.slice_w
    }

    /// Patch count `N = k·H·W / P²`.
    pub fn num_patches(&self) -> usize {
        self.k * self.slice_h * self.slice_w / (self.patch_size * self.patch_size)
    }

    /// Token count including the class token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_ratio * self.embed_dim
    }

    pub fn towers(&self) -> usize {
        self.fusion.towers()
    }

    /// Length of the vector fed to the classification head.
    pub fn readout_dim(&self) -> usize {
        self.towers() * self.embed_dim
    }

    /// Expected `[grid_h, grid_w, C]` extents of an input image.
    pub fn image_shape(&self) -> [usize; 3] {
        [self.grid_h(), self.grid_w(), self.fusion.input_channels()]
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if !is_perfect_square(self.k) {
            return err(format!("k = {} is not a perfect square", self.k));
        }
        for (name, v) in [
            ("slice_h", self.slice_h),
            ("slice_w", self.slice_w),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("num_classes", self.num_classes),
        ] {
            if v == 0 {
                return err(format!("{name} must be positive"));
            }
        }
        if !self.grid_h().is_multiple_of(self.patch_size)
            || !self.grid_w().is_multiple_of(self.patch_size)
        {
            return err(format!(
                "grid {}×{} is not divisible by patch size {}",
                self.grid_h(),
                self.grid_w(),
                self.patch_size
            ));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return err(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.channels != self.fusion.tower_channels() {
            return err(format!(
                "{:?} fusion needs {} channels per tower, config says {}",
                self.fusion,
                self.fusion.tower_channels(),
                self.channels
            ));
        }
        if !(self.ln_eps > 0.0) {
            return err(format!("ln_eps must be positive, got {}", self.ln_eps));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    ///
    /// Per tower: `P²C·D + (N+1)·D + D + L·(4D² + 8D + 2DH + H) + 2D` with
    /// `H = mlp_ratio·D`; the head adds `towers·D·classes + classes`.
    pub fn param_count(&self) -> usize {
        let d = self.embed_dim;
        let h = self.mlp_hidden();
        let per_layer = 4 * d * d + 8 * d + 2 * d * h + h;
        let tower = self.patch_dim() * d + self.seq_len() * d + d + self.layers * per_layer + 2 * d;
        self.towers() * tower + self.readout_dim() * self.num_classes + self.num_classes
    }
}
