//! Flip and quarter-turn augmentation applied identically to every slice.
//!
//! Each slice is transformed in place inside its grid cell; the grid layout
//! itself never moves, so cell `i` still holds slice `i` afterwards.

use rand::Rng;

use super::{DataError, GridSample};
use crate::numerics::Tensor;

/// One augmentation decision shared by all slices and channels of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentDraw {
    pub flip: bool,
    /// Counter-clockwise quarter turns in `0..4`.
    pub quarter_turns: u8,
}

impl AugmentDraw {
    pub const IDENTITY: Self = Self {
        flip: false,
        quarter_turns: 0,
    };

    /// Flip with probability 0.5 and a uniform turn count. Non-square slices
    /// only admit half turns, so odd counts are never drawn for them.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, square: bool) -> Self {
        let flip = rng.random_bool(0.5);
        let quarter_turns = if square {
            rng.random_range(0..4u8)
        } else {
            2 * rng.random_range(0..2u8)
        };
        Self {
            flip,
            quarter_turns,
        }
    }
}

/// Draws and applies a random augmentation.
pub fn augment<R: Rng + ?Sized>(sample: &GridSample, rng: &mut R) -> GridSample {
    let (h, w) = sample.slice_extents();
    let draw = AugmentDraw::sample(rng, h == w);
    apply_augment(sample, draw).expect("draw is valid for these slice extents")
}

/// Applies `draw` to every slice of every channel.
pub fn apply_augment(sample: &GridSample, draw: AugmentDraw) -> Result<GridSample, DataError> {
    let (h, w) = sample.slice_extents();
    let turns = draw.quarter_turns % 4;
    if h != w && turns % 2 == 1 {
        return Err(DataError::Validation(format!(
            "quarter turn of a non-square {h}×{w} slice"
        )));
    }
    if !draw.flip && turns == 0 {
        return Ok(sample.clone());
    }
    let side = sample.side();
    let c = sample.channels();
    let gw = side * w;
    let src = sample.image.data();
    let mut out = vec![0.0f32; src.len()];
    let at = |cell_r: usize, cell_c: usize, r: usize, col: usize, ch: usize| {
        ((cell_r * h + r) * gw + cell_c * w + col) * c + ch
    };
    for cell_r in 0..side {
        for cell_c in 0..side {
            for r in 0..h {
                for col in 0..w {
                    // source pixel after the inverse rotation, then the inverse flip
                    let (sr, mut sc) = match turns {
                        0 => (r, col),
                        1 => (col, w - 1 - r),
                        2 => (h - 1 - r, w - 1 - col),
                        _ => (h - 1 - col, r),
                    };
                    if draw.flip {
                        sc = w - 1 - sc;
                    }
                    for ch in 0..c {
                        out[at(cell_r, cell_c, r, col, ch)] = src[at(cell_r, cell_c, sr, sc, ch)];
                    }
                }
            }
        }
    }
    Ok(GridSample {
        image: Tensor::from_vec(sample.image.shape(), out).expect("same shape"),
        ..sample.clone()
    })
}
