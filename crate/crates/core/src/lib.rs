//! Grid-packed multimodal volume classification with a vision transformer.
//!
//! Consecutive slices of two co-registered modalities are tiled into a square
//! grid, fused along the channel axis, cut into patches and classified by a
//! pre-norm transformer encoder. Attention rollout explains the predictions.

pub mod data;
pub mod evaluation;
pub mod interpretability;
pub mod model;
pub mod numerics;
pub mod seed;
pub mod training;
