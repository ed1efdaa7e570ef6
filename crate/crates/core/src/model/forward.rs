//! Forward passes on the autodiff tape.
//!
//! Samples in a batch are stacked along rows: token matrices are
//! `[batch·(N+1), D]` and each sample occupies a contiguous block.

use super::params::{EncoderParams, LayerParams, ModelParams};
use super::{expected_shapes, ModelConfig, ModelError};
use crate::data::FusionMode;
use crate::interpretability::AttentionStack;
use crate::numerics::{NumericsError, Real, Tape, Tensor, Var};

/// Cuts `[GH, GW, C]` into row-major `P×P` patches flattened in
/// `(row, col, channel)` order, giving `[N, P²·C]`.
pub fn patchify<T: Real>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>, ModelError> {
    let c = image_dims(image)?.2;
    patchify_channels(image, patch, 0, c)
}

/// Like [`patchify`] but keeps only channels `first..first + count`.
pub fn patchify_channels<T: Real>(
    image: &Tensor<T>,
    patch: usize,
    first: usize,
    count: usize,
) -> Result<Tensor<T>, ModelError> {
    let (gh, gw, c) = image_dims(image)?;
    if patch == 0 || gh % patch != 0 || gw % patch != 0 {
        return Err(ModelError::Config(format!(
            "image {gh}×{gw} is not divisible by patch size {patch}"
        )));
    }
    if count == 0 || first + count > c {
        return Err(ModelError::Config(format!(
            "channels {first}..{} out of range for a {c}-channel image",
            first + count
        )));
    }
    let (ph, pw) = (gh / patch, gw / patch);
    let src = image.data();
    let mut out = Vec::with_capacity(ph * pw * patch * patch * count);
    for pr in 0..ph {
        for pc in 0..pw {
            for r in 0..patch {
                let row = (pr * patch + r) * gw;
                for col in 0..patch {
                    let base = (row + pc * patch + col) * c + first;
                    out.extend_from_slice(&src[base..base + count]);
                }
            }
        }
    }
    Ok(Tensor::from_vec(&[ph * pw, patch * patch * count], out)?)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Real>(
    patches: &Tensor<T>,
    grid_h: usize,
    grid_w: usize,
    channels: usize,
    patch: usize,
) -> Result<Tensor<T>, ModelError> {
    let (n, len) = patches.dims2()?;
    if patch == 0
        || !grid_h.is_multiple_of(patch)
        || !grid_w.is_multiple_of(patch)
        || n != (grid_h / patch) * (grid_w / patch)
        || len != patch * patch * channels
    {
        return Err(ModelError::Config(format!(
            "patches {:?} do not tile a {grid_h}×{grid_w}×{channels} image with patch size {patch}",
            patches.shape()
        )));
    }
    let pw = grid_w / patch;
    let mut out = vec![T::zero(); grid_h * grid_w * channels];
    for (i, p) in patches.data().chunks(len).enumerate() {
        let (pr, pc) = (i / pw, i % pw);
        for r in 0..patch {
            for col in 0..patch {
                let dst = ((pr * patch + r) * grid_w + pc * patch + col) * channels;
                let s = (r * patch + col) * channels;
                out[dst..dst + channels].copy_from_slice(&p[s..s + channels]);
            }
        }
    }
    Ok(Tensor::from_vec(&[grid_h, grid_w, channels], out)?)
}

fn image_dims<T: Real>(image: &Tensor<T>) -> Result<(usize, usize, usize), ModelError> {
    match image.shape() {
        [h, w, c] => Ok((*h, *w, *c)),
        s => Err(ModelError::Config(format!(
            "expected an [H, W, C] image, got {s:?}"
        ))),
    }
}

/// Tape handles for one encoder tower.
#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub embed: Var,
    pub pos: Var,
    pub class_token: Var,
    /// Per layer, in the same order as [`LayerParams::fields`].
    pub layers: Vec<[Var; 15]>,
    pub final_gamma: Var,
    pub final_beta: Var,
}

/// Tape handles for every parameter.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub towers: Vec<EncoderVars>,
    pub head_w: Var,
    pub head_b: Var,
    /// All handles in canonical parameter order.
    pub all: Vec<Var>,
}

impl ModelVars {
    /// Groups handles given in canonical parameter order.
    pub fn from_handles(cfg: &ModelConfig, all: Vec<Var>) -> Result<Self, ModelError> {
        let per_tower = 5 + 15 * cfg.layers;
        if all.len() != cfg.towers() * per_tower + 2 {
            return Err(ModelError::Config(format!(
                "config implies {} parameter handles, got {}",
                cfg.towers() * per_tower + 2,
                all.len()
            )));
        }
        let mut it = all.iter().copied();
        let mut next = || it.next().expect("count checked");
        let towers = (0..cfg.towers())
            .map(|_| {
                let embed = next();
                let pos = next();
                let class_token = next();
                let layers = (0..cfg.layers)
                    .map(|_| std::array::from_fn(|_| next()))
                    .collect();
                EncoderVars {
                    embed,
                    pos,
                    class_token,
                    layers,
                    final_gamma: next(),
                    final_beta: next(),
                }
            })
            .collect();
        let head_w = next();
        let head_b = next();
        Ok(Self {
            towers,
            head_w,
            head_b,
            all,
        })
    }
}

/// Places every parameter on the tape, as trainable leaves or as constants.
pub fn register_params<T: Real>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    trainable: bool,
) -> Result<ModelVars, ModelError> {
    check_params(cfg, params)?;
    let all: Vec<Var> = params
        .named_tensors()
        .into_iter()
        .map(|(_, t)| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect();
    ModelVars::from_handles(cfg, all)
}

fn tape_tokens<T: Real>(
    tape: &mut Tape<T>,
    patches: Var,
    enc: &EncoderVars,
    batch: usize,
) -> Result<Var, NumericsError> {
    let embedded = tape.matmul(patches, enc.embed)?;
    tape.assemble_tokens(embedded, enc.class_token, enc.pos, batch)
}

/// Returns the layer output and the attention node.
fn tape_layer<T: Real>(
    tape: &mut Tape<T>,
    z: Var,
    p: &[Var; 15],
    batch: usize,
    heads: usize,
    eps: T,
) -> Result<(Var, Var), NumericsError> {
    let [ln1_g, ln1_b, wq, bq, wk, wv, bv, wo, bo, ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b] = *p;
    let x = tape.layer_norm(z, ln1_g, ln1_b, eps)?;
    let q = tape.linear(x, wq, bq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.linear(x, wv, bv)?;
    let attn = tape.attention(q, k, v, batch, heads)?;
    let proj = tape.linear(attn, wo, bo)?;
    let z_mid = tape.add(proj, z)?;
    let x = tape.layer_norm(z_mid, ln2_g, ln2_b, eps)?;
    let h = tape.linear(x, fc1_w, fc1_b)?;
    let h = tape.gelu(h);
    let m = tape.linear(h, fc2_w, fc2_b)?;
    Ok((tape.add(m, z_mid)?, attn))
}

/// `z₀`: the class token followed by each projected patch, plus positions.
///
/// `patches` is `[N, P²·C]`; the result is `[N + 1, D]`.
pub fn build_token_sequence<T: Real>(
    patches: &Tensor<T>,
    params: &EncoderParams<T>,
) -> Result<Tensor<T>, ModelError> {
    let (n, len) = patches.dims2()?;
    let (embed_in, _) = params.embed.dims2()?;
    let (pos_rows, _) = params.pos.dims2()?;
    if len != embed_in || n + 1 != pos_rows {
        return Err(ModelError::Config(format!(
            "{n} patches of length {len} do not match embedding {:?} and positions {:?}",
            params.embed.shape(),
            params.pos.shape()
        )));
    }
    let mut tape = Tape::new();
    let x = tape.constant(patches.clone());
    let enc = EncoderVars {
        embed: tape.constant(params.embed.clone()),
        pos: tape.constant(params.pos.clone()),
        class_token: tape.constant(params.class_token.clone()),
        layers: Vec::new(),
        final_gamma: x,
        final_beta: x,
    };
    let z = tape_tokens(&mut tape, x, &enc, 1)?;
    Ok(tape.value(z).clone())
}

/// Output of a single encoder layer applied to one token sequence.
#[derive(Debug, Clone)]
pub struct LayerOutput<T> {
    pub tokens: Tensor<T>,
    /// `[heads, N+1, N+1]` softmax weights, when requested.
    pub attention: Option<Tensor<f64>>,
}

/// One pre-norm layer: `z' = MSA(LN z) + z`, then `MLP(LN z') + z'`.
pub fn encoder_layer<T: Real>(
    z: &Tensor<T>,
    params: &LayerParams<T>,
    heads: usize,
    eps: f64,
    record: bool,
) -> Result<LayerOutput<T>, ModelError> {
    z.dims2()?;
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let vars: [Var; 15] = params.fields().map(|t| tape.constant(t.clone()));
    let (out, attn) = tape_layer(&mut tape, zv, &vars, 1, heads, T::lit(eps))?;
    let attention = record.then(|| attention_tensor(&tape, attn, 0));
    Ok(LayerOutput {
        tokens: tape.value(out).clone(),
        attention,
    })
}

fn attention_tensor<T: Real>(tape: &Tape<T>, node: Var, sample: usize) -> Tensor<f64> {
    let (probs, batch, heads) = tape.attention_probs(node).expect("attention node");
    let per = probs.len() / batch;
    let seq = ((per / heads) as f64).sqrt().round() as usize;
    let data = probs[sample * per..(sample + 1) * per]
        .iter()
        .map(|p| p.as_f64())
        .collect();
    Tensor::from_vec(&[heads, seq, seq], data).expect("probs layout")
}

/// Handles produced by [`forward_batch`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `[batch, classes]`
    pub logits: Var,
    /// Final-norm class tokens of every tower side by side, `[batch, towers·D]`.
    pub readout: Var,
    /// Attention nodes indexed by tower then layer.
    pub attention: Vec<Vec<Var>>,
}

/// Runs a batch of `[GH, GW, C]` images through the model.
///
/// Late fusion feeds channel `t` of each image to tower `t`.
pub fn forward_batch<T: Real>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    cfg: &ModelConfig,
    images: &[&Tensor<T>],
) -> Result<ForwardTrace, ModelError> {
    if images.is_empty() {
        return Err(ModelError::Config("empty batch".into()));
    }
    if vars.towers.len() != cfg.towers() {
        return Err(ModelError::Config(format!(
            "config needs {} towers, parameters have {}",
            cfg.towers(),
            vars.towers.len()
        )));
    }
    let want = cfg.image_shape();
    for img in images {
        if img.shape() != want {
            return Err(ModelError::Config(format!(
                "image {:?} does not match the configured {want:?}",
                img.shape()
            )));
        }
    }
    let batch = images.len();
    let eps = T::lit(cfg.ln_eps);
    let mut class_tokens = Vec::with_capacity(vars.towers.len());
    let mut attention = Vec::with_capacity(vars.towers.len());
    for (t, enc) in vars.towers.iter().enumerate() {
        let first = t * cfg.channels;
        let mut rows = Vec::with_capacity(batch * cfg.num_patches() * cfg.patch_dim());
        for img in images {
            rows.extend(patchify_channels(img, cfg.patch_size, first, cfg.channels)?.into_data());
        }
        let patches = tape.constant(Tensor::from_vec(
            &[batch * cfg.num_patches(), cfg.patch_dim()],
            rows,
        )?);
        let mut z = tape_tokens(tape, patches, enc, batch)?;
        let mut maps = Vec::with_capacity(enc.layers.len());
        for layer in &enc.layers {
            let (next, attn) = tape_layer(tape, z, layer, batch, cfg.heads, eps)?;
            z = next;
            maps.push(attn);
        }
        let cls = tape.class_rows(z, batch)?;
        class_tokens.push(tape.layer_norm(cls, enc.final_gamma, enc.final_beta, eps)?);
        attention.push(maps);
    }
    let readout = if class_tokens.len() == 1 {
        class_tokens[0]
    } else {
        tape.concat_cols(&class_tokens)?
    };
    let logits = tape.linear(readout, vars.head_w, vars.head_b)?;
    Ok(ForwardTrace {
        logits,
        readout,
        attention,
    })
}

/// Class scores for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub scores: Vec<f64>,
}

impl Logits {
    /// Index of the largest score; ties go to the lower class.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &s) in self.scores.iter().enumerate() {
            if s > self.scores[best] {
                best = i;
            }
        }
        best
    }
}

/// Result of classifying one image.
#[derive(Debug, Clone)]
pub struct Classification {
    pub logits: Logits,
    /// The normalized class token(s) fed to the head.
    pub readout: Vec<f64>,
    /// One stack per tower when recording, otherwise empty.
    pub attention: Vec<AttentionStack>,
}

fn check_params<T: Real>(cfg: &ModelConfig, params: &ModelParams<T>) -> Result<(), ModelError> {
    cfg.validate()?;
    let named = params.named_tensors();
    let expected = expected_shapes(cfg);
    if named.len() != expected.len() {
        return Err(ModelError::Config(format!(
            "config implies {} tensors, parameters have {}",
            expected.len(),
            named.len()
        )));
    }
    for ((name, t), (_, shape)) in named.iter().zip(&expected) {
        if t.shape() != shape.as_slice() {
            return Err(ModelError::ShapeContradiction {
                tensor: name.clone(),
                expected: shape.clone(),
                found: t.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Inference on one image; parameters are placed on the tape as constants.
pub fn forward_classify<T: Real>(
    image: &Tensor<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    record: bool,
) -> Result<Classification, ModelError> {
    let mut tape = Tape::new();
    let vars = register_params(&mut tape, params, cfg, false)?;
    let trace = forward_batch(&mut tape, &vars, cfg, &[image])?;
    let scores: Vec<f64> = tape
        .value(trace.logits)
        .data()
        .iter()
        .map(|v| v.as_f64())
        .collect();
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(NumericsError::NonFinite {
            name: "logits".into(),
            detail: format!("class {i} score is {}", scores[i]),
        }
        .into());
    }
    let readout = tape
        .value(trace.readout)
        .data()
        .iter()
        .map(|v| v.as_f64())
        .collect();
    let attention = if record {
        trace
            .attention
            .iter()
            .map(|layers| AttentionStack {
                layers: layers
                    .iter()
                    .map(|&a| attention_tensor(&tape, a, 0))
                    .collect(),
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(Classification {
        logits: Logits { scores },
        readout,
        attention,
    })
}

/// Two single-channel grids through a late-fusion model.
pub fn forward_late_fusion<T: Real>(
    t1_grid: &Tensor<T>,
    t2_grid: &Tensor<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<Logits, ModelError> {
    if cfg.fusion != FusionMode::Late || cfg.channels != 1 {
        return Err(ModelError::Config(format!(
            "late fusion needs a two-tower single-channel config, got {:?} with {} channels",
            cfg.fusion, cfg.channels
        )));
    }
    let (h, w, c) = image_dims(t1_grid)?;
    if t2_grid.shape() != [h, w, c] || c != 1 {
        return Err(ModelError::Config(format!(
            "modality grids {:?} and {:?} must both be single-channel and equal in size",
            t1_grid.shape(),
            t2_grid.shape()
        )));
    }
    let mut both = Vec::with_capacity(2 * h * w);
    for (&a, &b) in t1_grid.data().iter().zip(t2_grid.data()) {
        both.push(a);
        both.push(b);
    }
    let image = Tensor::from_vec(&[h, w, 2], both)?;
    Ok(forward_classify(&image, params, cfg, false)?.logits)
}
