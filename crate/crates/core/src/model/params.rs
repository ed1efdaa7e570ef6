//! Learnable tensors, their canonical names, and initialization.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{ModelConfig, ModelError};
use crate::numerics::{DualValue, Real, Tensor};
use crate::seed::{rng_for, stream};

/// One encoder layer: pre-norm attention block then pre-norm MLP block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gamma: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    /// Keys carry no bias: a shift shared by every key cancels in the softmax.
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub ln2_gamma: Tensor<T>,
    pub ln2_beta: Tensor<T>,
    pub fc1_w: Tensor<T>,
    pub fc1_b: Tensor<T>,
    pub fc2_w: Tensor<T>,
    pub fc2_b: Tensor<T>,
}

const LAYER_NAMES: [&str; 15] = [
    "ln1.gamma",
    "ln1.beta",
    "attn.q.weight",
    "attn.q.bias",
    "attn.k.weight",
    "attn.v.weight",
    "attn.v.bias",
    "attn.out.weight",
    "attn.out.bias",
    "ln2.gamma",
    "ln2.beta",
    "mlp.fc1.weight",
    "mlp.fc1.bias",
    "mlp.fc2.weight",
    "mlp.fc2.bias",
];

impl<T> LayerParams<T> {
    pub fn fields(&self) -> [&Tensor<T>; 15] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.fc1_w,
            &self.fc1_b,
            &self.fc2_w,
            &self.fc2_b,
        ]
    }

    pub fn fields_mut(&mut self) -> [&mut Tensor<T>; 15] {
        [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.fc1_w,
            &mut self.fc1_b,
            &mut self.fc2_w,
            &mut self.fc2_b,
        ]
    }
}

/// Patch embedding, positions, class token, layers, and the final norm of one tower.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    /// `[P²·C, D]`
    pub embed: Tensor<T>,
    /// `[N + 1, D]`; row 0 belongs to the class token.
    pub pos: Tensor<T>,
    pub class_token: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_gamma: Tensor<T>,
    pub final_beta: Tensor<T>,
}

/// All learnable tensors. Early fusion and single-modality models have one
/// tower; late fusion has one per modality and a head over both class tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub towers: Vec<EncoderParams<T>>,
    /// `[towers·D, classes]`
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
}

/// Canonical `(name, shape)` list implied by a config, in storage order.
pub fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.embed_dim;
    let h = cfg.mlp_hidden();
    let mut out = Vec::new();
    for t in 0..cfg.towers() {
        let p = format!("tower{t}");
        out.push((format!("{p}.embed"), vec![cfg.patch_dim(), d]));
        out.push((format!("{p}.pos"), vec![cfg.seq_len(), d]));
        out.push((format!("{p}.class_token"), vec![d]));
        for l in 0..cfg.layers {
            let shapes: [Vec<usize>; 15] = [
                vec![d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d],
                vec![d],
                vec![d, h],
                vec![h],
                vec![h, d],
                vec![d],
            ];
            for (name, s) in LAYER_NAMES.iter().zip(shapes) {
                out.push((format!("{p}.layer{l}.{name}"), s));
            }
        }
        out.push((format!("{p}.final_ln.gamma"), vec![d]));
        out.push((format!("{p}.final_ln.beta"), vec![d]));
    }
    out.push((
        "head.weight".into(),
        vec![cfg.readout_dim(), cfg.num_classes],
    ));
    out.push(("head.bias".into(), vec![cfg.num_classes]));
    out
}

/// Sample from a normal with the given std, redrawn outside ±2 std.
fn trunc_normal<R: Rng>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

impl<T: Real> ModelParams<T> {
    /// Initialization: truncated normal (std 0.02) for the patch embedding,
    /// positions, and every projection; zeros for biases and the class token;
    /// unit scale and zero shift for every layer norm.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = rng_for(seed, &[stream::INIT]);
        let named = expected_shapes(cfg)
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data: Vec<T> = if name.ends_with(".gamma") {
                    vec![T::one(); n]
                } else if name.ends_with(".bias")
                    || name.ends_with(".beta")
                    || name.ends_with("class_token")
                {
                    vec![T::zero(); n]
                } else {
                    (0..n)
                        .map(|_| T::lit(trunc_normal(&mut rng, 0.02)))
                        .collect()
                };
                (
                    name,
                    Tensor::from_vec(&shape, data).expect("shape from config"),
                )
            })
            .collect();
        Self::from_named(cfg, named)
    }

    /// Every tensor zero.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let named = expected_shapes(cfg)
            .into_iter()
            .map(|(n, s)| (n, Tensor::zeros(&s)))
            .collect();
        Self::from_named(cfg, named)
    }

    /// Rebuilds params from `(name, tensor)` pairs in canonical order.
    pub fn from_named(
        cfg: &ModelConfig,
        named: Vec<(String, Tensor<T>)>,
    ) -> Result<Self, ModelError> {
        let expected = expected_shapes(cfg);
        if named.len() != expected.len() {
            return Err(ModelError::Config(format!(
                "config implies {} tensors, got {}",
                expected.len(),
                named.len()
            )));
        }
        for ((name, t), (ename, eshape)) in named.iter().zip(&expected) {
            if name != ename {
                return Err(ModelError::Config(format!(
                    "expected tensor `{ename}`, got `{name}`"
                )));
            }
            if t.shape() != eshape.as_slice() {
                return Err(ModelError::ShapeContradiction {
                    tensor: name.clone(),
                    expected: eshape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        let mut it = named.into_iter().map(|(_, t)| t);
        let mut next = || it.next().expect("count checked");
        let mut towers = Vec::with_capacity(cfg.towers());
        for _ in 0..cfg.towers() {
            let embed = next();
            let pos = next();
            let class_token = next();
            let layers = (0..cfg.layers)
                .map(|_| LayerParams {
                    ln1_gamma: next(),
                    ln1_beta: next(),
                    wq: next(),
                    bq: next(),
                    wk: next(),
                    wv: next(),
                    bv: next(),
                    wo: next(),
                    bo: next(),
                    ln2_gamma: next(),
                    ln2_beta: next(),
                    fc1_w: next(),
                    fc1_b: next(),
                    fc2_w: next(),
                    fc2_b: next(),
                })
                .collect();
            towers.push(EncoderParams {
                embed,
                pos,
                class_token,
                layers,
                final_gamma: next(),
                final_beta: next(),
            });
        }
        let head_w = next();
        let head_b = next();
        Ok(Self {
            towers,
            head_w,
            head_b,
        })
    }

    /// Tensors in canonical order with their names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (t, tower) in self.towers.iter().enumerate() {
            let p = format!("tower{t}");
            out.push((format!("{p}.embed"), &tower.embed));
            out.push((format!("{p}.pos"), &tower.pos));
            out.push((format!("{p}.class_token"), &tower.class_token));
            for (l, layer) in tower.layers.iter().enumerate() {
                for (name, tensor) in LAYER_NAMES.iter().zip(layer.fields()) {
                    out.push((format!("{p}.layer{l}.{name}"), tensor));
                }
            }
            out.push((format!("{p}.final_ln.gamma"), &tower.final_gamma));
            out.push((format!("{p}.final_ln.beta"), &tower.final_beta));
        }
        out.push(("head.weight".into(), &self.head_w));
        out.push(("head.bias".into(), &self.head_b));
        out
    }

    /// Mutable tensors in canonical order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for tower in &mut self.towers {
            out.push(&mut tower.embed);
            out.push(&mut tower.pos);
            out.push(&mut tower.class_token);
            for layer in &mut tower.layers {
                out.extend(layer.fields_mut());
            }
            out.push(&mut tower.final_gamma);
            out.push(&mut tower.final_beta);
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.all_finite())
    }

    pub fn cast<U: Real>(&self, cfg: &ModelConfig) -> ModelParams<U> {
        let named = self
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.cast::<U>()))
            .collect();
        ModelParams::from_named(cfg, named).expect("same layout")
    }

    /// Parameters as zero-gradient dual values, in canonical order.
    pub fn to_duals(&self) -> Vec<DualValue<T>> {
        self.named_tensors()
            .into_iter()
            .map(|(n, t)| DualValue::new(n, t.clone()))
            .collect()
    }

    /// Writes dual values back in canonical order.
    pub fn load_duals(&mut self, duals: &[DualValue<T>]) {
        for (dst, d) in self.tensors_mut().into_iter().zip(duals) {
            dst.clone_from(&d.value);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FusionMode;

    #[test]
    fn census_matches_enumeration() {
        for cfg in [
            ModelConfig::default(),
            ModelConfig::micro(),
            ModelConfig::micro().with_fusion(FusionMode::Late),
            ModelConfig::micro().with_fusion(FusionMode::T2),
        ] {
            let p = ModelParams::<f32>::zeros(&cfg).unwrap();
            assert_eq!(p.param_count(), cfg.param_count(), "{cfg:?}");
        }
    }

    #[test]
    fn init_is_seeded_finite_and_bounded() {
        let cfg = ModelConfig::micro();
        let a = ModelParams::<f32>::init(&cfg, 3).unwrap();
        assert_eq!(a, ModelParams::init(&cfg, 3).unwrap());
        assert_ne!(a, ModelParams::init(&cfg, 4).unwrap());
        assert!(a.all_finite());
        assert!(a.towers[0].embed.data().iter().all(|v| v.abs() <= 0.04));
        assert!(a.towers[0].class_token.data().iter().all(|&v| v == 0.0));
        assert!(a.towers[0].layers[1]
            .ln2_gamma
            .data()
            .iter()
            .all(|&v| v == 1.0));
    }

    #[test]
    fn named_order_round_trips() {
        let cfg = ModelConfig::micro().with_fusion(FusionMode::Late);
        let a = ModelParams::<f64>::init(&cfg, 1).unwrap();
        let named = a
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        assert_eq!(ModelParams::from_named(&cfg, named).unwrap(), a);
        let names: Vec<_> = a.named_tensors().into_iter().map(|(n, _)| n).collect();
        let expected: Vec<_> = expected_shapes(&cfg).into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, expected);
    }
}
