use gridvit::data::FusionMode;
use gridvit::model::{forward_batch, ModelConfig, ModelError, ModelParams, ModelVars};
use gridvit::numerics::NumericsError;
use gridvit::numerics::{grad_check, GradCheckOptions, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(fusion: FusionMode) -> ModelConfig {
    ModelConfig {
        k: 4,
        slice_h: 16,
        slice_w: 16,
        patch_size: 8,
        embed_dim: 16,
        layers: 2,
        heads: 2,
        mlp_ratio: 2,
        ..ModelConfig::default()
    }
    .with_fusion(fusion)
}

/// Random weights at a scale where every gradient is well above rounding noise.
fn spread(cfg: &ModelConfig, seed: u64) -> Vec<Tensor<f64>> {
    let p = ModelParams::<f64>::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = move || rng.random_range(-0.3..0.3);
    p.named_tensors()
        .into_iter()
        .map(|(name, t)| {
            let centre = if name.ends_with("gamma") { 1.0 } else { 0.0 };
            let n = t.len();
            Tensor::from_vec(t.shape(), (0..n).map(|_| centre + draw()).collect()).unwrap()
        })
        .collect()
}

fn check(fusion: FusionMode) -> f64 {
    let cfg = tiny(fusion);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let images: Vec<Tensor<f64>> = (0..2)
        .map(|_| {
            let shape = cfg.image_shape();
            let n = shape.iter().product();
            Tensor::from_vec(&shape, (0..n).map(|_| rng.random()).collect()).unwrap()
        })
        .collect();
    let tensors = spread(&cfg, 5);
    let report = grad_check(
        |tape, vars| {
            let model = ModelVars::from_handles(&cfg, vars.to_vec()).expect("handle count");
            let refs: Vec<&Tensor<f64>> = images.iter().collect();
            let trace = forward_batch(tape, &model, &cfg, &refs).map_err(|e| match e {
                ModelError::Numerics(n) => n,
                other => NumericsError::Validation(other.to_string()),
            })?;
            tape.cross_entropy(trace.logits, &[1, 2])
        },
        &tensors,
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.coordinates >= 200);
    report.max_rel_error
}

#[test]
fn early_fusion_gradients_match_finite_differences() {
    let err = check(FusionMode::Early);
    assert!(err <= 1e-4, "max relative error {err}");
}

#[test]
fn late_fusion_gradients_match_finite_differences() {
    let err = check(FusionMode::Late);
    assert!(err <= 1e-4, "max relative error {err}");
}
