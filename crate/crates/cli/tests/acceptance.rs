//! Acceptance criteria, one PASS/FAIL line each. Exits nonzero if any fails.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use gridvit::data::{
    build_sample, central_window, gen_synthetic, load_records, load_volume, save_volume, DataError,
    FusionMode, GridSample, Modality, ScanRecord, SyntheticSpec, Volume,
};
use gridvit::evaluation::{nested_cv, render_table, stratified_folds};
use gridvit::interpretability::{average_heads, rollout, AttentionStack};
use gridvit::model::{
    forward_batch, forward_classify, load_checkpoint, patchify, save_checkpoint, ModelConfig,
    ModelError, ModelParams, ModelVars,
};
use gridvit::numerics::{grad_check, matmul, GradCheckOptions, NumericsError, Tensor};
use gridvit::seed::{rng_for, stream};
use gridvit::training::{evaluate, fit, Selection, TrainConfig, Trainer};
use rand::seq::SliceRandom;
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn synthetic(spec: &SyntheticSpec) -> (tempfile::TempDir, Vec<ScanRecord>) {
    let dir = tempfile::tempdir().expect("temp dir");
    gen_synthetic(spec, dir.path()).expect("synthetic data");
    let records = load_records(&dir.path().join("manifest.jsonl")).expect("records");
    (dir, records)
}

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

fn gradient_correctness() -> Outcome {
    let cfg = tiny(FusionMode::Early);
    ensure(cfg.grid_h() == 32 && cfg.channels == 2, || {
        "tiny geometry drifted".into()
    })?;
    let mut rng = rng_for(21, &[]);
    let base = ModelParams::<f64>::init(&cfg, 3).map_err(|e| e.to_string())?;
    // Spread weights so every gradient sits well above rounding noise.
    let tensors: Vec<Tensor<f64>> = base
        .named_tensors()
        .into_iter()
        .map(|(name, t)| {
            let centre = if name.ends_with("gamma") { 1.0 } else { 0.0 };
            let data = (0..t.len())
                .map(|_| centre + rng.random_range(-0.3..0.3))
                .collect();
            Tensor::from_vec(t.shape(), data).unwrap()
        })
        .collect();
    let shape = cfg.image_shape();
    let n: usize = shape.iter().product();
    let images: Vec<Tensor<f64>> = (0..2)
        .map(|_| Tensor::from_vec(&shape, (0..n).map(|_| rng.random()).collect()).unwrap())
        .collect();
    let refs: Vec<&Tensor<f64>> = images.iter().collect();
    let report = grad_check(
        |tape, vars| {
            let model = ModelVars::from_handles(&cfg, vars.to_vec())
                .map_err(|e| NumericsError::Validation(e.to_string()))?;
            let trace = forward_batch(tape, &model, &cfg, &refs)
                .map_err(|e| NumericsError::Validation(e.to_string()))?;
            tape.cross_entropy(trace.logits, &[0, 2])
        },
        &tensors,
        &GradCheckOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    let detail = format!(
        "max rel error {:.2e} over {} coordinates in {} tensors",
        report.max_rel_error,
        report.coordinates,
        tensors.len()
    );
    ensure(report.coordinates >= 200, || {
        format!("too few coordinates: {detail}")
    })?;
    ensure(report.max_rel_error <= 1e-4, || detail.clone())?;
    Ok(detail)
}

fn single_batch_overfit() -> Outcome {
    let cfg = ModelConfig::default();
    let spec = SyntheticSpec {
        cases_per_class: 3,
        height: cfg.slice_h,
        width: cfg.slice_w,
        ..SyntheticSpec::default()
    };
    let (_dir, records) = synthetic(&spec);
    let samples: Vec<GridSample> = records
        .iter()
        .take(8)
        .map(|r| {
            build_sample(
                r,
                central_window(r.depth(), cfg.k).unwrap(),
                cfg.k,
                cfg.fusion,
            )
            .unwrap()
        })
        .collect();
    let batch: Vec<&GridSample> = samples.iter().collect();
    let tcfg = TrainConfig::default();
    ensure(tcfg.lr == 0.003, || format!("learning rate is {}", tcfg.lr))?;
    let params = ModelParams::init(&cfg, 0).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(cfg, params, tcfg.adam()).map_err(|e| e.to_string())?;
    let mut last = f64::NAN;
    for step in 0..500 {
        last = trainer
            .train_step(&batch, 0, step)
            .map_err(|e| e.to_string())?;
        if last < 0.01 {
            return Ok(format!("cross-entropy {last:.5} after {step} updates"));
        }
    }
    Err(format!("cross-entropy {last:.5} after 500 steps"))
}

/// Every third block of three cases is held out; the generator interleaves
/// classes, so the split is balanced.
fn held_out_split(records: &[ScanRecord]) -> (Vec<ScanRecord>, Vec<ScanRecord>, Vec<ScanRecord>) {
    let (test, rest): (Vec<_>, Vec<_>) = records
        .iter()
        .cloned()
        .enumerate()
        .partition(|(i, _)| (i / 3) % 3 == 0);
    let rest: Vec<ScanRecord> = rest.into_iter().map(|(_, r)| r).collect();
    let cut = rest.len() * 4 / 5;
    let (train, val) = rest.split_at(cut);
    (
        train.to_vec(),
        val.to_vec(),
        test.into_iter().map(|(_, r)| r).collect(),
    )
}

fn held_out_accuracy(records: &[ScanRecord], tcfg: &TrainConfig) -> Result<(f64, usize), String> {
    let cfg = ModelConfig::micro();
    let (train, val, test) = held_out_split(records);
    let out = fit(&train, &val, &cfg, tcfg, None).map_err(|e| e.to_string())?;
    ensure(
        out.log.epochs.iter().all(|e| e.mean_loss.is_finite()),
        || "non-finite epoch loss".into(),
    )?;
    let ev = evaluate(&out.params, &cfg, &test).map_err(|e| e.to_string())?;
    let m = ev.metrics.ok_or("no test case scored")?;
    Ok((m.accuracy, out.log.best_epoch))
}

fn end_to_end_synthetic() -> Outcome {
    let spec = SyntheticSpec::default();
    ensure(spec.cases_per_class == 20 && spec.seed == 7, || {
        "synthetic defaults drifted".into()
    })?;
    let (_dir, records) = synthetic(&spec);
    let tcfg = TrainConfig {
        epochs: 60,
        selection: Selection::Loss,
        ..TrainConfig::default()
    };
    let (acc, best) = held_out_accuracy(&records, &tcfg)?;

    let mut labels: Vec<usize> = records.iter().map(|r| r.label).collect();
    labels.shuffle(&mut rng_for(7, &[stream::LABELS]));
    let permuted: Vec<ScanRecord> = records
        .iter()
        .zip(labels)
        .map(|(r, label)| ScanRecord { label, ..r.clone() })
        .collect();
    let (perm_acc, _) = held_out_accuracy(&permuted, &tcfg)?;
    let detail = format!(
        "held-out accuracy {acc:.3} (epoch {best} selected), permuted labels {perm_acc:.3}"
    );
    ensure(acc >= 0.95 && perm_acc <= 0.55, || detail.clone())?;
    Ok(detail)
}

fn fusion_ablation() -> Outcome {
    let (_dir, records) = synthetic(&SyntheticSpec::default());
    let tcfg = TrainConfig {
        epochs: 10,
        ..TrainConfig::default()
    };
    let base = ModelConfig::micro();
    let mut reports = Vec::new();
    for mode in FusionMode::ALL {
        let cfg = base.clone().with_fusion(mode);
        let sample = build_sample(&records[0], 1, cfg.k, mode).map_err(|e| e.to_string())?;
        let params = ModelParams::<f32>::init(&cfg, 0).map_err(|e| e.to_string())?;
        let out =
            forward_classify(&sample.image, &params, &cfg, false).map_err(|e| e.to_string())?;
        match mode {
            FusionMode::Early => ensure(sample.channels() == 2 && cfg.channels == 2, || {
                format!("early fusion feeds {} channels", sample.channels())
            })?,
            FusionMode::Late => ensure(out.readout.len() == 2 * cfg.embed_dim, || {
                format!("late fusion readout has length {}", out.readout.len())
            })?,
            _ => {}
        }
        let report = nested_cv(&records, 2, &cfg, &tcfg).map_err(|e| e.to_string())?;
        ensure(report.failed_folds == 0, || {
            format!("{}: {} folds failed", report.name, report.failed_folds)
        })?;
        reports.push(report);
    }
    let rows: Vec<_> = reports
        .iter()
        .map(|r| (r.name.as_str(), r.summary.as_ref().expect("summary")))
        .collect();
    let table = render_table(&rows);
    let body: Vec<&str> = table
        .lines()
        .filter(|l| l.matches(" ± ").count() == 3)
        .collect();
    ensure(body.len() == 4, || {
        format!("expected four report rows:\n{table}")
    })?;
    let cell_ok = |cell: &str| {
        let (m, s) = cell.split_once(" ± ").unwrap();
        m.len() == 4 && s.len() == 4 && m.parse::<f64>().is_ok() && s.parse::<f64>().is_ok()
    };
    for line in &body {
        let cells: Vec<&str> = line
            .split("   ")
            .map(str::trim)
            .filter(|c| c.contains(" ± "))
            .collect();
        ensure(cells.len() == 3 && cells.iter().all(|c| cell_ok(c)), || {
            format!("malformed row `{line}`")
        })?;
    }
    let accs: Vec<String> = reports
        .iter()
        .map(|r| format!("{} {}", r.name, r.summary.as_ref().unwrap().accuracy))
        .collect();
    Ok(accs.join(", "))
}

fn random_stack(rng: &mut impl Rng) -> AttentionStack {
    let layers = rng.random_range(1..=6);
    let heads = rng.random_range(1..=4);
    let t = rng.random_range(1..=37);
    let layers = (0..layers)
        .map(|_| {
            let mut data: Vec<f64> = (0..heads * t * t)
                .map(|_| rng.random::<f64>().powi(3))
                .collect();
            for row in data.chunks_mut(t) {
                let s: f64 = row.iter().sum::<f64>() + 1e-12;
                row.iter_mut().for_each(|v| *v /= s);
            }
            Tensor::from_vec(&[heads, t, t], data).unwrap()
        })
        .collect();
    AttentionStack { layers }
}

fn rollout_invariants() -> Outcome {
    let mut rng = rng_for(5, &[]);
    let (mut worst_row, mut worst_split) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let stack = random_stack(&mut rng);
        let avg = average_heads(&stack);
        let r = rollout(&avg).map_err(|e| e.to_string())?;
        let t = stack.tokens();
        for row in r.matrix.data().chunks(t) {
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        if avg.len() >= 2 {
            let m = rng.random_range(1..avg.len());
            let lower = rollout(&avg[..m]).unwrap().matrix;
            let upper = rollout(&avg[m..]).unwrap().matrix;
            worst_split = worst_split.max(matmul(&upper, &lower).unwrap().max_abs_diff(&r.matrix));
        }
        let identity = AttentionStack {
            layers: stack
                .layers
                .iter()
                .map(|l| {
                    let (h, t) = (l.shape()[0], l.shape()[1]);
                    let eye = Tensor::<f64>::eye(t);
                    Tensor::from_vec(&[h, t, t], eye.data().repeat(h)).unwrap()
                })
                .collect(),
        };
        let ri = rollout(&average_heads(&identity)).unwrap();
        ensure(ri.matrix == Tensor::eye(t), || {
            "identity stack did not roll out to identity".into()
        })?;
    }
    let detail =
        format!("max row-sum error {worst_row:.1e}, max split-composition error {worst_split:.1e}");
    ensure(worst_row <= 1e-6 && worst_split <= 1e-6, || detail.clone())?;
    Ok(detail)
}

fn geometry() -> Outcome {
    let cfg = ModelConfig::default();
    ensure(
        (cfg.k, cfg.slice_h, cfg.slice_w, cfg.patch_size) == (9, 64, 64, 16),
        || "default geometry drifted".into(),
    )?;
    let shape = cfg.image_shape();
    let n: usize = shape.iter().product();
    let mut rng = rng_for(1, &[]);
    let image = Tensor::<f32>::from_vec(&shape, (0..n).map(|_| rng.random()).collect()).unwrap();
    let patches = patchify(&image, cfg.patch_size).map_err(|e| e.to_string())?;
    let params = ModelParams::<f32>::init(&cfg, 0).map_err(|e| e.to_string())?;
    let out = forward_classify(&image, &params, &cfg, true).map_err(|e| e.to_string())?;
    let tokens = out.attention[0].tokens();
    let detail = format!(
        "{} patches, {tokens} tokens, {} logits",
        patches.shape()[0],
        out.logits.scores.len()
    );
    ensure(
        patches.shape()[0] == 144 && cfg.num_patches() == 144,
        || detail.clone(),
    )?;
    ensure(
        tokens == 145
            && out.attention[0]
                .layers
                .iter()
                .all(|l| l.shape() == [3, 145, 145]),
        || detail.clone(),
    )?;
    Ok(detail)
}

fn cv_harness() -> Outcome {
    let cases: Vec<(String, usize)> = (0..139)
        .map(|i| (format!("case{i:03}"), [0, 0, 1, 2, 1][i % 5]))
        .collect();
    let plan = stratified_folds(&cases, 10, 42).map_err(|e| e.to_string())?;
    let again = stratified_folds(&cases, 10, 42).map_err(|e| e.to_string())?;
    ensure(plan.assignment == again.assignment, || {
        "two runs with one seed differ".into()
    })?;
    let mut seen = vec![0usize; cases.len()];
    for f in 0..10 {
        for i in plan.test_indices(f) {
            seen[i] += 1;
        }
    }
    ensure(seen.iter().all(|&c| c == 1), || {
        "folds do not partition the cases".into()
    })?;
    let sizes = plan.fold_sizes();
    ensure(sizes.iter().all(|s| *s == 13 || *s == 14), || {
        format!("fold sizes {sizes:?}")
    })?;
    for class in 0..3 {
        let per_fold: Vec<usize> = (0..10)
            .map(|f| {
                plan.test_indices(f)
                    .iter()
                    .filter(|&&i| cases[i].1 == class)
                    .count()
            })
            .collect();
        let spread = per_fold.iter().max().unwrap() - per_fold.iter().min().unwrap();
        ensure(spread <= 1, || {
            format!("class {class} per-fold counts {per_fold:?}")
        })?;
    }
    Ok(format!("fold sizes {sizes:?}"))
}

fn replace_once(bytes: &mut Vec<u8>, from: &str, to: &str) -> bool {
    let Some(at) = bytes.windows(from.len()).position(|w| w == from.as_bytes()) else {
        return false;
    };
    bytes.splice(at..at + from.len(), to.bytes());
    true
}

fn serialization() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let (t1, _) = SyntheticSpec::default().generate_case(2, 0);
    let vpath = d.join("case.rvf");
    save_volume(&t1, &vpath).map_err(|e| e.to_string())?;
    let back = load_volume(&vpath).map_err(|e| e.to_string())?;
    let bits = |v: &Volume| v.voxels.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    ensure(
        bits(&back) == bits(&t1) && back.extents() == t1.extents(),
        || "volume round trip differs".into(),
    )?;
    ensure(
        back.modality == Modality::T1 && back.case_id == t1.case_id,
        || "volume header differs".into(),
    )?;
    let raw = fs::read(&vpath).unwrap();
    fs::write(d.join("short.rvf"), &raw[..raw.len() - 4]).unwrap();
    ensure(
        matches!(
            load_volume(&d.join("short.rvf")),
            Err(DataError::Truncated { .. })
        ),
        || "truncated volume not rejected as truncated".into(),
    )?;

    let cfg = ModelConfig {
        embed_dim: 16,
        ..ModelConfig::micro()
    };
    let params = ModelParams::<f32>::init(&cfg, 9).map_err(|e| e.to_string())?;
    let ck = d.join("model.gvck");
    save_checkpoint(&params, &cfg, &ck).map_err(|e| e.to_string())?;
    let (loaded, loaded_cfg) = load_checkpoint(&ck).map_err(|e| e.to_string())?;
    ensure(loaded_cfg == cfg, || "config round trip differs".into())?;
    for ((name, a), (_, b)) in params
        .named_tensors()
        .into_iter()
        .zip(loaded.named_tensors())
    {
        let same = a.shape() == b.shape()
            && a.data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
        ensure(same, || format!("tensor {name} differs after reload"))?;
    }
    let (_dir, records) = synthetic(&SyntheticSpec {
        cases_per_class: 1,
        ..SyntheticSpec::default()
    });
    let sample = build_sample(&records[0], 1, cfg.k, cfg.fusion).unwrap();
    let before = forward_classify(&sample.image, &params, &cfg, false).unwrap();
    let after = forward_classify(&sample.image, &loaded, &cfg, false).unwrap();
    let logit_bits = |s: &[f64]| s.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    ensure(
        logit_bits(&before.logits.scores) == logit_bits(&after.logits.scores),
        || "logits differ after reload".into(),
    )?;

    let raw = fs::read(&ck).unwrap();
    let corrupt = |name: &str, bytes: &[u8]| {
        let p = d.join(name);
        fs::write(&p, bytes).unwrap();
        load_checkpoint(&p)
    };
    let mut magic = raw.clone();
    magic[0] = b'X';
    let mut version = raw.clone();
    version[4] = b'7';
    let mut claims = raw.clone();
    ensure(
        replace_once(&mut claims, "\"embed_dim\":16", "\"embed_dim\":32"),
        || "config key not found".into(),
    )?;
    let checks = [
        (
            "bad magic",
            matches!(
                corrupt("magic.gvck", &magic),
                Err(ModelError::BadMagic { .. })
            ),
        ),
        (
            "version",
            matches!(
                corrupt("version.gvck", &version),
                Err(ModelError::Version { .. })
            ),
        ),
        (
            "truncation",
            matches!(corrupt("short.gvck", &raw[..raw.len() - 3]), Err(ModelError::Truncated { tensor }) if tensor == "head.bias"),
        ),
        (
            "shape contradiction",
            matches!(
                corrupt("claims.gvck", &claims),
                Err(ModelError::ShapeContradiction { .. })
            ),
        ),
    ];
    for (what, ok) in checks {
        ensure(ok, || {
            format!("{what} corruption not rejected with its error class")
        })?;
    }
    Ok("volume, checkpoint and logits bit-exact; 4 corruption classes rejected".into())
}

fn run_train(dir: &Path, out: &str) -> Result<(Vec<u8>, Vec<u8>), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_gridvit"))
        .current_dir(dir)
        .args([
            "--quiet", "--seed", "11", "--config", "run.json", "train", "--out", out,
        ])
        .output()
        .map_err(|e| e.to_string())?;
    ensure(status.status.success(), || {
        String::from_utf8_lossy(&status.stderr).into_owned()
    })?;
    let ck = dir.join(out);
    let log = ck.with_extension("trainlog.jsonl");
    Ok((fs::read(&ck).unwrap(), fs::read(log).unwrap()))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_synthetic(
        &SyntheticSpec {
            cases_per_class: 6,
            ..SyntheticSpec::default()
        },
        &d.join("data"),
    )
    .map_err(|e| e.to_string())?;
    let model = serde_json::to_string(&ModelConfig::micro()).unwrap();
    let config =
        format!(r#"{{"model":{model},"manifest":"data/manifest.jsonl","train":{{"epochs":4}}}}"#);
    fs::write(d.join("run.json"), config).unwrap();
    let (ck_a, log_a) = run_train(d, "a/model.gvck")?;
    let (ck_b, log_b) = run_train(d, "b/model.gvck")?;
    ensure(ck_a == ck_b, || "checkpoints differ".into())?;
    ensure(log_a == log_b, || "training logs differ".into())?;
    Ok(format!(
        "{} checkpoint bytes and {} log bytes identical",
        ck_a.len(),
        log_a.len()
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient correctness", gradient_correctness),
        ("single-batch overfit", single_batch_overfit),
        ("end-to-end synthetic classification", end_to_end_synthetic),
        ("fusion ablation parity", fusion_ablation),
        ("rollout invariants", rollout_invariants),
        ("geometry", geometry),
        ("cross-validation harness", cv_harness),
        ("serialization", serialization),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {}. {name}: {detail} ({secs:.1}s)", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {}. {name}: {detail} ({secs:.1}s)", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
