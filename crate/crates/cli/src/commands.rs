use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use gridvit::data::{
    build_sample, central_window, gen_synthetic, load_records, parse_manifest, FusionMode,
    ScanRecord, SyntheticSpec,
};
use gridvit::evaluation::{nested_cv, render_table, stratified_holdout, summarize, CVReport};
use gridvit::interpretability::{
    average_heads, class_attention_map, export_heatmap, rollout, PatchGrid,
};
use gridvit::model::{
    expected_shapes, forward_classify, load_checkpoint, save_checkpoint, ModelConfig,
};
use gridvit::training::{evaluate, fit_with_progress, TrainLog};
use serde::Serialize;

use crate::error::{checkpoint_error, io_error, CliError};
use crate::{Context, DataArgs, EvalArgs, ExplainArgs, SynthArgs, TrainArgs};

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_error(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes") + "\n"
}

pub fn synth(ctx: &Context, args: &SynthArgs) -> Result<(), CliError> {
    let mut spec = match &args.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_error(p, e))?;
            serde_json::from_str::<SyntheticSpec>(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => SyntheticSpec::default(),
    };
    if ctx.seed_overridden {
        spec.seed = ctx.run.seed;
    }
    spec.validate()?;
    ctx.log(format!("seed: {}", spec.seed));
    let entries = gen_synthetic(&spec, &args.out)?;
    let mut counts = BTreeMap::new();
    for e in &entries {
        *counts.entry(e.label).or_insert(0usize) += 1;
    }
    println!("wrote {} cases to {}", entries.len(), args.out.display());
    for (label, n) in counts {
        println!("class {label}: {n} cases");
    }
    Ok(())
}

fn apply_data_args(ctx: &mut Context, data: &DataArgs) {
    if let Some(m) = &data.manifest {
        ctx.run.manifest = Some(m.clone());
    }
    if let Some(f) = data.fusion {
        ctx.run.fusion = f;
    }
    if let Some(e) = data.epochs {
        ctx.run.train.epochs = e;
    }
}

/// Loads the manifest and checks every case against the model geometry.
fn load_cases(ctx: &Context, cfg: &ModelConfig) -> Result<Vec<ScanRecord>, CliError> {
    let records = load_records(ctx.run.manifest()?)?;
    if records.is_empty() {
        return Err(CliError::Config("the manifest lists no cases".into()));
    }
    for r in &records {
        let (_, h, w) = r.t1.extents();
        if (h, w) != (cfg.slice_h, cfg.slice_w) {
            return Err(CliError::Config(format!(
                "case {} has {h}×{w} slices but the model expects {}×{}",
                r.case_id, cfg.slice_h, cfg.slice_w
            )));
        }
    }
    Ok(records)
}

/// The log lives beside the checkpoint: `model.gvck` → `model.trainlog.jsonl`.
pub fn trainlog_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("trainlog.jsonl")
}

pub fn train(mut ctx: Context, args: &TrainArgs) -> Result<(), CliError> {
    apply_data_args(&mut ctx, &args.data);
    let cfg = ctx.run.model_config();
    cfg.validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let tcfg = ctx.run.train_config();
    tcfg.validate()?;
    ctx.log(format!("seed: {}", tcfg.seed));
    let records = load_cases(&ctx, &cfg)?;
    let labels: Vec<usize> = records.iter().map(|r| r.label).collect();
    let (t, v) = stratified_holdout(&labels, tcfg.inner_val_fraction, tcfg.seed)?;
    let train: Vec<ScanRecord> = t.iter().map(|&i| records[i].clone()).collect();
    let val: Vec<ScanRecord> = v.iter().map(|&i| records[i].clone()).collect();
    ctx.log(format!(
        "{} training cases, {} inner-validation cases, input {}, {} parameters",
        train.len(),
        val.len(),
        cfg.fusion.label(),
        cfg.param_count()
    ));
    let quiet = ctx.quiet;
    let outcome = fit_with_progress(&train, &val, &cfg, &tcfg, None, &mut |r| {
        if !quiet {
            let val = r
                .val_accuracy
                .map_or("-".to_string(), |a| format!("{a:.3}"));
            eprintln!(
                "epoch {:>4}  loss {:.5}  val acc {val}  {:.2}s",
                r.epoch, r.mean_loss, r.wall_seconds
            );
        }
    })?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    save_checkpoint(&outcome.params, &cfg, &args.out).map_err(checkpoint_error)?;
    let log_path = trainlog_path(&args.out);
    write(&log_path, outcome.log.to_jsonl())?;
    report_training(&outcome.log, &outcome.params, &cfg, &val)?;
    println!("checkpoint: {}", args.out.display());
    println!("training log: {}", log_path.display());
    Ok(())
}

fn report_training(
    log: &TrainLog,
    params: &gridvit::model::ModelParams<f32>,
    cfg: &ModelConfig,
    val: &[ScanRecord],
) -> Result<(), CliError> {
    println!("selected epoch: {}", log.best_epoch);
    if val.is_empty() {
        println!("no inner-validation cases; kept the last epoch");
        return Ok(());
    }
    let ev = evaluate(params, cfg, val).map_err(|e| CliError::Eval(e.to_string()))?;
    match ev.metrics {
        Some(m) => println!(
            "inner validation: accuracy {:.4}, precision {:.4}, recall {:.4} ({} cases)",
            m.accuracy,
            m.precision,
            m.recall,
            m.total()
        ),
        None => println!("inner validation: no case could be scored"),
    }
    Ok(())
}

pub fn eval(mut ctx: Context, args: &EvalArgs) -> Result<(), CliError> {
    apply_data_args(&mut ctx, &args.data);
    if let Some(f) = args.folds {
        ctx.run.folds = f;
    }
    if let Some(o) = &args.out {
        ctx.run.output_dir = o.clone();
    }
    match &args.checkpoint {
        Some(ck) => eval_checkpoint(&ctx, ck),
        None => eval_cv(&ctx, args.ablation),
    }
}

fn eval_checkpoint(ctx: &Context, checkpoint: &Path) -> Result<(), CliError> {
    let (params, cfg) = load_checkpoint(checkpoint).map_err(checkpoint_error)?;
    if ctx.run.model.is_some() {
        let want = ctx.run.model_config();
        for ((name, found), (_, expected)) in
            expected_shapes(&cfg).iter().zip(expected_shapes(&want))
        {
            if *found != expected {
                return Err(CliError::Eval(format!(
                    "checkpoint tensor `{name}` has shape {found:?} but the config implies {expected:?}"
                )));
            }
        }
        if expected_shapes(&cfg).len() != expected_shapes(&want).len() {
            return Err(CliError::Eval(format!(
                "checkpoint has {} tensors but the config implies {}",
                expected_shapes(&cfg).len(),
                expected_shapes(&want).len()
            )));
        }
    }
    let records = load_cases(ctx, &cfg)?;
    let ev = evaluate(&params, &cfg, &records).map_err(|e| CliError::Eval(e.to_string()))?;
    for f in &ev.failures {
        ctx.log(format!("warning: case {} excluded: {}", f.case_id, f.error));
    }
    let Some(m) = ev.metrics.clone() else {
        return Err(CliError::Eval("no case could be scored".into()));
    };
    let summary = summarize(cfg.fusion.label(), std::slice::from_ref(&m))?;
    let table = render_table(&[(cfg.fusion.label(), &summary)]);
    print!("{table}");
    let dir = &ctx.run.output_dir;
    write(&dir.join("eval_table.txt"), &table)?;
    write(&dir.join("eval_report.json"), to_json(&ev))?;
    ctx.log(format!(
        "{} cases scored, {} excluded; report in {}",
        ev.predictions.len(),
        ev.failures.len(),
        dir.display()
    ));
    Ok(())
}

fn eval_cv(ctx: &Context, ablation: bool) -> Result<(), CliError> {
    let modes: Vec<FusionMode> = if ablation {
        FusionMode::ALL.to_vec()
    } else {
        vec![ctx.run.fusion]
    };
    let tcfg = ctx.run.train_config();
    tcfg.validate()?;
    ctx.log(format!("seed: {}", tcfg.seed));
    let base = ctx.run.model_config();
    base.validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let records = load_cases(ctx, &base)?;
    let mut reports: Vec<CVReport> = Vec::new();
    for mode in modes {
        let cfg = base.clone().with_fusion(mode);
        ctx.log(format!(
            "{}: {}-fold nested cross-validation, {} input channels, readout length {}",
            mode.label(),
            ctx.run.folds,
            cfg.fusion.input_channels(),
            cfg.readout_dim()
        ));
        let report = nested_cv(&records, ctx.run.folds, &cfg, &tcfg)?;
        for w in &report.warnings {
            ctx.log(format!("warning: {w}"));
        }
        for o in report.outcomes.iter().filter(|o| o.error.is_some()) {
            ctx.log(format!(
                "warning: fold {} failed: {}",
                o.fold,
                o.error.as_deref().unwrap_or("")
            ));
        }
        reports.push(report);
    }
    let dir = &ctx.run.output_dir;
    write(&dir.join("cv_report.json"), to_json(&reports))?;
    let rows: Vec<(&str, &gridvit::evaluation::MetricSummary)> = reports
        .iter()
        .filter_map(|r| r.summary.as_ref().map(|s| (r.name.as_str(), s)))
        .collect();
    if !rows.is_empty() {
        let table = render_table(&rows);
        print!("{table}");
        write(&dir.join("cv_table.txt"), &table)?;
    }
    if let Some(r) = reports.iter().find(|r| r.summary.is_none()) {
        return Err(CliError::Eval(format!(
            "{}: all {} folds failed",
            r.name, r.folds
        )));
    }
    for r in reports.iter().filter(|r| r.failed_folds > 0) {
        println!(
            "{}: {} of {} folds failed and are excluded",
            r.name, r.failed_folds, r.folds
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct Prediction<'a> {
    case_id: &'a str,
    label: usize,
    predicted: usize,
    scores: &'a [f64],
    window_start: usize,
    patches: usize,
    heatmaps: Vec<String>,
}

pub fn explain(mut ctx: Context, args: &ExplainArgs) -> Result<(), CliError> {
    if let Some(m) = &args.manifest {
        ctx.run.manifest = Some(m.clone());
    }
    let (params, cfg) = load_checkpoint(&args.checkpoint).map_err(checkpoint_error)?;
    let entries = parse_manifest(ctx.run.manifest()?)?;
    let Some(entry) = entries.iter().find(|e| e.id == args.case_id) else {
        let ids: Vec<&str> = entries.iter().map(|e| e.id.as_str()).collect();
        let shown = ids.iter().take(10).copied().collect::<Vec<_>>().join(", ");
        let more = if ids.len() > 10 {
            format!(" … and {} more", ids.len() - 10)
        } else {
            String::new()
        };
        return Err(CliError::Config(format!(
            "unknown case `{}`; available: {shown}{more}",
            args.case_id
        )));
    };
    let record = ScanRecord::load(entry)?.normalized();
    let start = central_window(record.depth(), cfg.k)?;
    let sample = build_sample(&record, start, cfg.k, cfg.fusion)?;
    let out = forward_classify(&sample.image, &params, &cfg, true)
        .map_err(|e| CliError::Eval(e.to_string()))?;
    let grid = PatchGrid::from_config(&cfg);
    let mut heatmaps = Vec::new();
    for (t, stack) in out.attention.iter().enumerate() {
        let prefix = if out.attention.len() == 1 {
            args.out.clone()
        } else {
            let tag = ["t1", "t2"][t];
            PathBuf::from(format!("{}.{tag}", args.out.display()))
        };
        if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
        }
        let map = class_attention_map(&rollout(&average_heads(stack))?, grid)?;
        let (pgm, csv) = export_heatmap(&map, &prefix)?;
        heatmaps.push(pgm.display().to_string());
        heatmaps.push(csv.display().to_string());
    }
    let predicted = out.logits.argmax();
    let pred = Prediction {
        case_id: &record.case_id,
        label: record.label,
        predicted,
        scores: &out.logits.scores,
        window_start: start,
        patches: cfg.num_patches(),
        heatmaps,
    };
    let json_path = PathBuf::from(format!("{}.prediction.json", args.out.display()));
    write(&json_path, to_json(&pred))?;
    println!(
        "case {}: predicted class {predicted} (label {})",
        record.case_id, record.label
    );
    for h in &pred.heatmaps {
        println!("wrote {h}");
    }
    println!("wrote {}", json_path.display());
    Ok(())
}
