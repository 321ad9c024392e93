//! Subcommand bodies. Each command resolves its parameters (flag > config >
//! default), runs the corresponding core pipeline stage, and writes its
//! outputs plus a provenance manifest hashing the exact resolved config.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use xfdd_core::datagen::{
    generate_dataset, load_csv, save_csv, DatagenConfig, FaultSpec, LabeledRecording, Scenario,
    Task,
};
use xfdd_core::gridsearch::{grid_search, SearchSpace, TrialSettings};
use xfdd_core::model::{count_params, Model, ModelSpec};
use xfdd_core::layers::RecurrentKind;
use xfdd_core::preprocess::{
    build_dataset, load_dataset, save_dataset, split, standardize_fit_apply, LabeledWindowDataset,
};
use xfdd_core::report::{
    csv_from_rows, history_csv, importance_csv, interaction_csv, metrics_table,
    per_class_importance_csv, svg_curves, svg_heatmap, timing_csv, Manifest,
};
use xfdd_core::train::{evaluate as evaluate_model, train as train_model, Sampling, TrainConfig};
use xfdd_core::xai::{
    attribute_dataset, attribution_timing, feature_interactions, make_baseline, pcfi,
    select_top_k, AttrConfig, BaselineKind, BaselineSpec, Method, ALL_METHODS,
};
use xfdd_core::{Result, XfddError};

use crate::config::PipelineConfig;
use crate::{DatagenArgs, EvaluateArgs, ExplainArgs, GridArgs, PreprocessArgs, TrainArgs};

const MANIFEST_SCHEMA_VERSION: u32 = 1;

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(XfddError::InvalidArgument(msg.into()))
}

fn missing<T>(msg: impl Into<String>) -> Result<T> {
    Err(XfddError::MissingPrerequisite(msg.into()))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s =
        serde_json::to_string_pretty(value).map_err(|e| XfddError::Format(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn require_out(out: Option<PathBuf>, fallback: Option<PathBuf>) -> Result<PathBuf> {
    match out.or(fallback) {
        Some(p) => Ok(p),
        None => usage("--out is required"),
    }
}

// ---- datagen ----

#[derive(Serialize, Deserialize)]
struct RecordingEntry {
    file: String,
    label: String,
    scenario: Scenario,
    faults: Vec<FaultSpec>,
    samples: usize,
}

/// Index of a generated dataset: the exact generator config, per-class
/// recording counts, and one entry per CSV file. Downstream commands reload
/// recordings through this file.
#[derive(Serialize, Deserialize)]
struct DatagenManifest {
    schema_version: u32,
    config: DatagenConfig,
    class_counts: BTreeMap<String, usize>,
    recordings: Vec<RecordingEntry>,
}

pub fn datagen(args: DatagenArgs) -> Result<()> {
    let cfg = PipelineConfig::load(args.config.as_deref())?;
    let task: Task =
        args.task.or(cfg.task).unwrap_or_else(|| "fault_type".to_string()).parse()?;
    let seed = args.seed.or(cfg.seed).unwrap_or(7);
    let out = require_out(args.out, cfg.out)?;
    let d = DatagenConfig::default();
    let dg = DatagenConfig {
        task,
        per_class_windows: args
            .per_class_windows
            .or(cfg.datagen.per_class_windows)
            .unwrap_or(d.per_class_windows),
        imbalance_ratio: args
            .imbalance_ratio
            .or(cfg.datagen.imbalance_ratio)
            .unwrap_or(d.imbalance_ratio),
        duration: args.duration.or(cfg.datagen.duration).unwrap_or(d.duration),
        rate: args.rate.or(cfg.datagen.rate).unwrap_or(d.rate),
        window: args.window.or(cfg.datagen.window).unwrap_or(d.window),
        step: args.step.or(cfg.datagen.step).unwrap_or(d.step),
        snr_db: args.snr_db.or(cfg.datagen.snr_db).unwrap_or(d.snr_db),
        gain: args.gain.or(cfg.datagen.gain).unwrap_or(d.gain),
        offset_sigmas: args
            .offset_sigmas
            .or(cfg.datagen.offset_sigmas)
            .unwrap_or(d.offset_sigmas),
        seed,
    };
    let recs = generate_dataset(&dg)?;
    fs::create_dir_all(&out)?;

    let resolved = to_json(&dg)?;
    let mut manifest = Manifest::new(&resolved, seed);
    manifest.seed("datagen", seed);
    manifest.write_file(&out, "config.json", resolved.as_bytes())?;

    let mut entries = Vec::with_capacity(recs.len());
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for (i, lr) in recs.iter().enumerate() {
        let file = format!("recording-{i:04}-{}.csv", lr.label);
        save_csv(&out.join(&file), &lr.recording, &lr.label)?;
        manifest.record_existing(&out, &file)?;
        *counts.entry(lr.label.clone()).or_insert(0) += 1;
        entries.push(RecordingEntry {
            file,
            label: lr.label.clone(),
            scenario: lr.scenario,
            faults: lr.faults.clone(),
            samples: lr.recording.len(),
        });
    }
    let dm = DatagenManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        config: dg,
        class_counts: counts.clone(),
        recordings: entries,
    };
    manifest.write_file(&out, "datagen.json", to_json(&dm)?.as_bytes())?;
    manifest.save(&out.join("manifest.json"))?;

    let summary: Vec<String> = counts.iter().map(|(l, n)| format!("{l}:{n}")).collect();
    println!("wrote {} recordings to {} ({})", recs.len(), out.display(), summary.join(" "));
    Ok(())
}

fn load_recordings(dir: &Path) -> Result<(DatagenManifest, Vec<LabeledRecording>)> {
    let index = dir.join("datagen.json");
    if !index.exists() {
        return missing(format!("{} (run `xfdd datagen` first)", index.display()));
    }
    let text = fs::read_to_string(&index)?;
    let dm: DatagenManifest =
        serde_json::from_str(&text).map_err(|e| XfddError::Format(format!("{}: {e}", index.display())))?;
    if dm.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(XfddError::Format(format!(
            "{}: unsupported schema version {}",
            index.display(),
            dm.schema_version
        )));
    }
    let mut recs = Vec::with_capacity(dm.recordings.len());
    for e in &dm.recordings {
        let (recording, label) = load_csv(&dir.join(&e.file), dm.config.rate)?;
        if label != e.label {
            return Err(XfddError::Format(format!(
                "{}: label '{label}' does not match index entry '{}'",
                e.file, e.label
            )));
        }
        recs.push(LabeledRecording {
            recording,
            label,
            scenario: e.scenario,
            faults: e.faults.clone(),
        });
    }
    Ok((dm, recs))
}

// ---- preprocess ----

#[derive(Serialize)]
struct PreprocessResolved {
    task: Task,
    window: usize,
    step: usize,
    split: [f64; 3],
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct PreprocessManifest {
    schema_version: u32,
    task: Task,
    window: usize,
    step: usize,
    split: [f64; 3],
    seed: u64,
    channels: usize,
    counts: [usize; 3],
}

pub fn preprocess(args: PreprocessArgs) -> Result<()> {
    let cfg = PipelineConfig::load(args.config.as_deref())?;
    let Some(data) = args.data else { return usage("--data is required (datagen output)") };
    let out = require_out(args.out, cfg.out)?;
    let (dm, recs) = load_recordings(&data)?;
    let window = args.window.or(cfg.preprocess.window).unwrap_or(dm.config.window);
    let step = args.step.or(cfg.preprocess.step).unwrap_or(dm.config.step);
    let fractions = match args.split.or(cfg.preprocess.split) {
        None => [0.7, 0.15, 0.15],
        Some(v) if v.len() == 3 => [v[0], v[1], v[2]],
        Some(v) => {
            return usage(format!("--split needs exactly 3 fractions, got {}", v.len()))
        }
    };
    let seed = args.seed.or(cfg.seed).unwrap_or(dm.config.seed);

    let ds = build_dataset::<f32>(&recs, dm.config.task, window, step)?;
    let (mut tr, mut va, mut te) = split(&ds, fractions, seed)?;
    standardize_fit_apply(&mut tr, &mut [&mut va, &mut te])?;

    fs::create_dir_all(&out)?;
    let resolved = to_json(&PreprocessResolved {
        task: dm.config.task,
        window,
        step,
        split: fractions,
        seed,
    })?;
    let mut manifest = Manifest::new(&resolved, seed);
    manifest.seed("split", seed);
    manifest.write_file(&out, "config.json", resolved.as_bytes())?;
    for (stem, part) in [("train", &tr), ("val", &va), ("test", &te)] {
        save_dataset(&out.join(stem), part, seed)?;
        for ext in ["json", "f32", "labels"] {
            manifest.record_existing(&out, &format!("{stem}.{ext}"))?;
        }
    }
    let pm = PreprocessManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        task: dm.config.task,
        window,
        step,
        split: fractions,
        seed,
        channels: ds.channels,
        counts: [tr.len(), va.len(), te.len()],
    };
    manifest.write_file(&out, "preprocess.json", to_json(&pm)?.as_bytes())?;
    manifest.save(&out.join("manifest.json"))?;
    println!(
        "windowed {} recordings into {}/{}/{} train/val/test windows of {}x{}",
        recs.len(),
        tr.len(),
        va.len(),
        te.len(),
        ds.channels,
        window
    );
    Ok(())
}

// ---- train ----

/// Channel subset produced by `xfdd explain --select-top`, consumed by
/// `xfdd train --features`.
#[derive(Serialize, Deserialize)]
struct FeatureList {
    schema_version: u32,
    channels: Vec<usize>,
    names: Vec<String>,
    boundary_tie: bool,
    method: String,
    baseline: String,
}

#[derive(Serialize)]
struct TrainResolved {
    model: String,
    features: Option<Vec<usize>>,
    train: TrainConfig,
}

#[derive(Serialize)]
struct TrainSummary {
    schema_version: u32,
    model: String,
    parameters: usize,
    best_epoch: usize,
    best_val_loss: f64,
    stopped_early: bool,
    epochs_run: usize,
    train_time_s: f64,
    test_accuracy: f64,
}

fn load_split(dir: &Path, stem: &str) -> Result<LabeledWindowDataset<f32>> {
    load_dataset::<f32>(&dir.join(stem))
}

fn build_spec(
    name: &str,
    channels: usize,
    window: usize,
    classes: usize,
    hidden: usize,
    rec_layers: usize,
    conv: usize,
    fc: usize,
) -> Result<ModelSpec> {
    let spec = match name {
        "ftcm" => ModelSpec::ftcm(),
        "flm" => ModelSpec::flm(),
        "desk" => ModelSpec::desk(channels, window, classes),
        "hybrid" => ModelSpec::hybrid(channels, window, classes, conv, rec_layers, hidden, fc),
        "rnn" => ModelSpec::baseline(RecurrentKind::Rnn, channels, window, hidden, rec_layers, classes),
        "gru" => ModelSpec::baseline(RecurrentKind::Gru, channels, window, hidden, rec_layers, classes),
        "lstm" => ModelSpec::baseline(RecurrentKind::Lstm, channels, window, hidden, rec_layers, classes),
        other => {
            return usage(format!(
                "unknown model '{other}'; valid: ftcm, flm, rnn, lstm, gru, desk, hybrid"
            ))
        }
    };
    if spec.input_channels != channels || spec.window != window {
        return usage(format!(
            "model {} expects {} channels x {} window but the dataset has {} x {}",
            spec.name, spec.input_channels, spec.window, channels, window
        ));
    }
    Ok(spec)
}

fn apply_features(
    path: &Path,
    sets: [&mut LabeledWindowDataset<f32>; 3],
) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path)
        .map_err(|e| XfddError::MissingPrerequisite(format!("{}: {e}", path.display())))?;
    let list: FeatureList = serde_json::from_str(&text)
        .map_err(|e| XfddError::Format(format!("{}: {e}", path.display())))?;
    if list.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(XfddError::Format(format!(
            "{}: unsupported schema version {}",
            path.display(),
            list.schema_version
        )));
    }
    for ds in sets {
        *ds = ds.select_channels(&list.channels)?;
    }
    Ok(list.channels)
}

fn ensure_finite_history(history: &[xfdd_core::train::EpochRecord]) -> Result<()> {
    for e in history {
        if !e.train_loss.is_finite() || !e.val_loss.is_finite() {
            return Err(XfddError::Numeric(format!(
                "non-finite loss at epoch {} (train {}, val {})",
                e.epoch, e.train_loss, e.val_loss
            )));
        }
    }
    Ok(())
}

pub fn train(args: TrainArgs, deterministic: bool) -> Result<()> {
    let cfg = PipelineConfig::load(args.config.as_deref())?;
    let Some(data) = args.data else { return usage("--data is required (preprocess output)") };
    let out = require_out(args.out, cfg.out)?;
    let mut tr = load_split(&data, "train")?;
    let mut va = load_split(&data, "val")?;
    let mut te = load_split(&data, "test")?;

    let selected = match &args.features {
        Some(path) => Some(apply_features(path, [&mut tr, &mut va, &mut te])?),
        None => None,
    };

    let seed = args.seed.or(cfg.seed).unwrap_or(7);
    let t = &cfg.train;
    let d = TrainConfig::default();
    let sampling: Sampling = match args.sampling.or_else(|| t.sampling.clone()) {
        Some(s) => s.parse()?,
        None => d.sampling,
    };
    let max_epochs = args.epochs.or(t.epochs).unwrap_or(30);
    let tc = TrainConfig {
        lr: args.lr.or(t.lr).unwrap_or(d.lr),
        batch_size: args.batch_size.or(t.batch_size).unwrap_or(d.batch_size),
        max_epochs,
        dropout: args.dropout.or(t.dropout).unwrap_or(d.dropout),
        lambda1: args.lambda1.or(t.lambda1).unwrap_or(d.lambda1),
        lambda2: args.lambda2.or(t.lambda2).unwrap_or(d.lambda2),
        // The built-in patience shrinks with a short epoch budget; an
        // explicit flag is validated as given.
        patience: args.patience.or(t.patience).unwrap_or(d.patience.min(max_epochs)),
        eta_min: args.eta_min.or(t.eta_min).unwrap_or(d.eta_min),
        sampling,
        smote_k: args.smote_k.or(t.smote_k).unwrap_or(d.smote_k),
        seed,
    };
    let model_name = args.model.or_else(|| t.model.clone()).unwrap_or_else(|| "desk".into());
    let spec = build_spec(
        &model_name,
        tr.channels,
        tr.window,
        tr.num_classes,
        args.hidden.or(t.hidden).unwrap_or(64),
        args.rec_layers.or(t.rec_layers).unwrap_or(2),
        args.conv.or(t.conv).unwrap_or(4),
        args.fc.or(t.fc).unwrap_or(1),
    )?;
    let parameters = count_params(&spec)?.grand_total;

    let mut model = Model::<f32>::build(spec.clone(), seed)?;
    let outcome = train_model(&mut model, &tr, &va, &tc)?;
    ensure_finite_history(&outcome.history)?;
    let mut report = evaluate_model(&model, &te)?;
    report.train_time_s = outcome.train_time_s;
    if deterministic {
        report.train_time_s = 0.0;
        report.test_time_s = 0.0;
    }

    fs::create_dir_all(&out)?;
    let resolved = to_json(&TrainResolved {
        model: spec.name.clone(),
        features: selected,
        train: tc.clone(),
    })?;
    let mut manifest = Manifest::new(&resolved, seed);
    manifest.seed("model", seed);
    manifest.write_file(&out, "config.json", resolved.as_bytes())?;

    model.save(&out.join("model.ckpt"))?;
    manifest.record_existing(&out, "model.ckpt")?;
    manifest.write_file(&out, "history.csv", history_csv(&outcome.history)?.as_bytes())?;
    manifest.write_file(&out, "curves.svg", svg_curves(&outcome.history)?.as_bytes())?;
    manifest.write_file(
        &out,
        "metrics.csv",
        metrics_table(&[(spec.name.as_str(), &report)])?.as_bytes(),
    )?;
    manifest.write_file(&out, "report.json", to_json(&report)?.as_bytes())?;
    let summary = TrainSummary {
        schema_version: MANIFEST_SCHEMA_VERSION,
        model: spec.name.clone(),
        parameters,
        best_epoch: outcome.best_epoch,
        best_val_loss: outcome.best_val_loss,
        stopped_early: outcome.stopped_early,
        epochs_run: outcome.history.len(),
        train_time_s: report.train_time_s,
        test_accuracy: report.accuracy,
    };
    manifest.write_file(&out, "train.json", to_json(&summary)?.as_bytes())?;
    manifest.save(&out.join("manifest.json"))?;

    println!(
        "{}: {} parameters, {} epochs, best val loss {:.4} at epoch {}, test accuracy {:.2}%",
        spec.name,
        parameters,
        outcome.history.len(),
        outcome.best_val_loss,
        outcome.best_epoch,
        report.accuracy * 100.0
    );
    Ok(())
}

// ---- evaluate ----

fn load_model(run: &Path) -> Result<Model<f32>> {
    let path = run.join("model.ckpt");
    if !path.exists() {
        return missing(format!("{} (run `xfdd train` first)", path.display()));
    }
    Model::<f32>::load(&path)
}

pub fn evaluate(args: EvaluateArgs, deterministic: bool) -> Result<()> {
    let _ = PipelineConfig::load(args.config.as_deref())?;
    let Some(run) = args.run else { return usage("--run is required (train output)") };
    let Some(data) = args.data else { return usage("--data is required (preprocess output)") };
    let model = load_model(&run)?;
    let te = load_split(&data, "test")?;
    let mut report = evaluate_model(&model, &te)?;
    if deterministic {
        report.test_time_s = 0.0;
    }
    let resolved = format!("{{\n  \"model\": \"{}\"\n}}\n", model.spec().name);
    let mut manifest = Manifest::new(&resolved, model.seed());
    manifest.write_file(&run, "eval.json", to_json(&report)?.as_bytes())?;
    manifest.write_file(
        &run,
        "eval.csv",
        metrics_table(&[(model.spec().name.as_str(), &report)])?.as_bytes(),
    )?;
    manifest.save(&run.join("eval-manifest.json"))?;
    println!(
        "{}: test accuracy {:.2}%, macro F1 {:.2}%",
        model.spec().name,
        report.accuracy * 100.0,
        report.macro_f1 * 100.0
    );
    Ok(())
}

// ---- explain ----

fn parse_methods(names: &[String]) -> Result<Vec<Method>> {
    let mut out = Vec::new();
    for n in names {
        if n == "all" {
            out.extend(ALL_METHODS);
        } else {
            out.push(n.parse::<Method>().map_err(|_| {
                XfddError::InvalidArgument(format!(
                    "unknown method '{n}'; valid: ig, deeplift, gradshap, dlshap (or 'all')"
                ))
            })?);
        }
    }
    out.dedup();
    if out.is_empty() {
        return usage("--methods needs at least one method");
    }
    Ok(out)
}

fn parse_baselines(names: &[String]) -> Result<Vec<BaselineKind>> {
    const ALL: [BaselineKind; 4] =
        [BaselineKind::Zero, BaselineKind::Mean, BaselineKind::Median, BaselineKind::Random];
    let mut out = Vec::new();
    for n in names {
        if n == "all" {
            out.extend(ALL);
        } else {
            out.push(n.parse::<BaselineKind>().map_err(|_| {
                XfddError::InvalidArgument(format!(
                    "unknown baseline '{n}'; valid: zero, mean, median, random (or 'all')"
                ))
            })?);
        }
    }
    out.dedup();
    if out.is_empty() {
        return usage("--baselines needs at least one baseline");
    }
    Ok(out)
}

#[derive(Serialize)]
struct ExplainResolved {
    model: String,
    methods: Vec<String>,
    baselines: Vec<String>,
    windows: usize,
    attr: AttrConfig,
    random_k: usize,
    interaction_class: usize,
    interaction_windows: usize,
    select_top: Option<usize>,
}

pub fn explain(args: ExplainArgs, deterministic: bool) -> Result<()> {
    let cfg = PipelineConfig::load(args.config.as_deref())?;
    let Some(run) = args.run else { return usage("--run is required (train output)") };
    let Some(data) = args.data else { return usage("--data is required (preprocess output)") };
    let out = args.out.unwrap_or_else(|| run.join("explain"));
    let x = &cfg.explain;

    let methods = parse_methods(
        &args.methods.or_else(|| x.methods.clone()).unwrap_or_else(|| vec!["ig".into()]),
    )?;
    let baseline_kinds = parse_baselines(
        &args.baselines.or_else(|| x.baselines.clone()).unwrap_or_else(|| vec!["mean".into()]),
    )?;

    let model = load_model(&run)?;
    let tr = load_split(&data, "train")?;
    let te = load_split(&data, "test")?;
    let seed = args.seed.or(cfg.seed).unwrap_or(model.seed());
    let windows = args.windows.or(x.windows).unwrap_or(64).min(te.len()).max(1);
    let view = te.subset(&(0..windows).collect::<Vec<_>>());
    let attr = AttrConfig {
        ig_steps: args.ig_steps.or(x.ig_steps).unwrap_or(50),
        gs_samples: args.gs_samples.or(x.gs_samples).unwrap_or(20),
        gs_sigma: args.gs_sigma.or(x.gs_sigma).unwrap_or(0.0),
        seed,
    };
    let random_k = args.random_k.or(x.random_k).unwrap_or(10).max(1);
    let interaction_class = args.interaction_class.or(x.interaction_class).unwrap_or(0);
    if interaction_class >= te.num_classes {
        return usage(format!(
            "--interaction-class {interaction_class} out of range for {} classes",
            te.num_classes
        ));
    }
    let interaction_windows =
        args.interaction_windows.or(x.interaction_windows).unwrap_or(8).min(view.len()).max(1);
    let select_top = args.select_top.or(x.select_top);

    fs::create_dir_all(&out)?;
    let resolved = to_json(&ExplainResolved {
        model: model.spec().name.clone(),
        methods: methods.iter().map(|m| m.to_string()).collect(),
        baselines: baseline_kinds.iter().map(|b| b.to_string()).collect(),
        windows,
        attr,
        random_k,
        interaction_class,
        interaction_windows,
        select_top,
    })?;
    let mut manifest = Manifest::new(&resolved, seed);
    manifest.seed("attribution", seed);
    manifest.write_file(&out, "config.json", resolved.as_bytes())?;

    let class_names: Vec<String> =
        te.task.classes().iter().map(|s| s.to_string()).collect();
    let mut tensors = Vec::with_capacity(baseline_kinds.len());
    for &kind in &baseline_kinds {
        let mut bspec = BaselineSpec::new(kind);
        bspec.k = random_k;
        tensors.push(make_baseline(&bspec, &tr, seed)?);
    }

    let mut first_report = None;
    for (bi, &bkind) in baseline_kinds.iter().enumerate() {
        for &method in &methods {
            let attrs = attribute_dataset(&model, &view, &tensors[bi], method, &attr)?;
            let mut rep = pcfi(&attrs, &view.labels, view.num_classes, &view.channel_names)?;
            // The attribution layer only sees baseline tensors; the kind
            // name is known here.
            rep.baseline = bkind.to_string();
            manifest.write_file(
                &out,
                &format!("gfi-{method}-{bkind}.csv"),
                importance_csv(&rep)?.as_bytes(),
            )?;
            manifest.write_file(
                &out,
                &format!("pcfi-{method}-{bkind}.csv"),
                per_class_importance_csv(&rep, &class_names)?.as_bytes(),
            )?;
            if first_report.is_none() {
                first_report = Some(rep);
            }
        }
    }
    let first_report = first_report.expect("at least one method x baseline pair");

    if let Some(k) = select_top {
        let sel = select_top_k(&first_report, &te, model.spec(), k)?;
        let list = FeatureList {
            schema_version: MANIFEST_SCHEMA_VERSION,
            channels: sel.channels.clone(),
            names: sel.names.clone(),
            boundary_tie: sel.boundary_tie,
            method: first_report.method.clone(),
            baseline: first_report.baseline.clone(),
        };
        manifest.write_file(&out, &format!("top{k}.json"), to_json(&list)?.as_bytes())?;
    }

    // Interaction screen and timing run against a mean baseline regardless
    // of the requested attribution baselines: a single deterministic tensor.
    let mean_b = make_baseline(&BaselineSpec::new(BaselineKind::Mean), &tr, seed)?;
    let xs: Vec<_> = (0..interaction_windows).map(|i| view.window_tensor(i)).collect();
    let inter =
        feature_interactions(&model, &xs, &mean_b[0], interaction_class, &view.channel_names)?;
    manifest.write_file(&out, "interactions.csv", interaction_csv(&inter)?.as_bytes())?;
    manifest.write_file(&out, "interactions.svg", svg_heatmap(&inter)?.as_bytes())?;

    let mut rspec = BaselineSpec::new(BaselineKind::Random);
    rspec.k = random_k;
    let timing_b = make_baseline(&rspec, &tr, seed)?;
    let txs: Vec<_> = (0..windows.min(5)).map(|i| view.window_tensor(i)).collect();
    let mut table = attribution_timing(&model, &txs, &timing_b, interaction_class, &attr)?;
    if deterministic {
        table.total_s = [0.0; 4];
        table.per_window_s = [0.0; 4];
        table.single_gradient_s = 0.0;
        table.single_deeplift_s = 0.0;
    }
    manifest.write_file(
        &out,
        "timing.csv",
        timing_csv(&[(model.spec().name.as_str(), &table)])?.as_bytes(),
    )?;
    manifest.save(&out.join("manifest.json"))?;

    println!(
        "explained {} windows with {} method x baseline reports in {}",
        windows,
        methods.len() * baseline_kinds.len(),
        out.display()
    );
    Ok(())
}

// ---- gridsearch ----

#[derive(Serialize)]
struct GridResolved {
    space: SearchSpace,
    budget: usize,
    settings: TrialSettings,
}

fn parse_axis_sampling(names: &[String]) -> Result<Vec<Sampling>> {
    names.iter().map(|s| s.parse()).collect()
}

pub fn gridsearch(args: GridArgs, deterministic: bool) -> Result<()> {
    let cfg = PipelineConfig::load(args.config.as_deref())?;
    let Some(data) = args.data else { return usage("--data is required (datagen output)") };
    let out = require_out(args.out, cfg.out)?;
    let (dm, recs) = load_recordings(&data)?;
    let g = &cfg.gridsearch;
    let default_space = SearchSpace::default();
    let space = SearchSpace {
        conv_layers: g.conv_layers.clone().unwrap_or(default_space.conv_layers),
        gru_layers: g.gru_layers.clone().unwrap_or(default_space.gru_layers),
        hidden: g.hidden.clone().unwrap_or(default_space.hidden),
        fc_layers: g.fc_layers.clone().unwrap_or(default_space.fc_layers),
        resampling: match &g.resampling {
            Some(names) => parse_axis_sampling(names)?,
            None => default_space.resampling,
        },
        window: g.window.clone().unwrap_or(default_space.window),
        step: g.step.clone().unwrap_or(default_space.step),
    };
    let budget = args.budget.or(g.budget).unwrap_or(16);
    let ds = TrialSettings::default();
    let settings = TrialSettings {
        epochs: args.epochs.or(g.epochs).unwrap_or(ds.epochs),
        batch_size: args.batch_size.or(g.batch_size).unwrap_or(ds.batch_size),
        lr: args.lr.or(g.lr).unwrap_or(ds.lr),
        patience: args.patience.or(g.patience).unwrap_or(ds.patience),
        seed: args.seed.or(cfg.seed).unwrap_or(ds.seed),
        ..ds
    };

    let mut report = grid_search::<f32>(&recs, dm.config.task, &space, budget, &settings)?;
    if deterministic {
        for t in &mut report.trials {
            t.train_time_s = 0.0;
        }
    }

    fs::create_dir_all(&out)?;
    let resolved = to_json(&GridResolved { space: space.clone(), budget, settings: settings.clone() })?;
    let mut manifest = Manifest::new(&resolved, settings.seed);
    manifest.seed("search", settings.seed);
    manifest.write_file(&out, "config.json", resolved.as_bytes())?;

    let mut rows = vec![vec![
        "index".to_string(),
        "conv_layers".to_string(),
        "gru_layers".to_string(),
        "hidden".to_string(),
        "fc_layers".to_string(),
        "resampling".to_string(),
        "window".to_string(),
        "step".to_string(),
        "feasible".to_string(),
        "val_accuracy".to_string(),
        "param_count".to_string(),
        "train_time_s".to_string(),
        "note".to_string(),
    ]];
    for &ti in &report.ranking {
        let t = &report.trials[ti];
        rows.push(vec![
            t.axes.index.to_string(),
            t.axes.conv_layers.to_string(),
            t.axes.gru_layers.to_string(),
            t.axes.hidden.to_string(),
            t.axes.fc_layers.to_string(),
            t.axes.resampling.to_string(),
            t.axes.window.to_string(),
            t.axes.step.to_string(),
            t.feasible.to_string(),
            format!("{:.6}", t.val_accuracy),
            t.param_count.to_string(),
            format!("{:.3}", t.train_time_s),
            t.note.clone(),
        ]);
    }
    manifest.write_file(&out, "trials.csv", csv_from_rows(&rows)?.as_bytes())?;
    if let Some(best) = report.best() {
        manifest.write_file(&out, "best.json", to_json(best)?.as_bytes())?;
    }
    manifest.write_file(
        &out,
        "search.json",
        to_json(&serde_json::json!({
            "schema_version": MANIFEST_SCHEMA_VERSION,
            "space_size": report.space_size,
            "exhaustive": report.exhaustive,
            "trials_run": report.trials.len(),
        }))?
        .as_bytes(),
    )?;
    manifest.save(&out.join("manifest.json"))?;

    match report.best() {
        Some(best) => println!(
            "ran {} of {} trials; best: index {} (conv {}, gru {}, hidden {}, fc {}, {}, window {}) val accuracy {:.2}%",
            report.trials.len(),
            report.space_size,
            best.axes.index,
            best.axes.conv_layers,
            best.axes.gru_layers,
            best.axes.hidden,
            best.axes.fc_layers,
            best.axes.resampling,
            best.axes.window,
            best.val_accuracy * 100.0
        ),
        None => println!("ran {} trials; none feasible", report.trials.len()),
    }
    Ok(())
}
