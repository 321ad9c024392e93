// End-to-end journey over the public API: synthesize recordings, window,
// split, standardize, train a small hybrid, evaluate, attribute, rank
// channels, and reduce to a top-k view. Sizes are kept small so the whole
// file runs in seconds.

use xfdd_core::datagen::{generate_dataset, DatagenConfig, Task};
use xfdd_core::gridsearch::{grid_search, SearchSpace, TrialSettings};
use xfdd_core::model::{count_params, Model, ModelSpec};
use xfdd_core::preprocess::{build_dataset, split, standardize_fit_apply};
use xfdd_core::train::{evaluate, train, Sampling, TrainConfig};
use xfdd_core::xai::{
    attribute_dataset, gfi, make_baseline, select_top_k, AttrConfig, BaselineKind, BaselineSpec,
    Method,
};

fn small_recordings(seed: u64) -> Vec<xfdd_core::datagen::LabeledRecording> {
    let cfg = DatagenConfig {
        per_class_windows: 12,
        duration: 2.0,
        rate: 25.0,
        window: 10,
        step: 10,
        seed,
        ..DatagenConfig::default()
    };
    generate_dataset(&cfg).unwrap()
}

fn small_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 0.01,
        batch_size: 16,
        max_epochs: 2,
        dropout: 0.0,
        patience: 2,
        sampling: Sampling::None,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn end_to_end_fault_type_journey() {
    let recs = small_recordings(5);
    let ds = build_dataset::<f64>(&recs, Task::FaultType, 10, 10).unwrap();
    assert_eq!(ds.channels, 24);
    assert_eq!(ds.num_classes, 7);

    let (mut tr, mut va, mut te) = split(&ds, [0.7, 0.15, 0.15], 5).unwrap();
    let stats = standardize_fit_apply(&mut tr, &mut [&mut va, &mut te]).unwrap();
    assert_eq!(stats.mean.len(), 24);

    let spec = ModelSpec::hybrid(24, 10, 7, 1, 1, 16, 1);
    let mut model = Model::<f64>::build(spec.clone(), 5).unwrap();
    let outcome = train(&mut model, &tr, &va, &small_train_config(5)).unwrap();
    assert_eq!(outcome.history.len(), 2);
    assert!(outcome.history.iter().all(|e| e.train_loss.is_finite()));

    let report = evaluate(&model, &te).unwrap();
    assert_eq!(report.confusion.total(), te.len());
    assert!(report.accuracy >= 0.0 && report.accuracy <= 1.0);

    // Reports must survive serialization unchanged.
    let json = serde_json::to_string(&report).unwrap();
    let back: xfdd_core::train::MetricsReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back.confusion.total(), report.confusion.total());
    assert_eq!(back.accuracy, report.accuracy);

    // Attribute the test windows, rank channels, reduce to a top-5 view.
    let baselines = make_baseline(&BaselineSpec::new(BaselineKind::Mean), &tr, 5).unwrap();
    let cfg = AttrConfig { ig_steps: 4, ..AttrConfig::default() };
    let attrs = attribute_dataset(&model, &te, &baselines, Method::Ig, &cfg).unwrap();
    assert_eq!(attrs.len(), te.len());
    let importance = gfi(&attrs, &te.channel_names).unwrap();
    assert_eq!(importance.ranking.len(), 24);

    let sel = select_top_k(&importance, &te, &spec, 5).unwrap();
    assert_eq!(sel.dataset.channels, 5);
    assert_eq!(sel.spec.input_channels, 5);
    let reduced = Model::<f64>::build(sel.spec.clone(), 5).unwrap();
    let reduced_report = evaluate(&reduced, &sel.dataset).unwrap();
    assert_eq!(reduced_report.confusion.total(), te.len());
    assert!(
        count_params(&sel.spec).unwrap().grand_total
            < count_params(&spec).unwrap().grand_total
    );
}

#[test]
fn checkpoint_roundtrip_preserves_predictions() {
    let recs = small_recordings(9);
    let ds = build_dataset::<f32>(&recs, Task::FaultType, 10, 10).unwrap();
    let (mut tr, mut va, _) = split(&ds, [0.7, 0.15, 0.15], 9).unwrap();
    let mut te_stub = va.subset(&[0]);
    standardize_fit_apply(&mut tr, &mut [&mut va, &mut te_stub]).unwrap();

    let spec = ModelSpec::hybrid(24, 10, 7, 1, 1, 8, 1);
    let mut model = Model::<f32>::build(spec, 9).unwrap();
    train(&mut model, &tr, &va, &small_train_config(9)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    model.save(&path).unwrap();
    let restored = Model::<f32>::load(&path).unwrap();

    let x = va.batch(&(0..va.len()).collect::<Vec<_>>());
    assert_eq!(model.predict(&x).unwrap(), restored.predict(&x).unwrap());
    let a = model.logits(&x).unwrap();
    let b = restored.logits(&x).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn equal_seeds_reproduce_training_bit_for_bit() {
    let run = || {
        let recs = small_recordings(3);
        let ds = build_dataset::<f64>(&recs, Task::FaultType, 10, 10).unwrap();
        let (mut tr, mut va, mut te) = split(&ds, [0.7, 0.15, 0.15], 3).unwrap();
        standardize_fit_apply(&mut tr, &mut [&mut va, &mut te]).unwrap();
        let spec = ModelSpec::hybrid(24, 10, 7, 1, 1, 8, 1);
        let mut model = Model::<f64>::build(spec, 3).unwrap();
        let outcome = train(&mut model, &tr, &va, &small_train_config(3)).unwrap();
        let report = evaluate(&model, &te).unwrap();
        (
            outcome.history.iter().map(|e| e.train_loss).collect::<Vec<_>>(),
            outcome.history.iter().map(|e| e.val_loss).collect::<Vec<_>>(),
            report.confusion.clone(),
        )
    };
    let (l1, v1, c1) = run();
    let (l2, v2, c2) = run();
    assert_eq!(l1, l2);
    assert_eq!(v1, v2);
    assert_eq!(
        serde_json::to_string(&c1).unwrap(),
        serde_json::to_string(&c2).unwrap()
    );
}

#[test]
fn tiny_grid_search_reports_a_feasible_best() {
    let recs = small_recordings(7);
    let space = SearchSpace {
        conv_layers: vec![1],
        gru_layers: vec![1],
        hidden: vec![8],
        fc_layers: vec![1, 2],
        resampling: vec![Sampling::None],
        window: vec![10],
        step: vec![10],
    };
    let settings = TrialSettings { epochs: 1, batch_size: 16, seed: 7, ..TrialSettings::default() };
    let report = grid_search::<f64>(&recs, Task::FaultType, &space, 10, &settings).unwrap();
    assert!(report.exhaustive);
    assert_eq!(report.trials.len(), 2);
    let best = report.best().unwrap();
    assert!(best.feasible);
    assert!(best.val_accuracy.is_finite());
}
