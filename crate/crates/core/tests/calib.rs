//! Scratch calibration for the desk-scale acceptance fixture. Not committed.

use std::time::Instant;

use xfdd_core::datagen::{generate_dataset, DatagenConfig, Task};
use xfdd_core::layers::RecurrentKind;
use xfdd_core::model::{Model, ModelSpec};
use xfdd_core::preprocess::{build_dataset, split, standardize_fit_apply};
use xfdd_core::train::{evaluate, train, Sampling, TrainConfig};

#[test]
#[ignore]
fn calibrate_desk_run() {
    let t0 = Instant::now();
    let dg = DatagenConfig {
        task: Task::FaultType,
        per_class_windows: 1000,
        duration: 20.0,
        rate: 50.0,
        window: 50,
        step: 50,
        seed: 11,
        ..DatagenConfig::default()
    };
    let recs = generate_dataset(&dg).unwrap();
    println!("datagen: {} recordings in {:.1}s", recs.len(), t0.elapsed().as_secs_f64());

    let t1 = Instant::now();
    let ds = build_dataset::<f32>(&recs, Task::FaultType, 50, 50).unwrap();
    let (mut tr, mut va, mut te) = split(&ds, [0.7, 0.15, 0.15], 11).unwrap();
    standardize_fit_apply(&mut tr, &mut [&mut va, &mut te]).unwrap();
    println!(
        "dataset: {} windows ({}/{}/{}) in {:.1}s",
        ds.len(),
        tr.len(),
        va.len(),
        te.len(),
        t1.elapsed().as_secs_f64()
    );

    let tc = TrainConfig {
        lr: 0.005,
        batch_size: 64,
        max_epochs: 6,
        dropout: 0.3,
        lambda1: 0.0,
        lambda2: 0.0,
        patience: 6,
        eta_min: 0.0,
        sampling: Sampling::None,
        smote_k: 5,
        seed: 11,
    };

    for spec in [
        ModelSpec::desk(24, 50, 7),
        ModelSpec::baseline(RecurrentKind::Gru, 24, 50, 64, 2, 7),
        ModelSpec::baseline(RecurrentKind::Rnn, 24, 50, 64, 2, 7),
    ] {
        let name = spec.name.clone();
        let mut model = Model::<f32>::build(spec, 11).unwrap();
        let out = train(&mut model, &tr, &va, &tc).unwrap();
        let rep = evaluate(&model, &te).unwrap();
        println!(
            "{name}: {:.1}s train, test acc {:.4}, epochs {}",
            out.train_time_s,
            rep.accuracy,
            out.history.len()
        );
        for e in &out.history {
            println!(
                "  epoch {} lr {:.5} train {:.4}/{:.4} val {:.4}/{:.4}",
                e.epoch, e.lr, e.train_loss, e.train_acc, e.val_loss, e.val_acc
            );
        }
    }
}
