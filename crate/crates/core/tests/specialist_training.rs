use specialist_ensemble::bands::BandSpec;
use specialist_ensemble::synthetic::{make_dataset, DatasetConfig, Modality, TaskSpec};
use specialist_ensemble::training::{evaluate_specialist, train_specialist, TrainConfig};
use specialist_ensemble::zoo::{build_encoder, EncoderConfig, SpecialistRegistry};
use specialist_ensemble::Error;

#[test]
fn rgb_classification_reaches_high_accuracy() {
    let task = TaskSpec::classification(10);
    let ds = make_dataset(&DatasetConfig::new(task.clone(), Modality::Rgb, 2000, 3, [0.8, 0.1, 0.1])).unwrap();
    let enc = build_encoder("rgb", &EncoderConfig::default(), BandSpec::rgb(), 0).unwrap();
    let t = std::time::Instant::now();
    let out = train_specialist(&enc, &ds, &task, &TrainConfig::default()).unwrap();
    eprintln!("{:?} {}", t.elapsed(), out.history.to_csv());
    assert!(out.history.best_val >= 0.90, "best_val {}", out.history.best_val);
    let again = evaluate_specialist(&out.encoder, &out.head, &ds.val, &task, 7).unwrap();
    assert_eq!(again, out.history.best_val);
}

fn small(task: &TaskSpec, modality: Modality, n: usize, seed: u64) -> specialist_ensemble::synthetic::Dataset {
    make_dataset(&DatasetConfig::new(task.clone(), modality, n, seed, [0.6, 0.2, 0.2])).unwrap()
}

fn quick(seed: u64) -> TrainConfig {
    TrainConfig {
        max_epochs: 2,
        batch_size: 8,
        patience: 1,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn constant_labels_stop_after_one_stale_epoch() {
    let task = TaskSpec::classification(3);
    let mut ds = small(&task, Modality::Rgb, 60, 1);
    for s in ds.train.iter_mut().chain(ds.val.iter_mut()) {
        s.scene_class = 0;
    }
    let enc = build_encoder("rgb", &EncoderConfig::default(), BandSpec::rgb(), 0).unwrap();
    let cfg = TrainConfig {
        max_epochs: 20,
        batch_size: 8,
        patience: 1,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let h = train_specialist(&enc, &ds, &task, &cfg).unwrap().history;
    assert_eq!(h.best_val, 1.0);
    assert_eq!(h.epochs.len(), h.best_epoch + 1, "{}", h.to_csv());
    assert!(h.epochs.len() <= 3, "{}", h.to_csv());
}

#[test]
fn training_is_deterministic_and_leaves_inputs_alone() {
    let task = TaskSpec::segmentation(4);
    let ds = small(&task, Modality::Sar, 30, 2);
    let mut reg = SpecialistRegistry::new();
    for (i, spec) in [BandSpec::rgb(), BandSpec::sentinel1()].into_iter().enumerate() {
        reg.register(build_encoder(&format!("e{i}"), &EncoderConfig::default(), spec, i as u64).unwrap()).unwrap();
    }
    let digests: Vec<String> = reg.encoders().iter().map(|e| e.weights_digest()).collect();
    let a = train_specialist(reg.get("e1").unwrap(), &ds, &task, &quick(5)).unwrap();
    let b = train_specialist(reg.get("e1").unwrap(), &ds, &task, &quick(5)).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.encoder, b.encoder);
    assert_ne!(a.encoder.weights_digest(), digests[1]);
    assert_eq!(a.encoder.provenance.final_val_metric, Some(a.history.best_val));
    assert_eq!(a.encoder.provenance.n_train_samples, ds.train.len());
    let after: Vec<String> = reg.encoders().iter().map(|e| e.weights_digest()).collect();
    assert_eq!(after, digests);
    let csv = a.history.to_csv();
    assert!(csv.starts_with("epoch,train_loss,val_metric\n1,"));
    assert_eq!(csv.lines().count(), a.history.epochs.len() + 1);
}

#[test]
fn first_epoch_lowers_the_loss() {
    let task = TaskSpec::segmentation(4);
    let ds = small(&task, Modality::Ms, 100, 3);
    let mut drops: Vec<f64> = (0..3)
        .map(|seed| {
            let enc = build_encoder("ms", &EncoderConfig::default(), BandSpec::sentinel2(), seed).unwrap();
            let h = train_specialist(&enc, &ds, &task, &quick(seed)).unwrap().history;
            h.initial_loss - h.epochs[0].train_loss
        })
        .collect();
    drops.sort_by(f64::total_cmp);
    assert!(drops[1] > 0.0, "{drops:?}");
}

#[test]
fn tiled_training_and_rejections() {
    let task = TaskSpec::segmentation(3);
    let ds = make_dataset(&DatasetConfig::new(task.clone(), Modality::Irrg, 20, 4, [0.6, 0.2, 0.2]).with_size(64)).unwrap();
    let enc = build_encoder("irrg", &EncoderConfig::default(), BandSpec::irrg(), 0).unwrap();
    let cfg = TrainConfig {
        tile_size: Some(32),
        max_epochs: 1,
        ..quick(0)
    };
    let out = train_specialist(&enc, &ds, &task, &cfg).unwrap();
    assert_eq!(out.history.epochs.len(), 1);
    assert!(out.history.best_val.is_finite());

    let mut frozen = enc.clone();
    frozen.frozen = true;
    assert!(matches!(train_specialist(&frozen, &ds, &task, &cfg), Err(Error::Config(_))));
    let rgb = build_encoder("rgb", &EncoderConfig::default(), BandSpec::rgb(), 0).unwrap();
    assert!(matches!(train_specialist(&rgb, &ds, &task, &cfg), Err(Error::Dataset(_))));
    assert!(matches!(
        train_specialist(&enc, &ds, &TaskSpec::segmentation(5), &cfg),
        Err(Error::Task(_))
    ));
    let bad = TrainConfig { patience: 3, ..cfg };
    assert!(train_specialist(&enc, &ds, &task, &bad).is_err());
}
