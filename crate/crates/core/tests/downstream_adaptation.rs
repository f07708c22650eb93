use specialist_ensemble::bands::{BandSpec, RuleRegistry};
use specialist_ensemble::downstream::{evaluate, finetune, predict, subsample_indices, subsample_stratified, DownstreamConfig};
use specialist_ensemble::ensemble::{build_ensemble, EnsembleModel, EnsembleOptions};
use specialist_ensemble::metrics::{accuracy, miou, rmse};
use specialist_ensemble::synthetic::{make_dataset, Dataset, DatasetConfig, Modality, TaskSpec};
use specialist_ensemble::training::Predictions;
use specialist_ensemble::zoo::{build_encoder, EncoderConfig};
use specialist_ensemble::Error;

fn data(task: &TaskSpec, modality: Modality, n: usize) -> Dataset {
    make_dataset(&DatasetConfig::new(task.clone(), modality, n, 6, [0.6, 0.2, 0.2])).unwrap()
}

fn model(task: &TaskSpec, input: BandSpec) -> EnsembleModel {
    build_ensemble(
        vec![
            build_encoder("rgb", &EncoderConfig::default(), BandSpec::rgb(), 1).unwrap(),
            build_encoder("s2", &EncoderConfig::default(), BandSpec::sentinel2(), 2).unwrap(),
        ],
        RuleRegistry::standard(),
        input,
        task.clone(),
        &EnsembleOptions::default(),
    )
    .unwrap()
}

fn quick(epochs: usize) -> DownstreamConfig {
    DownstreamConfig {
        epochs,
        warmup_epochs: 1,
        ..DownstreamConfig::default()
    }
}

#[test]
fn stratified_subsets() {
    let task = TaskSpec::classification(4);
    let ds = data(&task, Modality::Rgb, 200);
    for fraction in [0.01, 0.1, 0.25, 0.5] {
        let idx = subsample_indices(&ds.train, &task, fraction, 3).unwrap();
        assert!(idx.windows(2).all(|p| p[0] < p[1]));
        for c in 0..4 {
            let size = ds.train.iter().filter(|s| s.scene_class == c).count();
            let want = ((fraction * size as f64).round() as usize).max(1);
            let got = idx.iter().filter(|&&i| ds.train[i].scene_class == c).count();
            assert_eq!(got, want, "fraction {fraction} class {c}");
        }
        assert_eq!(idx, subsample_indices(&ds.train, &task, fraction, 3).unwrap());
    }
    assert_eq!(subsample_indices(&ds.train, &task, 1.0, 9).unwrap(), (0..ds.train.len()).collect::<Vec<_>>());
    assert!(subsample_indices(&ds.train, &task, 0.0, 0).is_err());
    assert!(subsample_indices(&ds.train, &task, 1.5, 0).is_err());
    assert!(subsample_indices(&[], &task, 0.5, 0).is_err());

    let reg = data(&TaskSpec::regression(), Modality::Rgb, 100);
    let sub = subsample_stratified(&reg, 0.5, 1).unwrap();
    // Four quartiles of 15, each rounding 7.5 up.
    assert_eq!(sub.train.len(), 32);
    assert_eq!(sub.val, reg.val);
}

#[test]
fn encoders_stay_frozen_and_best_epoch_is_returned() {
    let task = TaskSpec::segmentation(4);
    let ds = data(&task, Modality::Ms, 40);
    let m = model(&task, BandSpec::sentinel2());
    let digests = m.encoder_digests();
    let mut seen = Vec::new();
    let cfg = DownstreamConfig { k: Some(1), ..quick(4) };
    let (best, history) = finetune(&m, &ds, &cfg, |epoch, current| {
        assert_eq!(current.encoder_digests(), digests, "epoch {epoch}");
        seen.push((epoch, current.trainable_digest()));
    })
    .unwrap();
    assert_eq!(seen.len(), 4);
    assert_ne!(seen[0].1, m.trainable_digest());
    assert_eq!(history.epochs.len(), 4);
    let max = history.epochs.iter().map(|e| e.val_metric).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(history.best_val, max);
    assert_eq!(history.epochs[history.best_epoch - 1].val_metric, max);
    assert_eq!(seen[history.best_epoch - 1].1, best.trainable_digest());
    assert_eq!(best.selection.k, 1);
    assert_eq!(evaluate(&best, &ds.val, &task).unwrap(), history.best_val);

    let again = finetune(&m, &ds, &cfg, |_, _| {}).unwrap();
    assert_eq!(again.1, history);
}

#[test]
fn evaluation_agrees_with_the_metric_kernels() {
    for task in [TaskSpec::classification(3), TaskSpec::segmentation(3), TaskSpec::regression()] {
        let ds = data(&task, Modality::Rgb, 20);
        let (m, _) = finetune(&model(&task, BandSpec::rgb()), &ds, &quick(1), |_, _| {}).unwrap();
        let digest = m.trainable_digest();
        let score = evaluate(&m, &ds.test, &task).unwrap();
        assert_eq!(evaluate(&m, &ds.test, &task).unwrap(), score);
        assert_eq!(m.trainable_digest(), digest);
        let want = match predict(&m, &ds.test, 3).unwrap() {
            Predictions::Labels(p) if task == TaskSpec::classification(3) => {
                accuracy(&p, &ds.test.iter().map(|s| s.scene_class).collect::<Vec<_>>()).unwrap()
            }
            Predictions::Labels(p) => {
                miou(&p, &ds.test.iter().flat_map(|s| s.mask.clone()).collect::<Vec<_>>(), 3).unwrap()
            }
            Predictions::Values(p) => {
                rmse(&p, &ds.test.iter().flat_map(|s| s.height.data().to_vec()).collect::<Vec<_>>()).unwrap()
            }
        };
        assert!((score - want).abs() < 1e-12, "{task}: {score} vs {want}");
    }
}

#[test]
fn mismatched_inputs_are_rejected() {
    let task = TaskSpec::segmentation(3);
    let rgb = model(&task, BandSpec::rgb());
    let sar = data(&task, Modality::Sar, 20);
    match finetune(&rgb, &sar, &quick(1), |_, _| {}) {
        Err(Error::UnsupportedInput(msg)) => assert!(msg.contains("unsupported input spec")),
        other => panic!("{:?}", other.map(|r| r.1)),
    }
    let ds = data(&task, Modality::Rgb, 20);
    assert!(matches!(evaluate(&rgb, &ds.test, &TaskSpec::segmentation(4)), Err(Error::Task(_))));
    assert!(matches!(evaluate(&rgb, &ds.test, &TaskSpec::classification(3)), Err(Error::Task(_))));
    let bad = DownstreamConfig { label_fraction: 0.0, ..quick(1) };
    assert!(matches!(finetune(&rgb, &ds, &bad, |_, _| {}), Err(Error::Config(_))));
    // The S2 encoder cannot see RGB inputs, so only one encoder is left.
    assert_eq!(rgb.len(), 1);
    let too_many = DownstreamConfig { k: Some(2), ..quick(1) };
    assert!(matches!(finetune(&rgb, &ds, &too_many, |_, _| {}), Err(Error::Sparsity { k: 2, n: 1 })));
}
