use specialist_ensemble::autograd::Graph;
use specialist_ensemble::bands::{BandSpec, RuleRegistry};
use specialist_ensemble::ensemble::{build_ensemble, EnsembleOptions};
use specialist_ensemble::nn::Module;
use specialist_ensemble::synthetic::TaskSpec;
use specialist_ensemble::zoo::{
    build_encoder, load_checkpoint, save_checkpoint, EncoderConfig, SpecialistRegistry, MANIFEST_FILE, WEIGHTS_FILE,
};
use specialist_ensemble::{Error, Tensor};

fn probe(c: usize, hw: usize) -> Tensor {
    Tensor::from_fn(&[2, c, hw, hw], |i| ((i * 37 % 101) as f64 / 50.0 - 1.0) * 0.7)
}

#[test]
fn default_encoder_emits_four_levels() {
    let enc = build_encoder("rgb", &EncoderConfig::default(), BandSpec::rgb(), 3).unwrap();
    let p = enc.forward(&probe(3, 64)).unwrap();
    let shapes: Vec<&[usize]> = p.levels.iter().map(|t| t.shape()).collect();
    assert_eq!(shapes, vec![&[2, 8, 16, 16][..], &[2, 16, 8, 8], &[2, 32, 4, 4], &[2, 64, 2, 2]]);
    assert!(p.levels.iter().all(Tensor::is_finite));
    assert!(enc.forward(&Tensor::zeros(&[1, 4, 64, 64])).is_err());
    assert!(enc.forward(&Tensor::zeros(&[1, 3, 48, 64])).is_err());
}

#[test]
fn config_rules() {
    let flat = EncoderConfig {
        dims: [8, 8, 8, 8],
        ..EncoderConfig::default()
    };
    assert!(build_encoder("x", &flat, BandSpec::rgb(), 0).is_err());
    let a = build_encoder("a", &EncoderConfig::default(), BandSpec::rgb(), 0).unwrap();
    let b = build_encoder("b", &EncoderConfig::default(), BandSpec::rgb(), 0).unwrap();
    assert_eq!(a.net, b.net);
    assert_eq!(a.param_count(), b.param_count());
    let wide = EncoderConfig {
        dims: [16, 32, 64, 128],
        ..EncoderConfig::default()
    };
    let w = build_encoder("w", &wide, BandSpec::rgb(), 0).unwrap();
    assert!(w.param_count() > a.param_count());
    let sum: usize = a.net.params().iter().map(|t| t.numel()).sum();
    assert_eq!(a.param_count(), sum);
}

#[test]
fn frozen_encoder_weights_survive_backward() {
    let mut enc = build_encoder("e", &EncoderConfig::default(), BandSpec::sentinel1(), 1).unwrap();
    enc.frozen = true;
    let before = enc.weights_digest();
    for _ in 0..3 {
        let mut g = Graph::new();
        let x = g.leaf(probe(2, 32), true);
        let (levels, vars) = enc.forward_graph(&mut g, x, true).unwrap();
        let pooled = g.global_avg_pool(levels[3]);
        let loss = g.mse(pooled, &Tensor::zeros(&[2, 64]));
        g.backward(loss);
        assert!(vars.iter().all(|&v| g.grad(v).is_none()));
        assert!(g.grad(x).is_some());
    }
    assert_eq!(enc.weights_digest(), before);
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let tmp = tempfile::tempdir().unwrap();
    let mut enc = build_encoder("s2.v1", &EncoderConfig::default(), BandSpec::sentinel2(), 9).unwrap();
    enc.provenance.dataset_name = "synthetic-ms".into();
    enc.provenance.final_val_metric = Some(0.8125);
    let dir = tmp.path().join("ckpt");
    save_checkpoint(&enc, &dir).unwrap();
    let back = load_checkpoint(&dir).unwrap();
    assert_eq!(back, enc);
    let x = probe(13, 32);
    assert_eq!(back.forward(&x).unwrap(), enc.forward(&x).unwrap());

    let weights = std::fs::read(dir.join(WEIGHTS_FILE)).unwrap();
    std::fs::write(dir.join(WEIGHTS_FILE), &weights[..weights.len() - 8]).unwrap();
    assert!(matches!(load_checkpoint(&dir), Err(Error::CheckpointShape(_))));
    std::fs::write(dir.join(WEIGHTS_FILE), &weights).unwrap();

    let manifest = std::fs::read_to_string(dir.join(MANIFEST_FILE)).unwrap();
    std::fs::write(dir.join(MANIFEST_FILE), manifest.replace("format_version = 1", "format_version = 2")).unwrap();
    assert!(matches!(load_checkpoint(&dir), Err(Error::Version { found: 2, expected: 1 })));
    std::fs::write(dir.join(MANIFEST_FILE), "format_version = 1\nencoder_id = [").unwrap();
    assert!(matches!(load_checkpoint(&dir), Err(Error::Manifest(_))));
}

#[test]
fn registry_grows_in_order() {
    let mut reg = SpecialistRegistry::new();
    for i in 0..21 {
        reg.register(build_encoder(&format!("enc{i:02}"), &EncoderConfig::default(), BandSpec::rgb(), i).unwrap())
            .unwrap();
    }
    assert_eq!(reg.len(), 21);
    assert_eq!(reg.ids()[20], "enc20");
    let dup = build_encoder("enc03", &EncoderConfig::default(), BandSpec::rgb(), 99).unwrap();
    assert!(matches!(reg.register(dup), Err(Error::DuplicateId(_))));
    assert_eq!(reg.get("enc03").unwrap().net, build_encoder("x", &EncoderConfig::default(), BandSpec::rgb(), 3).unwrap().net);

    let rules = RuleRegistry::standard();
    let task = TaskSpec::classification(3);
    let first = build_ensemble(reg.encoders()[..2].to_vec(), rules.clone(), BandSpec::rgb(), task.clone(), &EnsembleOptions::default()).unwrap();
    assert_eq!(first.len(), 2);
    let second = build_ensemble(reg.encoders().to_vec(), rules, BandSpec::rgb(), task, &EnsembleOptions::default()).unwrap();
    assert_eq!(second.len(), 21);
    assert_eq!(second.branches().len(), 21);
}
