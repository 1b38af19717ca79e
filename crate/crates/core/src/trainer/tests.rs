use tempfile::TempDir;

use super::*;
use crate::model::parameter_count;
use crate::tensor::{mul, sum};
use crate::volume::{generate_synthetic, SynthConfig};

fn small_benchmark(n_per_class: usize, seed: u64) -> (TempDir, DatasetManifest) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig::new(n_per_class, (32, 16, 16), seed);
    let manifest = generate_synthetic(&cfg, dir.path()).unwrap();
    (dir, manifest)
}

fn small_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs_phase1: 1,
        epochs_phase2: 2,
        batch_size: 8,
        m_per_class: 2,
        seed,
        ..TrainConfig::default()
    }
}

fn params_of<T: crate::Scalar>(net: &impl ParamCollect<T>) -> Vec<(String, Vec<T>)> {
    let mut out = Vec::new();
    net.collect("p", &mut out);
    out.into_iter()
        .map(|(n, t)| (n, t.data().to_vec()))
        .collect()
}

#[test]
fn adam_first_step_moves_by_lr_in_sign_direction() {
    let cfg = AdamConfig::default();
    let mut adam = Adam::<f64>::new(cfg);
    let x = Tensor::param(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
    // loss with constant gradient [2, -3, 4]
    let c = Tensor::from_vec(vec![3], vec![2.0, -3.0, 4.0]).unwrap();
    let loss = sum(&mul(&x, &c).unwrap());
    let grads = backward(&loss).unwrap();

    let mut slot = x.clone();
    let mut params = vec![("x".to_string(), &mut slot)];
    adam.step(&mut params, &grads, &|_| false).unwrap();
    for ((before, after), g) in x.data().iter().zip(slot.data()).zip(c.data()) {
        let delta = after - before;
        let expected = -1e-3 * g.signum();
        assert!(
            (delta - expected).abs() < 1e-6,
            "delta {delta} vs expected {expected}"
        );
    }
}

#[test]
fn adam_leaves_parameters_alone_for_zero_gradient() {
    let mut adam = Adam::<f64>::new(AdamConfig::default());
    let x = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
    let zero = Tensor::from_vec(vec![2], vec![0.0, 0.0]).unwrap();
    let loss = sum(&mul(&x, &zero).unwrap());
    let grads = backward(&loss).unwrap();

    let mut slot = x.clone();
    let mut params = vec![("x".to_string(), &mut slot)];
    adam.step(&mut params, &grads, &|_| false).unwrap();
    assert_eq!(slot.data(), x.data());
}

#[test]
fn adam_respects_the_frozen_filter_and_rejects_non_finite() {
    let mut adam = Adam::<f64>::new(AdamConfig::default());
    let x = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
    let c = Tensor::from_vec(vec![2], vec![1.0, 1.0]).unwrap();
    let grads = backward(&sum(&mul(&x, &c).unwrap())).unwrap();
    let mut slot = x.clone();
    let mut params = vec![("frozen.x".to_string(), &mut slot)];
    adam.step(&mut params, &grads, &|name| name.starts_with("frozen"))
        .unwrap();
    assert_eq!(slot.data(), x.data());

    let y = Tensor::param(vec![1], vec![1.0]).unwrap();
    let nan = Tensor::from_vec(vec![1], vec![f64::NAN]).unwrap();
    let bad = backward(&sum(&mul(&y, &nan).unwrap())).unwrap();
    let mut slot = y.clone();
    let mut params = vec![("y".to_string(), &mut slot)];
    match adam.step(&mut params, &bad, &|_| false) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("step"), "{msg}"),
        other => panic!("expected numeric error, got {other:?}"),
    }
}

#[test]
fn zero_epochs_returns_the_initialized_embedder() {
    let (_dir, manifest) = small_benchmark(4, 3);
    let mut store = VolumeStore::new(&manifest, 64 << 20);
    let spec = ModelSpec::rtcnn_embedder(ModelSpec::tensor_dims((32, 16, 16)));
    let cfg = TrainConfig {
        epochs_phase1: 0,
        ..small_train_config(5)
    };
    let subset: Vec<usize> = (0..manifest.entries.len()).collect();
    let (trained, log) =
        train_embedder(&manifest, &subset, &spec, &cfg, &mut store, None).unwrap();
    assert!(log.records.is_empty());

    let fresh = build_embedder::<f32>(&spec, crate::seed_mix(5, 0x1)).unwrap();
    assert_eq!(params_of(&trained), params_of(&fresh));
}

#[test]
fn training_is_bitwise_deterministic_under_seed() {
    let (_dir, manifest) = small_benchmark(8, 11);
    let spec = ModelSpec::rtcnn_embedder(ModelSpec::tensor_dims((32, 16, 16)));
    let cfg = small_train_config(9);
    let subset: Vec<usize> = (0..manifest.entries.len()).collect();

    let mut store1 = VolumeStore::new(&manifest, 64 << 20);
    let (a, log_a) = train_embedder(&manifest, &subset, &spec, &cfg, &mut store1, None).unwrap();
    let mut store2 = VolumeStore::new(&manifest, 1 << 20); // tiny cache, same result
    let (b, log_b) = train_embedder(&manifest, &subset, &spec, &cfg, &mut store2, None).unwrap();

    assert_eq!(params_of(&a), params_of(&b));
    assert_eq!(
        serde_json::to_string(&log_a.records).unwrap(),
        serde_json::to_string(&log_b.records).unwrap()
    );

    let cfg2 = small_train_config(10);
    let mut store3 = VolumeStore::new(&manifest, 64 << 20);
    let (c, _) = train_embedder(&manifest, &subset, &spec, &cfg2, &mut store3, None).unwrap();
    assert_ne!(params_of(&a), params_of(&c), "different seeds must differ");
}

#[test]
fn phase_two_never_touches_embedder_parameters() {
    let (_dir, manifest) = small_benchmark(8, 17);
    let mut store = VolumeStore::new(&manifest, 64 << 20);
    let spec = ModelSpec::rtcnn_embedder(ModelSpec::tensor_dims((32, 16, 16)));
    let cls_spec = ModelSpec::rtcnn_classifier();
    let cfg = small_train_config(21);
    let subset: Vec<usize> = (0..manifest.entries.len()).collect();

    let (embedder, _) =
        train_embedder(&manifest, &subset, &spec, &cfg, &mut store, None).unwrap();
    let before = params_of(&embedder);
    let (classifier, log) =
        train_classifier(&embedder, &manifest, &subset, &cls_spec, &cfg, &mut store).unwrap();
    assert_eq!(params_of(&embedder), before, "freeze must be bitwise");
    assert_eq!(parameter_count(&classifier), 149_889);
    assert_eq!(log.records.len(), 2 * 2); // 2 epochs x 2 batches
}

#[test]
fn constant_embedder_leaves_classifier_at_chance() {
    let (_dir, manifest) = small_benchmark(16, 23);
    let mut store = VolumeStore::new(&manifest, 64 << 20);
    let spec = ModelSpec::rtcnn_embedder(ModelSpec::tensor_dims((32, 16, 16)));
    let cls_spec = ModelSpec::rtcnn_classifier();
    let cfg = TrainConfig {
        epochs_phase2: 5,
        ..small_train_config(29)
    };

    // zero every parameter: embeddings collapse to the zero vector
    let mut embedder = build_embedder::<f32>(&spec, 1).unwrap();
    let mut params = Vec::new();
    embedder.collect_mut("e", &mut params);
    for (_, slot) in params.iter_mut() {
        **slot = Tensor::new_leaf(slot.shape().to_vec(), vec![0.0; slot.len()], true);
    }

    let subset: Vec<usize> = (0..manifest.entries.len()).collect();
    let embeddings = embed_entries(&embedder, &subset, &mut store, 8).unwrap();
    for row in &embeddings {
        assert!(row.iter().all(|v| *v == 0.0));
    }

    let (classifier, _) =
        train_classifier(&embedder, &manifest, &subset, &cls_spec, &cfg, &mut store).unwrap();
    // constant input: predictions are constant, accuracy equals the prior
    let e = Tensor::from_vec(vec![1, 512], vec![0.0; 512]).unwrap();
    let p = classifier.forward(&e).unwrap().item().unwrap();
    let predicted: u8 = if p >= 0.5 { 1 } else { 0 };
    let correct = manifest
        .entries
        .iter()
        .filter(|entry| entry.label == predicted)
        .count();
    let accuracy = correct as f64 / manifest.entries.len() as f64;
    assert!((accuracy - 0.5).abs() <= 0.05, "accuracy {accuracy}");
}

#[test]
fn rtcnn_and_baseline_losses_stay_finite_and_logged() {
    let (_dir, manifest) = small_benchmark(8, 31);
    let mut store = VolumeStore::new(&manifest, 64 << 20);
    let emb_spec = ModelSpec::rtcnn_embedder(ModelSpec::tensor_dims((32, 16, 16)));
    let cls_spec = ModelSpec::rtcnn_classifier();
    let cfg = small_train_config(37);
    let subset: Vec<usize> = (0..manifest.entries.len()).collect();

    let (_e, _c, log) = train_rtcnn(
        &manifest, &subset, &emb_spec, &cls_spec, &cfg, &mut store, None,
    )
    .unwrap();
    // phase 1: 1 epoch x 2 batches, phase 2: 2 epochs x 2 batches
    assert_eq!(log.records.len(), 2 + 4);
    assert!(log.records.iter().all(|r| r.loss.is_finite()));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.jsonl");
    log.write_jsonl(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 6);

    let rcnn_spec = ModelSpec::rcnn_baseline(ModelSpec::tensor_dims((32, 16, 16)));
    let (_b, blog) = train_rcnn(&manifest, &subset, &rcnn_spec, &cfg, &mut store, None).unwrap();
    assert_eq!(blog.records.len(), (1 + 2) * 2);
}

#[test]
fn volume_store_evicts_but_stays_correct() {
    let (_dir, manifest) = small_benchmark(4, 41);
    // budget of two volumes (32*16*16 voxels * 4 bytes)
    let mut store = VolumeStore::new(&manifest, 2 * 32 * 16 * 16 * 4);
    let first = store.get(0).unwrap().voxels.clone();
    let _ = store.get(1).unwrap();
    let _ = store.get(2).unwrap();
    let _ = store.get(3).unwrap();
    let again = store.get(0).unwrap();
    assert_eq!(again.voxels, first, "evicted volume must reload identically");
}

#[test]
fn batch_tensor_checks_volume_dims() {
    let (_dir, manifest) = small_benchmark(2, 43);
    let mut store = VolumeStore::new(&manifest, 64 << 20);
    assert!(store.batch_tensor(&[0], [16, 16, 16]).is_err());
    let x = store.batch_tensor(&[0, 1], [16, 16, 32]).unwrap();
    assert_eq!(x.shape(), &[2, 1, 16, 16, 32]);
}
