mod common;

use std::collections::HashSet;

use fbn_core::space::{ArchEncoding, BnPolicy, OpKind, SpaceConfig, Supernet, TrainMode};
use fbn_core::tensor::Tape;
use fbn_core::train::{
    accuracy_from_logits, argmax, evaluate_accuracy, train_standalone, train_supernet, Dataset, DatasetSpec, LrSchedule,
    Split, TrainConfig, DATA_FILE,
};
use fbn_core::Error;

fn spec(separation: f64, seed: u64) -> DatasetSpec {
    DatasetSpec {
        num_classes: 4,
        samples_per_class: 100,
        channels: 3,
        height: 8,
        width: 8,
        separation,
        split: [0.6, 0.2, 0.2],
        seed,
    }
}

fn space() -> SpaceConfig {
    SpaceConfig {
        image_size: 8,
        channels: 8,
        stages: 2,
        seed: 3,
        ..Default::default()
    }
}

fn cfg(mode: TrainMode, epochs: usize) -> TrainConfig {
    TrainConfig {
        mode,
        epochs,
        batch_size: 32,
        seed: 1,
        ..Default::default()
    }
}

/// Nearest-centroid accuracy on the test split using train-split centroids.
fn nearest_centroid(data: &Dataset) -> f64 {
    let d = data.image_len();
    let mut centroids = vec![vec![0.0; d]; data.num_classes];
    let mut counts = vec![0.0; data.num_classes];
    for &i in &data.splits.train {
        let k = data.labels[i] as usize;
        counts[k] += 1.0;
        for (c, v) in centroids[k].iter_mut().zip(data.image(i)) {
            *c += v;
        }
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= n);
    }
    let correct = data
        .splits
        .test
        .iter()
        .filter(|&&i| {
            let dists: Vec<f64> = centroids
                .iter()
                .map(|c| -c.iter().zip(data.image(i)).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                .collect();
            argmax(&dists) == data.labels[i] as usize
        })
        .count();
    correct as f64 / data.splits.test.len() as f64
}

#[test]
fn separable_data_is_nearest_centroid_separable() {
    let data = Dataset::generate(&DatasetSpec { samples_per_class: 300, ..spec(5.0, 2) }).unwrap();
    assert!(nearest_centroid(&data) >= 0.99);
}

#[test]
fn zero_separation_is_chance() {
    let data = Dataset::generate(&DatasetSpec { samples_per_class: 500, ..spec(0.0, 2) }).unwrap();
    let acc = nearest_centroid(&data);
    assert!((acc - 0.25).abs() < 0.06, "{acc}");
}

#[test]
fn splits_disjoint_and_exhaustive() {
    let data = Dataset::generate(&spec(3.0, 4)).unwrap();
    let all: Vec<usize> = data.splits.train.iter().chain(&data.splits.val).chain(&data.splits.test).copied().collect();
    let set: HashSet<usize> = all.iter().copied().collect();
    assert_eq!(all.len(), data.len());
    assert_eq!(set.len(), data.len());
    assert_eq!(data.splits.train.len(), 240);
}

#[test]
fn dataset_files_roundtrip_and_are_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let data = Dataset::generate(&spec(3.0, 4)).unwrap();
    data.write(a.path()).unwrap();
    Dataset::generate(&spec(3.0, 4)).unwrap().write(b.path()).unwrap();
    for f in [DATA_FILE, "splits.json"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
    }
    assert_eq!(Dataset::read(a.path()).unwrap(), data);
    let mut bytes = std::fs::read(a.path().join(DATA_FILE)).unwrap();
    bytes.truncate(bytes.len() - 1);
    std::fs::write(a.path().join(DATA_FILE), bytes).unwrap();
    assert!(Dataset::read(a.path()).is_err());
}

#[test]
fn invalid_specs_rejected() {
    assert!(Dataset::generate(&DatasetSpec { num_classes: 1, ..spec(1.0, 0) }).is_err());
    assert!(Dataset::generate(&DatasetSpec { split: [0.5, 0.2, 0.2], ..spec(1.0, 0) }).is_err());
    assert!(TrainConfig { batch_size: 1, ..Default::default() }.validate().is_err());
}

#[test]
fn accuracy_rules() {
    let logits = [0.0, 5.0, 0.0, 9.0, 1.0, 0.0];
    assert_eq!(accuracy_from_logits(&logits, 3, &[1, 0]).unwrap(), 1.0);
    // constant logits: argmax ties resolve to class 0
    let flat = [0.5; 8];
    assert_eq!(accuracy_from_logits(&flat, 2, &[0, 1, 0, 0]).unwrap(), 0.75);
    assert!(accuracy_from_logits(&[], 2, &[]).is_err());
}

#[test]
fn evaluation_matches_confusion_matrix() {
    let data = Dataset::generate(&spec(4.0, 5)).unwrap();
    let mut net = Supernet::build(&space()).unwrap();
    let arch: ArchEncoding = "013240".parse().unwrap();
    assert!(evaluate_accuracy(&net, arch, &data, Split::Val).is_err()); // no running stats yet
    train_supernet(&mut net, &data, &cfg(TrainMode::BnOnly, 1)).unwrap();
    let acc = evaluate_accuracy(&net, arch, &data, Split::Val).unwrap();
    let k = data.num_classes;
    let mut confusion = vec![vec![0usize; k]; k];
    for pair in data.splits.val.chunks(2) {
        let (x, y) = data.batch(pair).unwrap();
        let mut tape = Tape::new();
        let out = net.forward(&mut tape, arch, &x, &mut BnPolicy::Running).unwrap();
        for (row, &label) in tape.value(out.logits).data().chunks(k).zip(&y) {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            confusion[label][best] += 1;
        }
    }
    let diag: usize = (0..k).map(|i| confusion[i][i]).sum();
    assert_eq!(acc, diag as f64 / data.splits.val.len() as f64);
}

#[test]
fn bn_only_changes_exactly_the_bn_parameters() {
    let data = Dataset::generate(&spec(4.0, 6)).unwrap();
    let mut net = Supernet::build(&space()).unwrap();
    let before = net.store.clone();
    let frozen = net.frozen_checksum();
    train_supernet(&mut net, &data, &cfg(TrainMode::BnOnly, 3)).unwrap();
    assert_eq!(net.frozen_checksum(), frozen);
    // zero-op γ scales a constant-zero normalized input, so it never moves
    for (id, p) in net.store.iter() {
        let changed = p.tensor.data() != before.get(id).tensor.data();
        let expect = net.is_bn_param(id) && !(p.name.contains(".zero.") && p.name.ends_with(".gamma"));
        assert_eq!(changed, expect, "{}", p.name);
    }
}

#[test]
fn supernet_loss_decreases_and_runs_are_reproducible() {
    let data = Dataset::generate(&spec(6.0, 7)).unwrap();
    let mut a = Supernet::build(&space()).unwrap();
    let ra = train_supernet(&mut a, &data, &cfg(TrainMode::BnOnly, 4)).unwrap();
    let n = ra.step_losses.len();
    let first: f64 = ra.step_losses[..10].iter().sum::<f64>() / 10.0;
    let last: f64 = ra.step_losses[n - 10..].iter().sum::<f64>() / 10.0;
    assert!(last < first, "{first} -> {last}");
    let mut b = Supernet::build(&space()).unwrap();
    let rb = train_supernet(&mut b, &data, &cfg(TrainMode::BnOnly, 4)).unwrap();
    assert_eq!(ra.content_hash, rb.content_hash);
    assert_eq!(ra.content_hash, ra.compute_hash());
    let round = TrainConfig { sampling: fbn_core::train::PathSampling::RoundRobin, ..cfg(TrainMode::BnOnly, 1) };
    let mut c = Supernet::build(&space()).unwrap();
    assert_ne!(train_supernet(&mut c, &data, &round).unwrap().content_hash, ra.content_hash);
}

#[test]
fn bn_only_steps_are_cheaper_than_full() {
    let data = Dataset::generate(&spec(4.0, 8)).unwrap();
    let big = SpaceConfig { channels: 16, ..space() };
    let mut best = [f64::INFINITY; 2];
    for _ in 0..3 {
        for (i, mode) in [TrainMode::BnOnly, TrainMode::Full].into_iter().enumerate() {
            let mut net = Supernet::build(&big).unwrap();
            let r = train_supernet(&mut net, &data, &cfg(mode, 1)).unwrap();
            best[i] = best[i].min(r.mean_step_seconds());
        }
    }
    assert!(best[0] < best[1], "bn-only {:.4}s vs full {:.4}s per step", best[0], best[1]);
}

#[test]
fn standalone_outcomes() {
    let data = Dataset::generate(&spec(6.0, 9)).unwrap();
    let zero = ArchEncoding::encode([OpKind::Zero; 6]);
    let (_, r) = train_standalone(zero, &space(), &data, &cfg(TrainMode::Full, 5)).unwrap();
    assert!(r.test_accuracy.unwrap() < 0.4, "{:?}", r.test_accuracy);

    let conv: ArchEncoding = "003100".parse().unwrap();
    let full = TrainConfig { schedule: LrSchedule::Cosine, ..cfg(TrainMode::Full, 8) };
    let (_, r) = train_standalone(conv, &space(), &data, &full).unwrap();
    assert!(r.test_accuracy.unwrap() >= 0.95, "{:?}", r.test_accuracy);

    let bn_only = TrainConfig { lr: 0.5, ..cfg(TrainMode::BnOnly, 8) };
    let (_, r) = train_standalone(conv, &space(), &data, &bn_only).unwrap();
    assert!(r.test_accuracy.unwrap() >= 0.375, "{:?}", r.test_accuracy);
}

#[test]
fn non_finite_input_aborts_as_divergence() {
    let mut data = Dataset::generate(&spec(3.0, 10)).unwrap();
    let i = data.splits.train[0];
    let d = data.image_len();
    data.images[i * d] = f64::NAN;
    let mut net = Supernet::build(&space()).unwrap();
    match train_supernet(&mut net, &data, &cfg(TrainMode::BnOnly, 1)) {
        Err(Error::Diverged(msg)) => assert!(msg.contains("epoch 0")),
        other => panic!("expected divergence, got {other:?}"),
    }
}
