mod common;

use std::collections::HashSet;

use common::randn;
use fbn_core::batchnorm::BatchStats;
use fbn_core::space::{
    count_flops, count_params, load_checkpoint, save_checkpoint, ArchEncoding, BnPolicy, BnRole, OpKind, SpaceConfig,
    Supernet, TrainMode, NUM_EDGES,
};
use fbn_core::tensor::{Tape, Tensor};
use fbn_core::RngState;

fn small(fair: bool) -> SpaceConfig {
    SpaceConfig {
        in_channels: 3,
        image_size: 6,
        channels: 4,
        stages: 2,
        cells_per_stage: 1,
        num_classes: 3,
        fair_bn: fair,
        seed: 11,
        ..Default::default()
    }
}

fn images(n: usize, seed: u64) -> Tensor {
    randn(&[n, 3, 6, 6], seed)
}

/// Perturb every BN parameter and push a few logged batches, so copies are
/// checked against non-default state.
fn perturb(net: &mut Supernet, seed: u64) {
    let mut rng = RngState::new(seed);
    for id in net.bn_param_ids() {
        for v in net.store.get_mut(id).tensor.data_mut() {
            *v += 0.3 * rng.normal();
        }
    }
    for bn in &mut net.bns {
        for _ in 0..3 {
            let c = bn.channels();
            bn.record(BatchStats {
                mean: (0..c).map(|_| rng.normal()).collect(),
                var: (0..c).map(|_| 0.5 + rng.uniform()).collect(),
            });
        }
    }
}

#[test]
fn fair_edges_carry_five_bns_biased_two() {
    for (fair, per_edge) in [(true, 5), (false, 2)] {
        let cfg = small(fair);
        let net = Supernet::build(&cfg).unwrap();
        for (cell, slots) in net.cells.iter().enumerate() {
            let c = cfg.stage_channels(cfg.cell_stage(cell));
            for slot in slots {
                let bns: Vec<usize> = slot.bn.iter().flatten().copied().collect();
                assert_eq!(bns.len(), per_edge);
                let learnable: usize = bns
                    .iter()
                    .map(|&b| net.store.get(net.bns[b].gamma).tensor.numel() + net.store.get(net.bns[b].beta).tensor.numel())
                    .sum();
                assert_eq!(learnable, per_edge * 2 * c);
            }
        }
    }
}

#[test]
fn same_seed_same_checksum() {
    let a = Supernet::build(&small(true)).unwrap();
    let b = Supernet::build(&small(true)).unwrap();
    assert_eq!(a.store.checksum(|_| true), b.store.checksum(|_| true));
    let c = Supernet::build(&SpaceConfig { seed: 12, ..small(true) }).unwrap();
    assert_ne!(a.store.checksum(|_| true), c.store.checksum(|_| true));
}

#[test]
fn invalid_config_rejected() {
    for cfg in [
        SpaceConfig { channels: 3, ..small(true) },
        SpaceConfig { stages: 0, ..small(true) },
        SpaceConfig { num_classes: 1, ..small(true) },
    ] {
        assert!(Supernet::build(&cfg).is_err());
    }
}

#[test]
fn bn_only_freezes_everything_but_bn() {
    let mut net = Supernet::build(&small(true)).unwrap();
    let bn: HashSet<_> = net.bn_param_ids().into_iter().collect();
    for (id, p) in net.store.iter() {
        assert_eq!(p.trainable, bn.contains(&id), "{}", p.name);
    }
    net.set_train_mode(TrainMode::Full);
    assert!(net.store.iter().all(|(_, p)| p.trainable));
}

#[test]
fn standalone_replica_matches_subnet_logits() {
    let mut rng = RngState::new(5);
    for fair in [true, false] {
        let cfg = small(fair);
        let mut sup = Supernet::build(&cfg).unwrap();
        perturb(&mut sup, 1);
        for _ in 0..4 {
            let arch = ArchEncoding::uniform(&mut rng);
            // different seed, then copy every parameter and BN state by name
            let mut alone = Supernet::standalone(&SpaceConfig { seed: 999, ..cfg.clone() }, arch).unwrap();
            for (id, p) in alone.store.iter().map(|(i, p)| (i, p.name.clone())).collect::<Vec<_>>() {
                let src = sup.store.id(&p).unwrap();
                alone.store.get_mut(id).tensor = sup.store.get(src).tensor.clone();
            }
            for bn in &mut alone.bns {
                let src = sup.bns.iter().find(|b| b.name == bn.name).unwrap();
                bn.running_mean = src.running_mean.clone();
                bn.running_var = src.running_var.clone();
                bn.record(src.last_stats().unwrap().clone());
                bn.running_mean = src.running_mean.clone();
                bn.running_var = src.running_var.clone();
            }
            let x = images(4, 7);
            for running in [false, true] {
                let mut t1 = Tape::new();
                let mut t2 = Tape::new();
                let (mut p1, mut p2) = if running {
                    (BnPolicy::Running, BnPolicy::Running)
                } else {
                    (BnPolicy::Batch, BnPolicy::Batch)
                };
                let a = sup.forward(&mut t1, arch, &x, &mut p1).unwrap();
                let b = alone.forward(&mut t2, arch, &x, &mut p2).unwrap();
                for (u, v) in t1.value(a.logits).data().iter().zip(t2.value(b.logits).data()) {
                    assert!((u - v).abs() < 1e-10, "{arch} fair={fair}: {u} vs {v}");
                }
            }
            let other = ArchEncoding::from_index((arch.index() + 1) % 15_625).unwrap();
            assert!(alone.forward(&mut Tape::new(), other, &x, &mut BnPolicy::Batch).is_err());
        }
    }
}

#[test]
fn subnet_touches_one_bn_per_edge() {
    let cfg = small(true);
    let net = Supernet::build(&cfg).unwrap();
    let mut rng = RngState::new(2);
    for _ in 0..10 {
        let arch = ArchEncoding::uniform(&mut rng);
        let out = net.forward(&mut Tape::new(), arch, &images(3, 1), &mut BnPolicy::Batch).unwrap();
        let edge_bns: Vec<usize> = out
            .observed
            .iter()
            .map(|(i, _)| *i)
            .filter(|&i| matches!(net.bn_roles[i], BnRole::Edge { .. }))
            .collect();
        assert_eq!(edge_bns.len(), cfg.num_cells() * NUM_EDGES);
        for &i in &edge_bns {
            let BnRole::Edge { edge, op, .. } = net.bn_roles[i] else { unreachable!() };
            assert_eq!(arch.op(edge), op);
        }
        let used: Vec<usize> = out.observed.iter().map(|(i, _)| *i).collect();
        let mut sorted_path = net.path_bns(arch);
        sorted_path.sort();
        let mut sorted_used = used.clone();
        sorted_used.sort();
        assert_eq!(sorted_path, sorted_used);
    }
}

#[test]
fn weight_sharing_gives_identical_edge_activations() {
    let net = Supernet::build(&small(true)).unwrap();
    let a: ArchEncoding = "012340".parse().unwrap();
    let b: ArchEncoding = "043210".parse().unwrap();
    let x = images(3, 4);
    let (mut ta, mut tb) = (Tape::new(), Tape::new());
    let fa = net.forward(&mut ta, a, &x, &mut BnPolicy::Batch).unwrap();
    let fb = net.forward(&mut tb, b, &x, &mut BnPolicy::Batch).unwrap();
    // edge 0 (node 0 -> 1) of cell 0 uses conv3x3 in both
    let bn = net.cells[0][0].bn[0].unwrap();
    let ta_out = fa.traces.iter().find(|(i, _)| *i == bn).unwrap().1.output;
    let tb_out = fb.traces.iter().find(|(i, _)| *i == bn).unwrap().1.output;
    assert_eq!(ta.value(ta_out).data(), tb.value(tb_out).data());
}

#[test]
fn all_identity_bn_only_gradients_reach_bn_params_only() {
    let net = Supernet::build(&small(true)).unwrap();
    let arch = ArchEncoding::encode([OpKind::Identity; 6]);
    let mut tape = Tape::new();
    let out = net.forward(&mut tape, arch, &images(4, 3), &mut BnPolicy::Batch).unwrap();
    let loss = tape.softmax_cross_entropy(out.logits, &[0, 1, 2, 0]).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut store = net.store.clone();
    let touched = grads.accumulate(&tape, &mut store);
    assert!(!touched.is_empty());
    assert!(touched.iter().all(|&id| net.is_bn_param(id)));
}

#[test]
fn all_zero_logits_ignore_the_input() {
    for fair in [true, false] {
        let mut net = Supernet::build(&small(fair)).unwrap();
        perturb(&mut net, 3);
        let arch = ArchEncoding::encode([OpKind::Zero; 6]);
        let mut t = Tape::new();
        let a = net.forward(&mut t, arch, &images(4, 1), &mut BnPolicy::Batch).unwrap().logits;
        let b = net.forward(&mut t, arch, &images(4, 2), &mut BnPolicy::Batch).unwrap().logits;
        assert_eq!(t.value(a).data(), t.value(b).data());
        // and every row equals the head-β readout
        let beta = net.store.get(net.bns[net.head_bn].beta).tensor.data().to_vec();
        let w = net.store.get(net.classifier_w).tensor.data().to_vec();
        let k = 3;
        for row in t.value(a).data().chunks(k) {
            for (j, v) in row.iter().enumerate() {
                let want: f64 = beta.iter().enumerate().map(|(c, b)| b.max(0.0) * w[c * k + j]).sum();
                assert!((v - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn param_counts_match_layer_walk() {
    let mut rng = RngState::new(8);
    for fair in [true, false] {
        let cfg = small(fair);
        for _ in 0..20 {
            let arch = ArchEncoding::uniform(&mut rng);
            let net = Supernet::standalone(&cfg, arch).unwrap();
            let total: usize = net.store.iter().map(|(_, p)| p.tensor.numel()).sum();
            let learnable: usize = net.store.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.tensor.numel()).sum();
            assert_eq!(count_params(arch, &cfg, false), total as u64);
            assert_eq!(count_params(arch, &cfg, true), learnable as u64);
        }
    }
}

#[test]
fn flop_counts_match_recorded_macs() {
    let mut rng = RngState::new(9);
    let cfg = small(true);
    for _ in 0..20 {
        let arch = ArchEncoding::uniform(&mut rng);
        let net = Supernet::standalone(&cfg, arch).unwrap();
        let mut tape = Tape::new();
        net.forward(&mut tape, arch, &images(2, 5), &mut BnPolicy::Batch).unwrap();
        assert_eq!(count_flops(arch, &cfg), tape.mac_count() / 2, "{arch}");
    }
}

#[test]
fn per_edge_closed_forms() {
    let cfg = SpaceConfig { stages: 1, ..small(true) };
    let zero = ArchEncoding::encode([OpKind::Zero; 6]);
    let mut one_conv = [OpKind::Zero; 6];
    one_conv[2] = OpKind::Conv3x3;
    let (c, hw) = (cfg.channels as u64, (cfg.image_size * cfg.image_size) as u64);
    let conv = ArchEncoding::encode(one_conv);
    assert_eq!(count_flops(conv, &cfg) - count_flops(zero, &cfg), 9 * c * c * hw);
    let mut one_id = [OpKind::Zero; 6];
    one_id[2] = OpKind::Identity;
    let id = ArchEncoding::encode(one_id);
    assert_eq!(count_flops(id, &cfg), count_flops(zero, &cfg));
    assert_eq!(count_params(id, &cfg, true), count_params(zero, &cfg, true));
    let biased = SpaceConfig { fair_bn: false, ..cfg.clone() };
    assert_eq!(count_params(id, &biased, true), count_params(zero, &biased, true));
    let no_zero_bn = SpaceConfig { zero_bn: false, ..cfg };
    assert_eq!(count_params(id, &no_zero_bn, true) - count_params(zero, &no_zero_bn, true), 2 * c);
}

#[test]
fn fair_learnable_counts_equal_across_architectures() {
    let cfg = small(true);
    let mut rng = RngState::new(10);
    let first = count_params(ArchEncoding::uniform(&mut rng), &cfg, true);
    for _ in 0..100 {
        assert_eq!(count_params(ArchEncoding::uniform(&mut rng), &cfg, true), first);
    }
}

#[test]
fn checkpoint_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let mut net = Supernet::build(&small(true)).unwrap();
    perturb(&mut net, 4);
    let path = dir.path().join("net.fbns");
    save_checkpoint(&net, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.store.checksum(|_| true), net.store.checksum(|_| true));
    for (a, b) in back.bns.iter().zip(&net.bns) {
        assert_eq!(a.running_mean, b.running_mean);
        assert_eq!(a.running_var, b.running_var);
        assert_eq!(a.updates(), b.updates());
        assert!(a.stats_log().eq(b.stats_log()));
    }
    let arch: ArchEncoding = "120344".parse().unwrap();
    let x = images(3, 6);
    let mut t = Tape::new();
    let u = net.forward(&mut t, arch, &x, &mut BnPolicy::Running).unwrap().logits;
    let v = back.forward(&mut t, arch, &x, &mut BnPolicy::Running).unwrap().logits;
    assert_eq!(t.value(u).data(), t.value(v).data());

    let alone = Supernet::standalone(&small(false), arch).unwrap();
    let p2 = dir.path().join("alone.fbns");
    save_checkpoint(&alone, &p2).unwrap();
    assert_eq!(load_checkpoint(&p2).unwrap().restricted_to(), Some(arch));

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_checkpoint(&path).is_err());
    bytes[0] = b'F';
    bytes.pop();
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_checkpoint(&path).is_err());
}
