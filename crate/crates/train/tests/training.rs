use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zebra_core::ZebraConfig;
use zebra_train::config::ExperimentConfig;
use zebra_train::data::{synthetic_blobs, Splits};
use zebra_train::harness::{
    evaluate, report_from_counts, train, zero_block_recount, RecountBlock, Trainer,
};
use zebra_train::layers::Mode;
use zebra_train::network::{Arch, ModelSpec, Network, StageSpec, Stage};
use zebra_train::optim::OptimizerConfig;
use zebra_train::pruning::{PruneMethod, PruneSpec, ChannelMask, rebuild_slimmed_model};
use zebra_train::tensor::Tensor;

fn splits() -> Splits {
    Splits { train: synthetic_blobs(256, 16, 10, 11), test: synthetic_blobs(128, 16, 10, 12), source: "synthetic".into() }
}

fn input(seed: u64, n: usize, size: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(n, 3, size, size, (0..n * 3 * size * size).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

#[test]
fn t_obj_zero_matches_the_gate_free_control() {
    let gated = ExperimentConfig::quick(Arch::ToyCnn, 0.0, 2, 3);
    let control = ExperimentConfig { gated: false, ..gated.clone() };
    let g = train(&gated, &splits(), |_| {}).unwrap();
    let c = train(&control, &splits(), |_| {}).unwrap();
    assert_eq!(g.metrics[0].reg_loss, 0.0);
    for (a, b) in g.metrics.iter().zip(&c.metrics) {
        assert!((a.test_accuracy - b.test_accuracy).abs() <= 0.02);
    }
}

#[test]
fn resnet_gate_count_equals_activation_count() {
    let cfg = ZebraConfig::hard(4, 0.1);
    let net = Network::new(ModelSpec::for_arch(Arch::ResnetSmall, 32, 10), Some(&cfg), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let activations: usize = net
        .spec
        .stages
        .iter()
        .map(|s| match s {
            StageSpec::Conv { .. } => 1,
            StageSpec::Residual { .. } => 2,
            StageSpec::MaxPool => 0,
        })
        .sum();
    assert_eq!(net.gates().len(), activations);
    assert_eq!(activations, 7);
}

#[test]
fn regularizer_descends_when_lambda_is_zero() {
    let cfg = ZebraConfig::hard(4, 0.2);
    let mut net = Network::new(ModelSpec::for_arch(Arch::ToyCnn, 16, 10), Some(&cfg), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for g in net.gates_mut() {
        for b in &mut g.state.head.as_mut().unwrap().bias {
            *b = rng.gen_range(-0.5..0.8);
        }
    }
    let opt = OptimizerConfig { initial_lr: 0.01, momentum: 0.0, weight_decay: 0.0, ..Default::default() };
    let mut trainer = Trainer::new(net, opt, 0.0, 0.0, ChaCha8Rng::seed_from_u64(3));
    let data = synthetic_blobs(32, 16, 10, 4);
    let (x, y) = data.batch(&(0..32).collect::<Vec<_>>());
    let mut last = f64::INFINITY;
    let mut first = None;
    for _ in 0..60 {
        let s = trainer.step(&x, &y, 0.01);
        assert!(s.reg_loss <= last + 1e-9, "{} > {last}", s.reg_loss);
        last = s.reg_loss;
        first.get_or_insert(s.reg_loss);
    }
    assert!(last < 0.5 * first.unwrap(), "{last} vs {first:?}");
}

#[test]
fn weight_pruned_masks_stay_zero_through_zebra_training() {
    let mut cfg = ExperimentConfig::quick(Arch::ToyCnn, 0.1, 2, 9);
    cfg.prune = Some(PruneSpec { method: PruneMethod::WeightPruning, ratio: 0.2, l1_coefficient: 0.0, pretrain_epochs: 2 });
    let out = train(&cfg, &splits(), |_| {}).unwrap();
    let mut net = out.network;
    let mut masked = 0usize;
    net.visit_params(&mut |p| {
        if let Some(mask) = p.mask {
            for (w, &k) in p.value.iter().zip(mask) {
                if !k {
                    assert_eq!(w.to_bits(), 0, "{}", p.name);
                    masked += 1;
                }
            }
        }
    });
    assert!(masked > 0);
    assert_eq!(out.metrics.len(), 4);
}

#[test]
fn slimming_run_shrinks_the_model() {
    let mut cfg = ExperimentConfig::quick(Arch::VggSmall, 0.1, 1, 9);
    cfg.prune = Some(PruneSpec { method: PruneMethod::NetworkSlimming, ratio: 0.3, l1_coefficient: 1e-4, pretrain_epochs: 1 });
    let out = train(&cfg, &splits(), |_| {}).unwrap();
    let widths: usize = out.network.spec.stages.iter().map(|s| match s {
        StageSpec::Conv { out_channels, .. } => *out_channels,
        _ => 0,
    }).sum();
    assert_eq!(widths, (16 + 16 + 32 + 32 + 64) - (0.3f64 * 160.0).floor() as usize);
}

fn two_conv_spec() -> ModelSpec {
    ModelSpec {
        arch: Arch::ToyCnn,
        in_channels: 3,
        input_size: 8,
        num_classes: 4,
        stages: vec![
            StageSpec::Conv { name: "a".into(), out_channels: 2, kernel: 3, stride: 1 },
            StageSpec::Conv { name: "b".into(), out_channels: 3, kernel: 3, stride: 1 },
        ],
    }
}

#[test]
fn rebuild_copies_surviving_kernel_slices() {
    let net = Network::new(two_conv_spec(), None, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let mask = ChannelMask { keep_per_layer: BTreeMap::from([("a.bn".to_string(), vec![false, true])]) };
    let slim = rebuild_slimmed_model(&net, &mask).unwrap();
    let (Stage::Conv(orig), Stage::Conv(small)) = (&net.stages[1], &slim.stages[1]) else { panic!() };
    assert_eq!(small.conv.in_ch, 1);
    for o in 0..3 {
        assert_eq!(&small.conv.weight[o * 9..(o + 1) * 9], &orig.conv.weight[(o * 2 + 1) * 9..(o * 2 + 2) * 9]);
    }
    let all = ChannelMask { keep_per_layer: BTreeMap::from([("a.bn".to_string(), vec![true, true])]) };
    assert_eq!(rebuild_slimmed_model(&net, &all).unwrap().spec, net.spec);
    let none = ChannelMask { keep_per_layer: BTreeMap::from([("a.bn".to_string(), vec![false, false])]) };
    assert!(rebuild_slimmed_model(&net, &none).is_err());
}

#[test]
fn slimming_dead_channels_preserves_logits() {
    for (arch, size) in [(Arch::ToyCnn, 16), (Arch::VggSmall, 16), (Arch::ResnetSmall, 16)] {
        let cfg = ZebraConfig::hard(4, 0.05);
        let mut net = Network::new(ModelSpec::for_arch(arch, size, 10), Some(&cfg), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut keep = BTreeMap::new();
        for bn in net.prunable_bns() {
            let m: Vec<bool> = (0..bn.channels).map(|c| c == 0 || rng.gen_bool(0.6)).collect();
            keep.insert(bn.name.clone(), m);
        }
        // Kill the channels that will be removed: gamma = 0 and beta = 0.
        net.visit_params(&mut |p| {
            let bn_name = p.name.rsplit_once('.').map(|(a, _)| a.to_string()).unwrap();
            if let Some(m) = keep.get(&bn_name) {
                for (v, &k) in p.value.iter_mut().zip(m) {
                    if !k {
                        *v = 0.0;
                    }
                }
            }
        });
        let mut slim = rebuild_slimmed_model(&net, &ChannelMask { keep_per_layer: keep }).unwrap();
        let x = input(8, 4, size);
        for mode in [Mode::Eval, Mode::Train] {
            let a = net.forward(&x, mode);
            let b = slim.forward(&x, mode);
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() <= 1e-5 * (1.0 + p.abs()), "{arch:?} {mode:?}: {p} vs {q}");
            }
        }
    }
}

#[test]
fn reported_bandwidth_recomputes_from_saved_masks() {
    let cfg = ExperimentConfig::quick(Arch::ToyCnn, 0.2, 1, 4);
    let out = train(&cfg, &splits(), |_| {}).unwrap();
    let test = splits().test;
    let eval = evaluate(&out.folded, &test, 32).unwrap();
    let last = out.metrics.last().unwrap();
    assert_eq!(last.reduced_bandwidth_percent, eval.reduced_percent());
    // Offline: rerun the folded network, keep every mask, count kept blocks.
    let mut net = out.folded.to_network().unwrap();
    for g in net.gates_mut() {
        g.capture = Some(Default::default());
    }
    let idx: Vec<usize> = (0..test.len()).collect();
    net.forward(&test.batch(&idx).0, Mode::Eval);
    let layers: Vec<_> = net
        .gates()
        .iter()
        .map(|g| {
            let masks = &g.capture.as_ref().unwrap().masks;
            let kept: u64 = masks.iter().map(|m| m.kept_count() as u64).sum();
            let total: u64 = masks.iter().map(|m| m.len() as u64).sum();
            zebra_train::harness::LayerZero { layer_id: g.layer_id().into(), kept, total, zero_fraction: 0.0 }
        })
        .collect();
    let offline = report_from_counts(&net.gated_layer_specs(32), &layers).unwrap();
    assert_eq!(offline.total.reduced_percent_without_overhead, last.reduced_bandwidth_percent);
    assert_eq!(offline.total.reduced_percent_with_overhead, last.reduced_bandwidth_percent_with_overhead);
}

#[test]
fn folded_t_obj_zero_counts_natural_zero_blocks() {
    let cfg = ExperimentConfig::quick(Arch::ToyCnn, 0.0, 1, 2);
    let out = train(&cfg, &splits(), |_| {}).unwrap();
    let test = splits().test;
    let eval = evaluate(&out.folded, &test, 32).unwrap();
    let mut net = out.folded.to_network().unwrap();
    let recount = zero_block_recount(&mut net, &test, &[RecountBlock::Size(4)]).unwrap();
    for (i, layer) in eval.layers.iter().enumerate() {
        assert_eq!(recount[0].layers[i].1, layer.total - layer.kept, "{}", layer.layer_id);
    }
}

#[test]
fn zero_fractions_shrink_as_blocks_grow() {
    let cfg = ExperimentConfig::quick(Arch::VggSmall, 0.1, 1, 2);
    let out = train(&cfg, &splits(), |_| {}).unwrap();
    let blocks = [RecountBlock::Size(2), RecountBlock::Size(4), RecountBlock::WholeMap];
    let mut trained = out.folded.to_network().unwrap();
    let mut random = Network::new(trained.spec.clone(), Some(&cfg.zebra), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    random.fold(&cfg.zebra);
    for net in [&mut trained, &mut random] {
        let r = zero_block_recount(net, &splits().test, &blocks).unwrap();
        assert!(r[0].fraction() >= r[1].fraction() && r[1].fraction() >= r[2].fraction());
        for l in 0..r[0].layers.len() {
            assert!(r[0].layer_fraction(l) >= r[1].layer_fraction(l));
            assert!(r[1].layer_fraction(l) >= r[2].layer_fraction(l));
        }
    }
}

#[test]
fn soft_gate_training_runs_and_moves_thresholds() {
    let mut cfg = ExperimentConfig::quick(Arch::ToyCnn, 0.2, 1, 2);
    cfg.zebra.gate_mode = zebra_core::GateMode::Soft;
    let out = train(&cfg, &splits(), |_| {}).unwrap();
    let dev = out.metrics[0].max_threshold_deviation;
    assert!(dev > 0.0 && dev.is_finite());
}
