mod common;

use std::path::Path;

use eqprobe::data::{synthetic_batch, SyntheticKind};
use eqprobe::handcrafted::equivariant_partner;
use eqprobe::measure::{
    equivariance_of_channel, invariance_of_channel, magnitude_diagnostic, DiagnosticOutcome,
    Partition,
};
use eqprobe::parallel::Execution;
use eqprobe::transforms::{apply, scale_to_layer, ShiftMode, Transform};
use eqprobe::verify::{translation_net, EQUIVARIANT_TOY_INVARIANCE_CEILING};
use eqprobe::{
    load_bundle, measure_network, LayerKind, MeasureConfig, SimilarityKind, TransformSweep,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixture(name: &str) -> eqprobe::NetworkSpec {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    load_bundle(
        dir.join(format!("{name}.json")),
        dir.join(format!("{name}.bin")),
    )
    .unwrap()
}

fn noise(n: usize, shape: &[usize], seed: u64) -> Vec<eqprobe::Tensor> {
    synthetic_batch(n, shape, seed, SyntheticKind::UniformNoise)
}

#[test]
fn invariant_toy_bundle_is_rotation_invariant() {
    let net = fixture("invariant_toy");
    let report = measure_network(
        &net,
        &noise(100, &[1, 28, 28], 1),
        &TransformSweep::quarter_turns(),
        &MeasureConfig::default(),
    )
    .unwrap();
    assert_eq!(report.layers.len(), 3);
    for layer in &report.layers {
        for m in &layer.per_magnitude {
            assert!((m.mean_invariance - 1.0).abs() < 1e-6, "{layer:?}");
            assert!((m.mean_equivariance - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn equivariant_toy_bundle_cycles_channels() {
    let net = fixture("equivariant_toy");
    let config = MeasureConfig {
        channel_detail: true,
        ..MeasureConfig::default()
    };
    let report = measure_network(
        &net,
        &noise(100, &[1, 28, 28], 2),
        &TransformSweep::quarter_turns(),
        &config,
    )
    .unwrap();
    for layer in &report.layers {
        assert_eq!(layer.layer_kind, LayerKind::Conv);
        assert!(layer.mean_invariance < EQUIVARIANT_TOY_INVARIANCE_CEILING);
        for m in &layer.per_magnitude {
            assert!((m.mean_equivariance - 1.0).abs() < 1e-6);
        }
        for d in layer.channel_detail.as_ref().unwrap() {
            assert_eq!(
                d.argmax_channel,
                equivariant_partner(d.channel, d.magnitude)
            );
        }
    }
}

#[test]
fn equivariance_dominates_invariance_per_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let mut cases = 0;
    while cases < 10_000 {
        let net = common::random_net(&mut rng);
        let x = common::random_tensor(&mut rng, net.input_shape().to_vec());
        let t = if rng.gen_bool(0.5) {
            Transform::rotation(rng.gen_range(1..4))
        } else {
            Transform::translation(rng.gen_range(-5..6), rng.gen_range(-5..6))
        };
        let kind = if rng.gen_bool(0.5) {
            SimilarityKind::Pearson
        } else {
            SimilarityKind::Cosine
        };
        let clean = net.forward_with_taps(&x).unwrap();
        let moved = net.forward_with_taps(&apply(&t, &x).unwrap()).unwrap();
        for (ct, mt) in clean.taps.iter().zip(&moved.taps) {
            let shape = ct.activation.shape();
            if shape.len() != 3 || shape[1] * shape[2] < 2 {
                continue;
            }
            let aligned = apply(
                &scale_to_layer(&t, ct.cumulative_downsample),
                &ct.activation,
            )
            .unwrap();
            for c in 0..shape[0] {
                let inv = invariance_of_channel(kind, &aligned, &mt.activation, c).unwrap();
                let (eq, _) = equivariance_of_channel(kind, &mt.activation, &aligned, c).unwrap();
                assert!(
                    eq.value >= inv.value - 1e-9,
                    "{kind} {t}: eq {} < inv {}",
                    eq.value,
                    inv.value
                );
                cases += 1;
            }
        }
    }
}

#[test]
fn capped_matching_still_dominates() {
    let net = translation_net([2, 10, 10], 12, 2, 4).unwrap();
    let config = MeasureConfig {
        max_match_channels: Some(3),
        shift_mode: ShiftMode::ZeroFill,
        ..MeasureConfig::default()
    };
    let report = measure_network(
        &net,
        &noise(6, &[2, 10, 10], 4),
        &TransformSweep::quarter_turns(),
        &config,
    )
    .unwrap();
    for layer in &report.layers {
        assert_eq!(layer.approximate, layer.spatial);
        for m in &layer.per_magnitude {
            assert!(m.mean_equivariance >= m.mean_invariance - 1e-9);
        }
    }
}

#[test]
fn circular_translation_net_is_exactly_equivariant() {
    let net = translation_net([3, 32, 32], 8, 4, 5).unwrap();
    let sweep = TransformSweep::diagonal_shifts(8).unwrap();
    let report = measure_network(
        &net,
        &noise(10, &[3, 32, 32], 5),
        &sweep,
        &MeasureConfig::default(),
    )
    .unwrap();
    for layer in &report.layers {
        for m in &layer.per_magnitude {
            assert!((m.mean_equivariance - 1.0).abs() < 1e-9);
        }
    }
    let pool = report
        .layers
        .iter()
        .find(|l| l.layer_kind == LayerKind::GlobalAvgPool)
        .unwrap();
    assert_eq!(pool.partition, Partition::Final);
    assert!(pool
        .per_magnitude
        .iter()
        .all(|m| (m.mean_invariance - 1.0).abs() < 1e-9));
}

#[test]
fn zero_fill_shifts_break_exact_equivariance() {
    let net = translation_net([1, 12, 12], 4, 2, 6).unwrap();
    let config = MeasureConfig {
        shift_mode: ShiftMode::ZeroFill,
        ..MeasureConfig::default()
    };
    let sweep = TransformSweep::diagonal_shifts(3).unwrap();
    let report = measure_network(&net, &noise(5, &[1, 12, 12], 6), &sweep, &config).unwrap();
    assert!(report.layers[0].mean_equivariance < 1.0 - 1e-6);
}

#[test]
fn results_ignore_scheduling_and_sample_order() {
    let net = translation_net([2, 12, 12], 6, 3, 7).unwrap();
    let xs = synthetic_batch(16, &[2, 12, 12], 7, SyntheticKind::GaussianBlobs);
    let sweep = TransformSweep::quarter_turns();
    let run = |samples: &[eqprobe::Tensor], execution, workers| {
        let config = MeasureConfig {
            execution,
            workers,
            channel_detail: true,
            ..MeasureConfig::default()
        };
        measure_network(&net, samples, &sweep, &config).unwrap()
    };
    let base = run(&xs, Execution::Sequential, None);
    assert_eq!(base, run(&xs, Execution::Parallel, None));
    assert_eq!(base, run(&xs, Execution::Parallel, Some(3)));
    let mut reversed = xs.clone();
    reversed.reverse();
    let rev = run(&reversed, Execution::Parallel, Some(2));
    assert_eq!(base.to_csv(), rev.to_csv());
}

#[test]
fn cosine_tracks_injected_offsets_and_pearson_does_not() {
    for seed in 0..4 {
        let net = common::bias_ramp_net(seed, 7, 0.3);
        let xs = noise(20, &[1, 12, 12], seed);
        let outcome = magnitude_diagnostic(
            &net,
            &xs,
            &TransformSweep::quarter_turns(),
            &MeasureConfig::default(),
        )
        .unwrap();
        let DiagnosticOutcome::Computed(d) = outcome else {
            panic!("eight taps are enough for the diagnostic");
        };
        let p = d.pearson.invariance_correlation.value.abs();
        let c = d.cosine.invariance_correlation.value.abs();
        assert!(c > p, "seed {seed}: cosine {c} vs pearson {p}");
        let first = d.pearson.invariance[0];
        assert!(d
            .pearson
            .invariance
            .iter()
            .all(|v| (v - first).abs() < 1e-12));
    }
}

#[test]
fn diagnostic_skips_shallow_networks() {
    let net = translation_net([1, 6, 6], 2, 1, 8).unwrap();
    let outcome = magnitude_diagnostic(
        &net,
        &noise(2, &[1, 6, 6], 8),
        &TransformSweep::quarter_turns(),
        &MeasureConfig::default(),
    )
    .unwrap();
    assert!(matches!(outcome, DiagnosticOutcome::Skipped { taps: 2 }));
}
