//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use eqprobe::data::{
    self, build_mnist6, build_mnist6_rot_eq, build_mnist6_rot_inv, idx, LabeledDataset,
};
use eqprobe::handcrafted::{
    build_equivariant_toy, build_invariant_toy, equivariant_partner, ToyConfig,
};
use eqprobe::measure::{
    equivariance_of_channel, invariance_of_channel, magnitude_diagnostic, DiagnosticOutcome,
};
use eqprobe::network::{decode_blob, encode_blob, BundleError};
use eqprobe::parallel::Execution;
use eqprobe::similarity::{cosine, pearson};
use eqprobe::stats::{spearman, StatsError};
use eqprobe::tensor::{conv2d, dense, maxpool, Padding};
use eqprobe::transforms::{apply, scale_to_layer, Transform};
use eqprobe::verify::{translation_net, EQUIVARIANT_TOY_INVARIANCE_CEILING};
use eqprobe::{
    load_bundle, measure_network, save_bundle, LayerKind, MeasureConfig, SimilarityKind,
    TransformSweep,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn noise(n: usize, shape: &[usize], seed: u64) -> Vec<eqprobe::Tensor> {
    data::synthetic_batch(n, shape, seed, data::SyntheticKind::UniformNoise)
}

const TOY_BUDGET: Duration = Duration::from_secs(10);

fn toy_invariance() -> Outcome {
    let start = Instant::now();
    let net = build_invariant_toy(&ToyConfig::default()).map_err(|e| e.to_string())?;
    let report = measure_network(
        &net,
        &noise(100, &[1, 28, 28], 1),
        &TransformSweep::quarter_turns(),
        &MeasureConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure(report.layers.len() == 3, || {
        format!("{} taps", report.layers.len())
    })?;
    let worst = report
        .layers
        .iter()
        .flat_map(|l| &l.per_magnitude)
        .map(|m| (m.mean_invariance - 1.0).abs())
        .fold(0.0, f64::max);
    ensure(worst <= 1e-6, || format!("max |inv - 1| = {worst:e}"))?;
    ensure(elapsed < TOY_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "3 taps, max |inv - 1| = {worst:.1e}, {elapsed:.2?}"
    ))
}

fn toy_equivariance() -> Outcome {
    let start = Instant::now();
    let net = build_equivariant_toy(&ToyConfig::default()).map_err(|e| e.to_string())?;
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
    .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let mut worst_eq: f64 = 0.0;
    let mut highest_inv = f64::NEG_INFINITY;
    for layer in &report.layers {
        for m in &layer.per_magnitude {
            worst_eq = worst_eq.max((m.mean_equivariance - 1.0).abs());
        }
        if layer.layer_kind == LayerKind::Conv {
            highest_inv = highest_inv.max(layer.mean_invariance);
            ensure(layer.mean_invariance < layer.mean_equivariance, || {
                format!(
                    "layer {} invariance not below equivariance",
                    layer.layer_index
                )
            })?;
        }
        for d in layer.channel_detail.as_deref().unwrap_or_default() {
            ensure(
                d.argmax_channel == equivariant_partner(d.channel, d.magnitude),
                || {
                    format!(
                        "layer {} q={} channel {} matched {}",
                        layer.layer_index, d.magnitude, d.channel, d.argmax_channel
                    )
                },
            )?;
        }
        // quarter turn by 1 generates a 4-cycle on every group of channels
        let map: Vec<usize> = layer
            .channel_detail
            .as_deref()
            .unwrap_or_default()
            .iter()
            .filter(|d| d.magnitude == 1)
            .map(|d| d.argmax_channel)
            .collect();
        for c in 0..map.len() {
            let orbit = std::iter::successors(Some(c), |&x| Some(map[x]))
                .skip(1)
                .position(|x| x == c);
            ensure(orbit == Some(3), || format!("channel {c} orbit {orbit:?}"))?;
        }
    }
    ensure(worst_eq <= 1e-6, || format!("max |eq - 1| = {worst_eq:e}"))?;
    ensure(highest_inv < EQUIVARIANT_TOY_INVARIANCE_CEILING, || {
        format!(
            "conv invariance {highest_inv} reaches ceiling {EQUIVARIANT_TOY_INVARIANCE_CEILING}"
        )
    })?;
    ensure(elapsed < TOY_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "max |eq - 1| = {worst_eq:.1e}, max conv invariance {highest_inv:.4} < {EQUIVARIANT_TOY_INVARIANCE_CEILING}, 4-cycles, {elapsed:.2?}"
    ))
}

fn dominance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut cases, mut violations) = (0usize, 0usize);
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
        let clean = net.forward_with_taps(&x).map_err(|e| e.to_string())?;
        let moved = net
            .forward_with_taps(&apply(&t, &x).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
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
                if eq.value < inv.value - 1e-9 {
                    violations += 1;
                }
                cases += 1;
            }
        }
    }
    ensure(violations == 0, || {
        format!("{violations} of {cases} cases violate eq >= inv")
    })?;
    Ok(format!("{cases} cases, 0 violations"))
}

fn designed_translation() -> Outcome {
    let net = translation_net([3, 32, 32], 8, 4, 4).map_err(|e| e.to_string())?;
    let sweep = TransformSweep::diagonal_shifts(8).unwrap();
    let report = measure_network(
        &net,
        &noise(20, &[3, 32, 32], 4),
        &sweep,
        &MeasureConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    let worst_eq = report
        .layers
        .iter()
        .flat_map(|l| &l.per_magnitude)
        .map(|m| (m.mean_equivariance - 1.0).abs())
        .fold(0.0, f64::max);
    let gap = report
        .layers
        .iter()
        .find(|l| l.layer_kind == LayerKind::GlobalAvgPool)
        .ok_or("no pooling tap")?;
    let worst_gap = gap
        .per_magnitude
        .iter()
        .map(|m| (m.mean_invariance - 1.0).abs())
        .fold(0.0, f64::max);
    ensure(worst_eq <= 1e-9, || format!("max |eq - 1| = {worst_eq:e}"))?;
    ensure(worst_gap <= 1e-9, || {
        format!("pool max |inv - 1| = {worst_gap:e}")
    })?;
    Ok(format!(
        "{} taps x 8 shifts, max |eq - 1| = {worst_eq:.1e}, pool max |inv - 1| = {worst_gap:.1e}",
        report.layers.len()
    ))
}

fn similarity_discrimination() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut pearson_worst, mut cosine_below): (f64, usize) = (0.0, 0);
    for _ in 0..1000 {
        let n = rng.gen_range(4..200);
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let b: Vec<f64> = a.iter().map(|v| v + 0.5).collect();
        pearson_worst = pearson_worst.max((pearson(&a, &b).unwrap().value - 1.0).abs());
        if cosine(&a, &b).unwrap().value < 1.0 - 1e-6 {
            cosine_below += 1;
        }
    }
    ensure(pearson_worst <= 1e-12, || {
        format!("pearson max |p - 1| = {pearson_worst:e}")
    })?;
    ensure(cosine_below >= 990, || {
        format!("cosine below 1 - 1e-6 in only {cosine_below}/1000")
    })?;
    Ok(format!(
        "pearson max |p - 1| = {pearson_worst:.1e}, cosine < 1 - 1e-6 in {cosine_below}/1000"
    ))
}

fn magnitude_bias() -> Outcome {
    let net = common::bias_ramp_net(6, 7, 0.3);
    let outcome = magnitude_diagnostic(
        &net,
        &noise(20, &[1, 12, 12], 6),
        &TransformSweep::quarter_turns(),
        &MeasureConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    let DiagnosticOutcome::Computed(d) = outcome else {
        return Err("diagnostic skipped".into());
    };
    let p = d.pearson.invariance_correlation.value.abs();
    let c = d.cosine.invariance_correlation.value.abs();
    ensure(c > p, || {
        format!("|corr cosine| {c:.3} <= |corr pearson| {p:.3}")
    })?;
    let flat = if d.pearson.invariance_correlation.degenerate {
        " (pearson scores constant across taps)"
    } else {
        ""
    };
    Ok(format!(
        "|corr(magnitude, cosine)| = {c:.3} > |corr(magnitude, pearson)| = {p:.3}{flat}"
    ))
}

fn kernel_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let diff = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    };
    let mut worst: f64 = 0.0;
    for _ in 0..120 {
        let (c_in, c_out, k) = (
            rng.gen_range(1..=4),
            rng.gen_range(1..=4),
            [1, 3, 5][rng.gen_range(0..3)],
        );
        let (h, w) = (rng.gen_range(k..k + 8), rng.gen_range(k..k + 8));
        let stride = rng.gen_range(1..=3);
        let amount = rng.gen_range(0..=k / 2);
        let pad = if rng.gen_bool(0.5) {
            Padding::zero(amount)
        } else {
            Padding::circular(amount)
        };
        let x = common::random_tensor(&mut rng, vec![c_in, h, w]);
        let wt = common::random_tensor(&mut rng, vec![c_out, c_in, k, k]);
        let b = common::random_vec(&mut rng, c_out);
        let got = conv2d(&x, &wt, &b, stride, pad).map_err(|e| e.to_string())?;
        let want = common::naive_conv(&x, &wt, &b, stride, pad);
        ensure(got.shape() == want.shape(), || "conv shape".into())?;
        worst = worst.max(diff(got.data(), want.data()));

        let (pk, ps) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let shape = vec![
            rng.gen_range(1..=3),
            rng.gen_range(pk..pk + 7),
            rng.gen_range(pk..pk + 7),
        ];
        let x = common::random_tensor(&mut rng, shape);
        let got = maxpool(&x, pk, ps).map_err(|e| e.to_string())?;
        worst = worst.max(diff(got.data(), common::naive_maxpool(&x, pk, ps).data()));

        let (c, d) = (rng.gen_range(1..=20), rng.gen_range(1..=10));
        let x = common::random_tensor(&mut rng, vec![c]);
        let wt = common::random_tensor(&mut rng, vec![d, c]);
        let b = common::random_vec(&mut rng, d);
        let got = dense(&x, &wt, &b).map_err(|e| e.to_string())?;
        worst = worst.max(diff(got.data(), &common::naive_dense(x.data(), &wt, &b)));
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!(
        "120 random shapes each for conv/pool/dense, max deviation {worst:.1e}"
    ))
}

fn spearman_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut checked, mut worst): (usize, f64) = (0, 0.0);
    while checked < 1000 {
        let n = rng.gen_range(2..30);
        let levels = rng.gen_range(2..8);
        let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64).collect();
        let ys: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64).collect();
        ensure(
            eqprobe::stats::average_ranks(&xs) == common::counting_ranks(&xs),
            || format!("ranks differ for {xs:?}"),
        )?;
        match spearman(&xs, &ys) {
            Ok(rho) => {
                worst = worst.max((rho - common::brute_spearman(&xs, &ys)).abs());
                checked += 1;
            }
            Err(StatsError::Undefined) => {}
            Err(e) => return Err(e.to_string()),
        }
    }
    ensure(worst <= 1e-12, || format!("max |rho - oracle| = {worst:e}"))?;
    Ok(format!(
        "{checked} tied vectors, identical ranks, max |rho - oracle| = {worst:.1e}"
    ))
}

fn datasets() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 500;
    let images = idx::IdxImages {
        count: n,
        rows: 8,
        cols: 8,
        pixels: (0..n * 64).map(|_| rng.gen()).collect(),
    };
    let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    let d =
        LabeledDataset::from_idx_bytes(&idx::encode_images(&images), &idx::encode_labels(&labels))
            .map_err(|e| e.to_string())?;
    let six = build_mnist6(&d).map_err(|e| e.to_string())?;
    ensure(six.class_count() == 6, || "mnist6 class count".into())?;
    let mut kept = six.labels().to_vec();
    kept.sort_unstable();
    kept.dedup();
    ensure(kept == [0, 1, 2, 3, 4, 5], || {
        format!("dense labels {kept:?}")
    })?;
    let originals: Vec<usize> = d
        .labels()
        .iter()
        .copied()
        .filter(|l| ![0, 1, 6, 8].contains(l))
        .collect();
    ensure(originals.len() == six.len(), || {
        "excluded digits survived".into()
    })?;

    let eq = build_mnist6_rot_eq(&six, 1).map_err(|e| e.to_string())?;
    ensure(eq.class_count() == 24, || "rot-eq class count".into())?;
    let draws = data::rotation_draws(six.len(), 1);
    for (i, &l) in eq.labels().iter().enumerate() {
        ensure(
            data::decode_rot_eq_label(l) == (six.labels()[i], draws[i]),
            || format!("label {l} at {i} does not decode"),
        )?;
    }
    let bytes = |d: &LabeledDataset| d.to_idx_bytes().unwrap();
    ensure(bytes(&build_mnist6(&d).unwrap()) == bytes(&six), || {
        "mnist6 not deterministic".into()
    })?;
    ensure(
        bytes(&build_mnist6_rot_eq(&six, 1).unwrap()) == bytes(&eq),
        || "rot-eq not deterministic".into(),
    )?;
    ensure(
        bytes(&build_mnist6_rot_inv(&six, 1).unwrap())
            == bytes(&build_mnist6_rot_inv(&six, 1).unwrap()),
        || "rot-inv not deterministic".into(),
    )?;
    Ok(format!(
        "{} -> {} images, 6 dense classes, 24 decodable rot-eq classes, byte-deterministic",
        d.len(),
        six.len()
    ))
}

fn round_trips() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for i in 0..20 {
        let net = common::random_net(&mut rng);
        let (m, b) = (
            dir.path().join(format!("{i}.json")),
            dir.path().join(format!("{i}.bin")),
        );
        save_bundle(&net, &m, &b).map_err(|e| e.to_string())?;
        let loaded = load_bundle(&m, &b).map_err(|e| e.to_string())?;
        ensure(loaded == net.quantized(), || {
            format!("bundle {i} not float32-exact")
        })?;
    }

    let images = idx::IdxImages {
        count: 30,
        rows: 5,
        cols: 6,
        pixels: (0..900).map(|_| rng.gen()).collect(),
    };
    let (ib, lb) = (idx::encode_images(&images), idx::encode_labels(&[3; 30]));
    let d = LabeledDataset::from_idx_bytes(&ib, &lb).map_err(|e| e.to_string())?;
    ensure(
        d.to_idx_bytes().unwrap() == (ib.clone(), lb.clone()),
        || "IDX not byte-exact".into(),
    )?;

    let net = build_equivariant_toy(&ToyConfig::default()).unwrap();
    let blob = encode_blob(net.params());
    let mut flipped = blob.clone();
    flipped[50] ^= 1;
    ensure(
        matches!(
            decode_blob(&flipped),
            Err(BundleError::ChecksumMismatch { .. })
        ),
        || "flipped byte not caught".into(),
    )?;
    let mut body = blob[..blob.len() - 4].to_vec();
    body[0] = b'Z';
    let crc = crc32fast::hash(&body);
    body.extend_from_slice(&crc.to_le_bytes());
    ensure(
        matches!(decode_blob(&body), Err(BundleError::BadMagic)),
        || "bad magic not caught".into(),
    )?;
    ensure(
        matches!(
            LabeledDataset::from_idx_bytes(&lb, &ib),
            Err(data::DataError::Idx(idx::IdxError::BadMagic { .. }))
        ),
        || "IDX bad magic not caught".into(),
    )?;
    ensure(
        matches!(
            LabeledDataset::from_idx_bytes(&ib[..ib.len() - 3], &lb),
            Err(data::DataError::Idx(idx::IdxError::Truncated { .. }))
        ),
        || "IDX truncation not caught".into(),
    )?;
    Ok("20 bundles float32-exact, IDX byte-exact, corruptions classified".into())
}

fn determinism() -> Outcome {
    let net = translation_net([2, 16, 16], 6, 3, 11).map_err(|e| e.to_string())?;
    let xs = data::synthetic_batch(40, &[2, 16, 16], 11, data::SyntheticKind::GaussianBlobs);
    let sweep = TransformSweep::diagonal_shifts(4).unwrap();
    let csv = |execution, workers| {
        let config = MeasureConfig {
            execution,
            workers,
            ..MeasureConfig::default()
        };
        measure_network(&net, &xs, &sweep, &config).map(|r| r.to_csv())
    };
    let first = csv(Execution::Parallel, None).map_err(|e| e.to_string())?;
    let second = csv(Execution::Parallel, None).map_err(|e| e.to_string())?;
    let threads = csv(Execution::Parallel, Some(3)).map_err(|e| e.to_string())?;
    let sequential = csv(Execution::Sequential, None).map_err(|e| e.to_string())?;
    ensure(first == second, || "two identical runs differ".into())?;
    ensure(first == threads && first == sequential, || {
        "worker count changes the CSV".into()
    })?;
    Ok(format!(
        "{} CSV bytes identical across reruns, 3 workers and sequential",
        first.len()
    ))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("toy invariance oracle", toy_invariance),
        ("toy equivariance oracle", toy_equivariance),
        ("equivariance dominance", dominance),
        ("designed translation equivariance", designed_translation),
        ("similarity discrimination", similarity_discrimination),
        ("magnitude-bias direction", magnitude_bias),
        ("numerical-kernel oracles", kernel_oracles),
        ("spearman correctness", spearman_oracle),
        ("dataset constructions", datasets),
        ("format round-trips", round_trips),
        ("end-to-end determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail}", i + 1);
            }
        }
    }
    println!(
        "{} of {} acceptance criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
