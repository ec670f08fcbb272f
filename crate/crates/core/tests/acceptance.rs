//! End-to-end acceptance checks, one test per criterion. Each prints a
//! `criterion N [PASS|FAIL]` line (run with `--nocapture` to see them).
//!
//! Tests share one lock so that wall-clock budgets are measured without
//! contention from the training-heavy criteria.

use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use grtn_core::autodiff::layout::{pixel_shuffle_index, window_partition, window_reverse};
use grtn_core::data::io::{decode_pnm, encode_pnm};
use grtn_core::data::probe::{attention_probe, ProbeConfig};
use grtn_core::data::{synth_sequence, FrameSequence, SynthKind};
use grtn_core::harness::eval::{ablate, evaluate, Variant};
use grtn_core::harness::gradsuite::run_suite;
use grtn_core::harness::{Checkpoint, RunConfig, Trainer};
use grtn_core::net::{sigma_plane, Denoiser, Net};
use grtn_core::rsste::{dot_product_attention, euclidean_attention};
use grtn_core::{Error, Graph, GrtnConfig, GrtnParams, OrthoMode, Tensor};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, pass: bool, detail: &str) {
    println!("criterion {n} [{}] {detail}", if pass { "PASS" } else { "FAIL" });
}

/// Held-out clips: one per synthetic kind, seeds never drawn by training.
fn held_out(frames: usize, side: usize) -> Vec<(String, FrameSequence)> {
    SynthKind::ALL
        .iter()
        .map(|&k| {
            let seq = synth_sequence(k, frames, (side, side), 1, 0x4E1D_0117).unwrap();
            (k.name().to_string(), seq)
        })
        .collect()
}

#[test]
fn criterion_1_gradient_suite() {
    let _lock = serial();
    let start = Instant::now();
    let cases = run_suite().unwrap();
    let secs = start.elapsed().as_secs_f64();
    let worst = cases
        .iter()
        .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
        .unwrap();
    let failed: Vec<&str> = cases.iter().filter(|c| !c.passed()).map(|c| c.name).collect();
    let pass = failed.is_empty() && secs < 120.0;
    report(
        1,
        pass,
        &format!(
            "{} ops, worst {} at {:.2e} (< 1e-4), failed {:?}, {:.1}s (< 120s)",
            cases.len(),
            worst.name,
            worst.report.max_rel_error,
            failed,
            secs
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_2_euclidean_attention_tracks_clean_attention() {
    let _lock = serial();
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut pass = true;
    for window in [8, 16] {
        let r = attention_probe(&ProbeConfig {
            sigma: 50.0,
            window,
            trials: 20,
            ..ProbeConfig::default()
        })
        .unwrap();
        pass &= r.euclidean_mean > r.dot_mean && r.euclidean_win_rate >= 0.7;
        lines.push(format!(
            "M={window}: euclidean {:.4} vs dot {:.4}, wins {:.0}%",
            r.euclidean_mean,
            r.dot_mean,
            100.0 * r.euclidean_win_rate
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 60.0;
    report(2, pass, &format!("{}; {:.1}s (< 60s)", lines.join("; "), secs));
    assert!(pass);
}

#[test]
fn criterion_3_toy_model_denoises() {
    let _lock = serial();
    let start = Instant::now();
    let mut run = RunConfig::preset("toy").unwrap();
    run.train.iterations = 600;
    run.train.log_every = 100;
    let mut trainer = Trainer::<f32>::new(run).unwrap();
    let log = trainer.run(|_| {}).unwrap();
    let eval = evaluate(&trainer.params, &held_out(8, 64), &[25.0], 0).unwrap();
    let gain = eval.mean_denoised - eval.mean_noisy;
    let secs = start.elapsed().as_secs_f64();
    let first = log.rows.first().unwrap().loss;
    let last = log.rows.last().unwrap().loss;
    let pass = gain >= 3.0 && secs < 1800.0 && last < first;
    report(
        3,
        pass,
        &format!(
            "600 toy iterations: sigma 25 held-out {:.2} dB -> {:.2} dB (gain {:+.2} dB, need >= 3), \
             loss {:.4} -> {:.4}, {:.0}s (< 1800s)",
            eval.mean_noisy, eval.mean_denoised, gain, first, last, secs
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_4_outputs_depend_only_on_past_frames() {
    let _lock = serial();
    let params = GrtnParams::<f32>::init(&GrtnConfig::default(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let seq = synth_sequence(SynthKind::MovingShapes, 6, (32, 32), 1, 3).unwrap();
    let frames: Vec<Tensor<f32>> = seq.frames.iter().map(|f| f.cast::<f32>().reshape(&[1, 1, 32, 32]).unwrap()).collect();
    let mut altered = frames.clone();
    for f in &mut altered[3..] {
        *f = Tensor::from_fn(&[1, 1, 32, 32], |_| rng.gen_range(0.0..1.0));
    }
    let outputs = |input: &[Tensor<f32>]| {
        let mut d = Denoiser::new(&params);
        input.iter().map(|f| d.push(f, &[25.0]).unwrap()).collect::<Vec<_>>()
    };
    let (a, b) = (outputs(&frames), outputs(&altered));
    let prefix_same = a[..3] == b[..3];
    let later_differ = a[3..].iter().zip(&b[3..]).all(|(x, y)| x != y);
    let pass = prefix_same && later_differ;
    report(
        4,
        pass,
        &format!("frames 1-3 bit-identical: {prefix_same}; frames 4-6 changed: {later_differ}"),
    );
    assert!(pass);
}

fn ortho(rows: usize, cols: usize, values: &[f64], mode: OrthoMode) -> f64 {
    let mut g = Graph::new();
    let m = g.constant(Tensor::new(&[rows, cols], values.to_vec()).unwrap());
    let o = g.orthogonality(&[m], mode).unwrap();
    g.value(o).data()[0]
}

#[test]
fn criterion_5_orthogonality_oracles() {
    let _lock = serial();
    let identity = ortho(2, 2, &[1.0, 0.0, 0.0, 1.0], OrthoMode::Signed);
    let zero_centered = ortho(2, 3, &[3.0, 3.0, 3.0, -1.0, -1.0, -1.0], OrthoMode::Signed);
    let opposite = ortho(2, 2, &[1.0, -1.0, 1.0, -1.0], OrthoMode::Signed);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut agree = 0;
    for i in 0..50 {
        let m: Vec<f64> = if i % 2 == 0 {
            let dirs = [[1.0, -1.0, 0.0], [1.0, 1.0, -2.0], [0.0; 3]];
            (0..9)
                .map(|k| dirs[(k / 3 + i) % 3][k % 3] * 1.5 + (k / 3) as f64)
                .collect()
        } else {
            (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let centered: Vec<Vec<f64>> = m
            .chunks(3)
            .map(|r| {
                let mean = r.iter().sum::<f64>() / 3.0;
                r.iter().map(|x| x - mean).collect()
            })
            .collect();
        let orthogonal = (0..3).all(|a| {
            (0..3).all(|b| a == b || centered[a].iter().zip(&centered[b]).map(|(x, y)| x * y).sum::<f64>().abs() < 1e-9)
        });
        let zero = ortho(3, 3, &m, OrthoMode::Absolute).abs() < 1e-9;
        agree += usize::from(zero == orthogonal);
    }

    let identity_ok = (identity + 0.5).abs() < 1e-12;
    let centered_ok = zero_centered == 0.0;
    let brute_ok = agree == 50;
    // Centered-row dot products are 2 here and -0.5 for the identity, so no
    // single normalization yields both 1.0 and -0.5.
    let opposite_ok = (opposite - 1.0).abs() < 1e-12;
    report(
        5,
        identity_ok && centered_ok && brute_ok && opposite_ok,
        &format!(
            "identity {identity} (want -0.5): {identity_ok}; zero-centered rows {zero_centered} (want 0): {centered_ok}; \
             absolute-mode zero <=> orthogonal on {agree}/50; [[1,-1],[1,-1]] {opposite} (stated 1.0, \
             inconsistent with the identity oracle; 2.0 is the value the shared definition gives)"
        ),
    );
    assert!(identity_ok && centered_ok && brute_ok);
    assert!((opposite - 2.0).abs() < 1e-12);
}

#[test]
fn criterion_6_structural_identities() {
    let _lock = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(66);

    let mut params = GrtnParams::<f64>::init(&GrtnConfig::default(), 1).unwrap();
    params.zero_reconstruction();
    let mut d = Denoiser::new(&params);
    let identity = (0..3).all(|_| {
        let x = Tensor::from_fn(&[1, 1, 19, 22], |_| rng.gen_range(-0.5..1.5));
        d.push(&x, &[30.0]).unwrap() == x
    });

    let mut convex = 0;
    for _ in 0..1000 {
        let (w, a, b) = (rng.gen_range(0.0..=1.0), rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0));
        let mut g = Graph::<f64>::new();
        let vars = [w, a, b].map(|v| g.constant(Tensor::scalar(v)));
        let out = g.blend(vars[0], vars[1], vars[2]).unwrap();
        let y = g.value(out).data()[0];
        convex += usize::from(y >= f64::min(a, b) - 1e-12 && y <= f64::max(a, b) + 1e-12);
    }

    let params = GrtnParams::<f64>::init(&GrtnConfig::tiny(), 2).unwrap();
    let mut g = Graph::new();
    let bound = params.store.bind(&mut g, false);
    let net = Net {
        config: &params.config,
        layout: &params.layout,
        bound: &bound,
    };
    let x = g.constant(Tensor::from_fn(&[2, 1, 16, 16], |_| rng.gen_range(-1.0..2.0)));
    let s = sigma_plane(&mut g, &[10.0, 50.0], 16, 16, 255.0);
    let first = net.step_even(&mut g, None, x, s).unwrap();
    let second = net.step_even(&mut g, Some(first.state()), x, s).unwrap();
    let gates_ok = [second.reset_gate.unwrap(), second.update_gate.unwrap()]
        .iter()
        .all(|&v| g.value(v).data().iter().all(|&p| p > 0.0 && p < 1.0));

    let mut worst_row = 0.0f64;
    for t in [4usize, 16, 64] {
        let q = Tensor::from_fn(&[t, 8], |_| rng.gen_range(-3.0..3.0));
        let k = Tensor::from_fn(&[t, 8], |_| rng.gen_range(-3.0..3.0));
        for (_, p) in [
            euclidean_attention(&q, &k, &q, None, 1e-12).unwrap(),
            dot_product_attention(&q, &k, &q, None).unwrap(),
        ] {
            for row in p.data().chunks(t) {
                worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }

    let x = Tensor::from_fn(&[2, 3, 13, 18], |_| rng.gen_range(-1.0..1.0));
    let windows_ok = [0, 4].iter().all(|&shift| {
        let (w, geom) = window_partition(&x, 8, shift).unwrap();
        window_reverse(&w, &geom).unwrap() == x
    });
    let ps = Tensor::from_fn(&[2, 12, 5, 7], |i| i as f64);
    let (index, _) = pixel_shuffle_index(ps.shape(), 2).unwrap();
    let shuffled: Vec<f64> = index.iter().map(|&i| ps.data()[i]).collect();
    let mut back = vec![f64::NAN; ps.numel()];
    for (&i, &v) in index.iter().zip(&shuffled) {
        back[i] = v;
    }
    let shuffle_ok = back == ps.data();

    let pass = identity && convex == 1000 && gates_ok && worst_row < 1e-6 && windows_ok && shuffle_ok;
    report(
        6,
        pass,
        &format!(
            "zero reconstruction gives y = x: {identity}; blend convex {convex}/1000; gates in (0,1): {gates_ok}; \
             max |row sum - 1| {worst_row:.1e}; window round trip: {windows_ok}; pixel shuffle round trip: {shuffle_ok}"
        ),
    );
    assert!(pass);
}

fn determinism_run() -> RunConfig {
    let mut run = RunConfig::preset("toy").unwrap();
    run.train.iterations = 200;
    run.train.patch_size = 32;
    run.train.log_every = 100;
    run
}

#[test]
fn criterion_7_training_is_bit_reproducible() {
    let _lock = serial();
    let run = determinism_run();
    let straight = |run: &RunConfig| {
        let mut t = Trainer::<f32>::new(run.clone()).unwrap();
        t.run(|_| {}).unwrap();
        t.checkpoint().to_bytes().unwrap()
    };
    let (a, b) = (straight(&run), straight(&run));

    let mut first = Trainer::<f32>::new(run).unwrap();
    first.run_until(100, |_| {}).unwrap();
    let saved = first.checkpoint().to_bytes().unwrap();
    drop(first);
    let mut resumed = Trainer::from_checkpoint(Checkpoint::<f32>::from_bytes(&saved).unwrap()).unwrap();
    resumed.run(|_| {}).unwrap();
    let c = resumed.checkpoint().to_bytes().unwrap();

    let pass = a == b && a == c;
    report(
        7,
        pass,
        &format!(
            "200 toy iterations (32x32 patches): repeat identical {}, resume at 100 identical {} ({} checkpoint bytes)",
            a == b,
            a == c,
            a.len()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_8_ablation_harness() {
    let _lock = serial();
    let mut base = RunConfig::preset("toy").unwrap();
    base.train.iterations = 100;
    base.train.patch_size = 32;
    base.train.log_every = 50;
    let sequences = held_out(4, 32);
    let report_ = ablate::<f32>(&base, &Variant::ALL, &sequences, &[25.0, 50.0], |_, _| {}).unwrap();
    let table = report_.to_csv();

    let mut lambda_zero = base.clone();
    lambda_zero.train.lambda = 0.0;
    let mut t = Trainer::<f32>::new(lambda_zero).unwrap();
    let reference = t.run(|_| {}).unwrap();
    let no_ortho = report_.rows.iter().find(|r| r.variant == Variant::NoOrtho).unwrap();
    let identical = no_ortho.log.losses == reference.losses;

    let rows = table.lines().count() - 1;
    let pass = rows == 4 && identical;
    let summary: Vec<String> = report_
        .rows
        .iter()
        .map(|r| format!("{} {:.2}/{:.2} dB", r.variant.name(), r.psnr[0], r.psnr[1]))
        .collect();
    report(
        8,
        pass,
        &format!(
            "{rows} variant rows (100 iterations each, 32x32 patches); no_ortho losses bit-identical to full with lambda=0: \
             {identical}; sigma 25/50 PSNR (reported, not asserted): {}",
            summary.join(", ")
        ),
    );
    print!("{table}");
    assert!(pass);
}

#[test]
fn criterion_9_frame_io() {
    let _lock = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut exact = 0;
    for i in 0..100 {
        let c = if i % 2 == 0 { 1 } else { 3 };
        let (h, w) = (rng.gen_range(1..40), rng.gen_range(1..40));
        let frame = Tensor::from_fn(&[c, h, w], |_| rng.gen_range(0..=255u8) as f64 / 255.0);
        let bytes = encode_pnm(&frame).unwrap();
        exact += usize::from(decode_pnm(&bytes).unwrap() == frame);
    }
    let malformed: [(&[u8], usize); 4] = [
        (b"P7 1 1 255\n\0", 0),
        (b"P5 4 x 255\n", 5),
        (b"P5 4 4 65535\n", 7),
        (b"P5 2 2 255\n\0\0", 13),
    ];
    let positioned = malformed
        .iter()
        .filter(|(bytes, at)| matches!(decode_pnm(bytes), Err(Error::Parse { offset, .. }) if offset == *at))
        .count();
    let pass = exact == 100 && positioned == malformed.len();
    report(
        9,
        pass,
        &format!("bit-exact round trips {exact}/100; malformed headers rejected at the right byte {positioned}/4"),
    );
    assert!(pass);
}
