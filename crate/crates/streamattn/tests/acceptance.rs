//! Acceptance gate: one test per promised behavior, each pinned to its
//! stated tolerance and, where one applies, its runtime budget. Every test
//! prints a single PASS line on success; a failed assertion fails the test
//! and cargo prints the FAIL line.

use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use streamattn::analysis::{
    ridge_probe, verify_contamination, verify_gradients, verify_horizon, verify_initial_decay,
    verify_linear_growth, verify_objective_recursion, verify_state_bound, verify_ttt_equivalence,
    band_partition, gradient_fault_detected,
};
use streamattn::gla::{process_chunk, GLADims, GLAParams, RecurrentState, TokenSequence};
use streamattn::linalg::{dot, norm2, Mat};
use streamattn::local::{
    dilution_bound, rope_rotate, verify_dilution, DilutionConfig, RopeIndex, DEFAULT_ROPE_BASE,
};
use streamattn::stream::{
    compare_kernels, run_scenario, ScenarioConfig, ShapeChoice, TimingMode,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Runs the gate one test at a time so the wall-clock measurements and the
/// per-test runtime budgets are not distorted by sibling tests saturating
/// the cores.
fn serial() -> MutexGuard<'static, ()> {
    static GATE: OnceLock<Mutex<()>> = OnceLock::new();
    GATE.get_or_init(|| Mutex::new(()))
        .lock()
        .unwrap_or_else(|poisoned| poisoned.into_inner())
}

#[test]
fn recursion_matches_direct_discounted_sum() {
    let _guard = serial();
    let start = Instant::now();
    let report = verify_objective_recursion(1000, 0xACC0_0001).unwrap();
    let elapsed = start.elapsed();
    assert_eq!(report.samples, 1000);
    assert!(
        report.max_violation <= 1e-10,
        "worst absolute gap {} exceeds 1e-10",
        report.max_violation
    );
    assert!(report.pass);
    assert!(elapsed.as_secs_f64() < 10.0, "took {elapsed:?}");
    println!(
        "PASS recursion_matches_direct_discounted_sum: 1000 instances, worst {:.3e} <= 1e-10, {:?}",
        report.max_violation, elapsed
    );
}

#[test]
fn lossless_contamination_is_bit_stable_to_step_1000() {
    let _guard = serial();
    let start = Instant::now();
    let report = verify_contamination(1000, 0xACC0_0002).unwrap();
    let elapsed = start.elapsed();
    assert!(report.pass);
    assert_eq!(
        report.max_violation, 0.0,
        "imprint drifted by {}",
        report.max_violation
    );
    assert!(elapsed.as_secs_f64() < 5.0, "took {elapsed:?}");
    println!(
        "PASS lossless_contamination_is_bit_stable_to_step_1000: bit-identical at every step, {elapsed:?}"
    );
}

#[test]
fn initial_state_decay_follows_the_envelope() {
    let _guard = serial();
    for (gamma_bar, expected_crossing) in [(0.5, 20usize), (0.9, 132), (0.99, 1375)] {
        let (report, margins) = verify_initial_decay(gamma_bar, 5000, 0xACC0_0003).unwrap();
        assert!(report.pass, "decay report failed at gamma_bar {gamma_bar}");
        assert!(
            report.max_rel_envelope_error <= 1e-12,
            "constant-retention run deviates {} from the closed form",
            report.max_rel_envelope_error
        );
        assert_eq!(report.measured_crossing, expected_crossing);
        assert_eq!(report.predicted_crossing, expected_crossing);
        assert_eq!(margins.len(), 5000);
        for (t, m) in margins.iter().enumerate() {
            assert!(*m >= -1e-12, "envelope violated at step {} by {}", t + 1, -m);
        }
    }
    println!(
        "PASS initial_state_decay_follows_the_envelope: 5000 steps at retention 0.5/0.9/0.99, crossings 20/132/1375"
    );
}

#[test]
fn state_norm_stays_bounded_over_100k_steps() {
    let _guard = serial();
    let start = Instant::now();
    let bounded = verify_state_bound(0.9, None, 1.0, 1.0, 100_000, 0xACC0_0004).unwrap();
    assert!(bounded.pass, "state norm exceeded its geometric bound");
    // The geometric bound itself never exceeds 1 / (1 - 0.9) = 10.
    assert!(bounded.max_violation <= 1e-9);

    let lossless = verify_linear_growth(1.0, 1.0, 100_000, 0xACC0_0005).unwrap();
    assert!(lossless.pass, "lossless growth exceeded slope 1");
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}");
    println!(
        "PASS state_norm_stays_bounded_over_100k_steps: gated norm under 10, lossless slope <= 1, {elapsed:?}"
    );
}

#[test]
fn relevant_attention_mass_dilutes_as_bounded() {
    let _guard = serial();
    let cfg = DilutionConfig::new(4, 1.0).unwrap();
    let report = verify_dilution(&cfg, 5000, 100, 0xACC0_0006).unwrap();
    assert!(report.pass);
    assert!(
        report.max_violation <= 1e-12,
        "mass exceeded the bound by {}",
        report.max_violation
    );

    let at_100 = dilution_bound(100.0, &cfg).unwrap();
    assert!(
        (at_100 - 0.2354).abs() < 1e-4,
        "bound at t=100 is {at_100}, expected about 0.2354"
    );

    let crossing = cfg.crossing_point();
    assert!((crossing - 4.0 * (1.0 + 2.0f64.exp())).abs() < 1e-9);
    for row in &report.rows {
        if (row.t as f64) > crossing {
            assert!(
                row.measured_mass < 0.5,
                "mass {} at t {} past the crossing {crossing}",
                row.measured_mass,
                row.t
            );
        }
    }
    println!(
        "PASS relevant_attention_mass_dilutes_as_bounded: best case never above bound on (4, 5000], minority past t = {crossing:.2}"
    );
}

#[test]
fn channel_influence_at_three_horizons_is_e_minus_3() {
    let _guard = serial();
    let report = verify_horizon(&[0.3, 0.5, 0.9, 0.99]).unwrap();
    assert!(report.pass);
    assert!(
        report.max_violation < 1e-3,
        "kernel at three horizons misses e^-3 by {}",
        report.max_violation
    );
    println!(
        "PASS channel_influence_at_three_horizons_is_e_minus_3: worst gap {:.3e} < 1e-3",
        report.max_violation
    );
}

#[test]
fn fast_weight_step_equals_delta_rule_update() {
    let _guard = serial();
    let report = verify_ttt_equivalence(1000, 0xACC0_0007).unwrap();
    assert_eq!(report.samples, 1000);
    assert!(report.pass);
    assert!(
        report.max_violation <= 1e-12,
        "states diverged by relative {}",
        report.max_violation
    );
    println!(
        "PASS fast_weight_step_equals_delta_rule_update: 1000 trials within 1e-12 relative, lossless case included"
    );
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let _guard = serial();
    let report = verify_gradients(100, 0xACC0_0008).unwrap();
    assert_eq!(report.samples, 100);
    assert!(report.pass);
    assert!(
        report.max_violation <= 1e-5,
        "worst relative gradient error {}",
        report.max_violation
    );
    assert!(
        gradient_fault_detected(0xACC0_0009).unwrap(),
        "a corrupted gradient slipped past the checker"
    );
    println!(
        "PASS analytic_gradients_match_finite_differences: 100 instances within 1e-5, injected fault detected"
    );
}

#[test]
fn outputs_are_invariant_to_chunk_boundaries() {
    let _guard = serial();
    let dims = GLADims::new(8, 4, 4, 2).unwrap();
    let params = GLAParams::seeded(dims, 0xACC0_000A);
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC0_000B);
    let rows: Vec<Vec<f64>> = (0..64)
        .map(|_| (0..8).map(|_| rng.gen_range(-1.0..=1.0)).collect())
        .collect();
    let tokens = TokenSequence::from_rows(&rows).unwrap();

    let run = |splits: &[usize]| -> Vec<Vec<f64>> {
        let mut outputs = Vec::new();
        let mut state = RecurrentState::zeros(dims);
        let mut start = 0;
        for len in splits {
            let slice = tokens.slice(start, start + len).unwrap();
            let (mut out, next) = process_chunk(&slice, state, &params).unwrap();
            outputs.append(&mut out);
            state = next;
            start += len;
        }
        assert_eq!(start, 64);
        outputs
    };

    let whole = run(&[64]);
    let uneven = run(&[21, 21, 21, 1]);
    let tens = run(&[10, 10, 10, 10, 10, 10, 4]);
    for t in 0..64 {
        for j in 0..whole[t].len() {
            assert!(
                (whole[t][j] - uneven[t][j]).abs() <= 1e-12,
                "chunking {{21,21,21,1}} diverged at step {t}"
            );
            assert!(
                (whole[t][j] - tens[t][j]).abs() <= 1e-12,
                "chunking {{10x6,4}} diverged at step {t}"
            );
        }
    }
    println!(
        "PASS outputs_are_invariant_to_chunk_boundaries: 64-step outputs identical across three chunkings"
    );
}

#[test]
fn rotary_indices_preserve_norms_and_relative_scores() {
    let _guard = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC0_000C);
    for _ in 0..200 {
        let d = 6 * rng.gen_range(1..=4);
        let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let k: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let a = RopeIndex::new(
            rng.gen_range(0..500),
            rng.gen_range(0..40),
            rng.gen_range(0..40),
        );
        let b = RopeIndex::new(
            rng.gen_range(0..500),
            rng.gen_range(0..40),
            rng.gen_range(0..40),
        );

        let qa = rope_rotate(&q, &a, DEFAULT_ROPE_BASE).unwrap();
        assert!(
            (norm2(&qa) - norm2(&q)).abs() <= 1e-12,
            "rotation changed a norm"
        );

        let (dt, dy, dx) = (
            rng.gen_range(0..100) as i64,
            rng.gen_range(0..20) as i64,
            rng.gen_range(0..20) as i64,
        );
        let before = dot(&qa, &rope_rotate(&k, &b, DEFAULT_ROPE_BASE).unwrap());
        let after = dot(
            &rope_rotate(&q, &a.shifted(dt, dy, dx).unwrap(), DEFAULT_ROPE_BASE).unwrap(),
            &rope_rotate(&k, &b.shifted(dt, dy, dx).unwrap(), DEFAULT_ROPE_BASE).unwrap(),
        );
        assert!(
            (before - after).abs() <= 1e-10,
            "score moved under a joint shift: {before} vs {after}"
        );

        let special = rope_rotate(&q, &RopeIndex::special(), DEFAULT_ROPE_BASE).unwrap();
        assert_eq!(special, q, "special index must not rotate");
    }
    println!(
        "PASS rotary_indices_preserve_norms_and_relative_scores: isometry 1e-12, shift invariance 1e-10, special no-op"
    );
}

#[test]
fn long_gated_run_uses_constant_memory_and_linear_time() {
    let _guard = serial();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ScenarioConfig::default();
    cfg.length = 10_000;
    cfg.seed = 0xACC0_000D;
    cfg.out_dir = dir.path().to_path_buf();
    // Wide enough that per-step compute dominates scheduler and timer noise
    // in the wall-clock fit.
    cfg.dims = GLADims::new(64, 32, 32, 4).unwrap();
    let outcome = run_scenario(&cfg).unwrap();

    assert_eq!(outcome.records.len(), 10_000);
    let bytes = outcome.records[0].state_bytes;
    for r in &outcome.records {
        assert_eq!(r.state_bytes, bytes, "state bytes moved at step {}", r.t);
    }
    let fit = &outcome.summary["time_fit"];
    let slope = fit["slope_ns_per_step"].as_f64().expect("timing was on");
    let r_squared = fit["r_squared"].as_f64().expect("timing was on");
    assert!(slope > 0.0);
    assert!(
        r_squared >= 0.98,
        "cumulative time fit r-squared {r_squared} below 0.98"
    );

    let mut kcfg = ScenarioConfig::default();
    kcfg.length = 2000;
    kcfg.seed = 0xACC0_000E;
    kcfg.timing = TimingMode::Off;
    let cmp = compare_kernels(
        &kcfg,
        &[
            ShapeChoice::Exponential,
            ShapeChoice::HeavyTail,
            ShapeChoice::BlockRefresh,
        ],
    )
    .unwrap();
    let expo = &cmp.runs[0];
    let heavy = &cmp.runs[1];
    let refresh = &cmp.runs[2];
    assert!(
        expo.max_drift <= expo.drift_envelope.unwrap(),
        "gated drift left its envelope"
    );
    assert!(heavy.norm_slope > 1e-3, "lossless state norm is not growing");
    assert!(
        refresh.max_jump_ratio > 10.0,
        "refresh boundary left no discontinuity: ratio {}",
        refresh.max_jump_ratio
    );
    println!(
        "PASS long_gated_run_uses_constant_memory_and_linear_time: {bytes} bytes constant over 10000 steps, time fit r2 {r_squared:.4}, kernel contrasts hold"
    );
}

#[test]
fn ridge_probe_recovers_planted_targets_and_attributes_bands() {
    let _guard = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC0_000F);
    let n = 400;
    let width = 6;
    let features = Mat::from_fn(n, width, |_, _| rng.gen_range(-1.0..=1.0));

    // Channels 4 and 5 decay slowest: their horizons fall in the long band.
    let taus = [1.0, 2.0, 10.0, 20.0, 80.0, 400.0];
    let bands = band_partition(&taus);
    assert_eq!(bands[2], vec![4, 5]);

    let linear: Vec<f64> = (0..n)
        .map(|r| {
            0.8 * features.get(r, 0) - 1.1 * features.get(r, 2) + 0.5 * features.get(r, 5)
        })
        .collect();
    let recovered = ridge_probe(&features, &linear, 1e-8, &bands).unwrap();
    assert!(
        recovered.r_squared >= 0.999,
        "noiseless linear target recovered at r2 {}",
        recovered.r_squared
    );

    let long_only: Vec<f64> = (0..n)
        .map(|r| 1.2 * features.get(r, 4) - 0.7 * features.get(r, 5))
        .collect();
    let attributed = ridge_probe(&features, &long_only, 1e-8, &bands).unwrap();
    assert!(
        attributed.band_share[2] > 0.8,
        "long-band attribution {} below 0.8",
        attributed.band_share[2]
    );
    println!(
        "PASS ridge_probe_recovers_planted_targets_and_attributes_bands: r2 {:.6}, long-band share {:.3}",
        recovered.r_squared, attributed.band_share[2]
    );
}

#[test]
fn identical_configs_and_seeds_reproduce_records_byte_for_byte() {
    let _guard = serial();
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let mut cfg = ScenarioConfig::default();
    cfg.length = 500;
    cfg.seed = 0xACC0_0010;
    // Wall-clock is the one quantity a rerun cannot reproduce; the timing
    // column is disabled by config so the claim is about the computation.
    cfg.timing = TimingMode::Off;
    cfg.out_dir = dir_a.path().to_path_buf();
    run_scenario(&cfg).unwrap();
    cfg.out_dir = dir_b.path().to_path_buf();
    run_scenario(&cfg).unwrap();

    let a = std::fs::read(dir_a.path().join("records.csv")).unwrap();
    let b = std::fs::read(dir_b.path().join("records.csv")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b, "two runs of one config wrote different records");
    println!(
        "PASS identical_configs_and_seeds_reproduce_records_byte_for_byte: {} bytes identical",
        a.len()
    );
}
