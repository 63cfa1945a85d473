//! Property tests for the structural invariants: chunk-boundary
//! independence, clamps, normalization, rotation algebra, kernel algebra,
//! and serialization round trips.

use proptest::prelude::*;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use streamattn::gla::{
    gate, process_chunk, read_snapshot, state_update, GLADims, GLAParams, RecurrentState,
    TokenSequence, GAMMA_CEIL, GAMMA_FLOOR,
};
use streamattn::kernel::{
    build_profile, effective_horizon, eval_channel_kernel, eval_time_kernel, partition_channels,
    KernelShape,
};
use streamattn::linalg::{dot, norm2, Mat};
use streamattn::local::{
    causal_softmax_attention, dilution_bound, rope_rotate, DilutionConfig, RopeIndex,
    DEFAULT_ROPE_BASE,
};
use streamattn::readout::{fuse_relative_pose, quaternion_geodesic, PoseEstimate};
use streamattn::stream::ScenarioConfig;

fn random_rows(rng: &mut ChaCha8Rng, n: usize, width: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..width).map(|_| rng.gen_range(-1.0..=1.0)).collect())
        .collect()
}

proptest! {
    #[test]
    fn chunk_boundaries_never_change_outputs(
        len in 2usize..32,
        cut in 1usize..31,
        seed in any::<u64>(),
    ) {
        prop_assume!(cut < len);
        let dims = GLADims::new(6, 3, 3, 2).unwrap();
        let params = GLAParams::seeded(dims, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        let tokens = TokenSequence::from_rows(&random_rows(&mut rng, len, 6)).unwrap();

        let (whole, end_whole) =
            process_chunk(&tokens, RecurrentState::zeros(dims), &params).unwrap();
        let head = tokens.slice(0, cut).unwrap();
        let tail = tokens.slice(cut, len).unwrap();
        let (mut split, mid) =
            process_chunk(&head, RecurrentState::zeros(dims), &params).unwrap();
        let (tail_out, end_split) = process_chunk(&tail, mid, &params).unwrap();
        split.extend(tail_out);

        prop_assert_eq!(&whole, &split);
        for h in 0..dims.heads {
            prop_assert_eq!(end_whole.head(h).data(), end_split.head(h).data());
        }
    }

    #[test]
    fn gate_outputs_stay_inside_the_clamp(seed in any::<u64>(), scale in 0.1f64..50.0) {
        let dims = GLADims::new(5, 3, 2, 2).unwrap();
        let params = GLAParams::seeded(dims, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..5).map(|_| scale * rng.gen_range(-1.0..=1.0)).collect();
        for g in gate(&x, &params).unwrap() {
            prop_assert!((GAMMA_FLOOR..=GAMMA_CEIL).contains(&g));
        }
    }

    #[test]
    fn one_update_obeys_the_triangle_bound(seed in any::<u64>()) {
        let dims = GLADims::new(4, 3, 3, 2).unwrap();
        let params = GLAParams::seeded(dims, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51ed);
        let blocks: Vec<Mat> = (0..dims.heads)
            .map(|_| Mat::from_fn(dims.d_k, dims.d_v, |_, _| rng.gen_range(-2.0..=2.0)))
            .collect();
        let state = RecurrentState::from_blocks(blocks).unwrap();
        let k: Vec<f64> = (0..dims.key_width()).map(|_| rng.gen_range(-2.0..=2.0)).collect();
        let v: Vec<f64> = (0..dims.value_width()).map(|_| rng.gen_range(-2.0..=2.0)).collect();
        let gamma: Vec<f64> =
            (0..dims.key_width()).map(|_| rng.gen_range(1e-6..=1.0 - 1e-6)).collect();

        let next = state_update(&state, &k, &v, &gamma, &params).unwrap();
        for h in 0..dims.heads {
            let ks = &k[h * dims.d_k..(h + 1) * dims.d_k];
            let vs = &v[h * dims.d_v..(h + 1) * dims.d_v];
            let gmax = gamma[h * dims.d_k..(h + 1) * dims.d_k]
                .iter()
                .fold(0.0f64, |a, &b| a.max(b));
            let allowed =
                gmax * state.head(h).frobenius_norm() + norm2(ks) * norm2(vs) + 1e-9;
            prop_assert!(next.head(h).frobenius_norm() <= allowed);
        }
    }

    #[test]
    fn attention_weights_are_causal_distributions(
        nq in 1usize..5,
        extra in 0usize..6,
        d in 2usize..6,
        seed in any::<u64>(),
    ) {
        let nk = nq + extra;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_rows(&mut rng, nq, d);
        let k = random_rows(&mut rng, nk, d);
        let v = random_rows(&mut rng, nk, d);
        let out = causal_softmax_attention(&q, &k, &v).unwrap();

        prop_assert_eq!(out.outputs.len(), nq);
        prop_assert_eq!(out.weights.len(), nq);
        for (j, row) in out.weights.iter().enumerate() {
            prop_assert_eq!(row.len(), nk - nq + j + 1);
            prop_assert!(row.iter().all(|&w| w >= 0.0));
            let mass: f64 = row.iter().sum();
            prop_assert!((mass - 1.0).abs() <= 1e-12);
            prop_assert_eq!(out.outputs[j].len(), d);
        }
    }

    #[test]
    fn rotations_preserve_norms_and_relative_scores(
        blocks in 1usize..4,
        seed in any::<u64>(),
        at in 0u64..300, ay in 0u64..30, ax in 0u64..30,
        bt in 0u64..300, by in 0u64..30, bx in 0u64..30,
        dt in 0i64..50, dy in 0i64..10, dx in 0i64..10,
    ) {
        let d = 6 * blocks;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let k: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let a = RopeIndex::new(at, ay, ax);
        let b = RopeIndex::new(bt, by, bx);

        let qa = rope_rotate(&q, &a, DEFAULT_ROPE_BASE).unwrap();
        let kb = rope_rotate(&k, &b, DEFAULT_ROPE_BASE).unwrap();
        prop_assert!((norm2(&qa) - norm2(&q)).abs() <= 1e-12);
        prop_assert!((norm2(&kb) - norm2(&k)).abs() <= 1e-12);

        let shifted = dot(
            &rope_rotate(&q, &a.shifted(dt, dy, dx).unwrap(), DEFAULT_ROPE_BASE).unwrap(),
            &rope_rotate(&k, &b.shifted(dt, dy, dx).unwrap(), DEFAULT_ROPE_BASE).unwrap(),
        );
        prop_assert!((dot(&qa, &kb) - shifted).abs() <= 1e-10);
    }

    #[test]
    fn time_kernel_factorizes_through_any_midpoint(
        gammas in prop::collection::vec(0.05f64..=1.0, 1..20),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = rng.gen_range(1..=gammas.len());
        let i = rng.gen_range(1..=t);
        let j = rng.gen_range(i..=t);
        let direct = eval_time_kernel(&gammas, t, i).unwrap();
        let staged = eval_time_kernel(&gammas, t, j).unwrap()
            * eval_time_kernel(&gammas, j, i).unwrap();
        prop_assert!((direct - staged).abs() <= 1e-12 * direct.max(1e-30));
    }

    #[test]
    fn kernel_value_at_the_horizon_is_e_inverse(gamma in 0.01f64..=0.999) {
        let tau = effective_horizon(gamma).unwrap();
        let v = eval_channel_kernel(gamma, tau).unwrap();
        prop_assert!((v - (-1.0f64).exp()).abs() <= 1e-12);
    }

    #[test]
    fn kernel_profiles_are_causal_and_normalized_where_promised(
        horizon in 1usize..12,
        window in 1usize..6,
        sink_off in 0usize..12,
        seed in any::<u64>(),
    ) {
        let boxp = build_profile(&KernelShape::Box { window }, horizon).unwrap();
        for t in 1..=horizon {
            for i in 1..=t {
                let w = boxp.weight(t, i).unwrap();
                prop_assert_eq!(w, if t - i < window { 1.0 } else { 0.0 });
            }
            for i in t + 1..=horizon {
                prop_assert!(boxp.weight(t, i).is_err());
            }
        }

        prop_assume!(sink_off < horizon);
        let spike = build_profile(&KernelShape::spike_sink(sink_off + 1), horizon).unwrap();
        for t in 1..=horizon {
            let mass: f64 = (1..=t).map(|i| spike.weight(t, i).unwrap()).sum();
            prop_assert!((mass - 1.0).abs() <= 1e-12);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = rng.gen_range(0.1..=0.99);
        let expo = build_profile(
            &KernelShape::ExponentialChannelwise { gammas: vec![g], channel: 0 },
            horizon,
        )
        .unwrap();
        for t in 1..=horizon {
            for i in 1..=t {
                let w = expo.weight(t, i).unwrap();
                let direct = g.powi((t - i) as i32);
                prop_assert!((w - direct).abs() <= 1e-12 * direct);
            }
        }
    }

    #[test]
    fn dilution_bound_shrinks_toward_a_minority(
        w in 1usize..8,
        m in 0.1f64..2.0,
        off in 1u32..2000,
        gap in 1u32..2000,
    ) {
        let cfg = DilutionConfig::new(w, m).unwrap();
        let t1 = w as f64 + off as f64;
        let t2 = t1 + gap as f64;
        let b1 = dilution_bound(t1, &cfg).unwrap();
        let b2 = dilution_bound(t2, &cfg).unwrap();
        prop_assert!(b1 > 0.0 && b1 <= 1.0);
        prop_assert!(b2 <= b1 + 1e-15);
        if t2 > cfg.crossing_point() {
            prop_assert!(b2 < 0.5);
        }
    }

    #[test]
    fn channel_partition_is_exhaustive_and_disjoint(
        gammas in prop::collection::vec(1e-6f64..=0.999_999, 1..16),
        threshold in 0.1f64..0.9,
    ) {
        let p = partition_channels(&gammas, threshold).unwrap();
        prop_assert_eq!(p.fast.len() + p.slow.len(), gammas.len());
        prop_assert!(p.fast.iter().all(|&i| gammas[i] < threshold));
        prop_assert!(p.slow.iter().all(|&i| gammas[i] >= threshold));
        let mut merged: Vec<usize> = p.fast.iter().chain(&p.slow).copied().collect();
        merged.sort_unstable();
        prop_assert_eq!(merged, (0..gammas.len()).collect::<Vec<_>>());
    }

    #[test]
    fn snapshots_survive_a_write_read_round_trip(
        d_k in 1usize..5,
        d_v in 1usize..5,
        heads in 1usize..4,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks: Vec<Mat> = (0..heads)
            .map(|_| Mat::from_fn(d_k, d_v, |_, _| rng.gen_range(-3.0..=3.0)))
            .collect();
        let state = RecurrentState::from_blocks(blocks.clone()).unwrap();
        let mut buf = Vec::new();
        state.write_snapshot(&mut buf).unwrap();
        let snap = read_snapshot(&mut buf.as_slice()).unwrap();

        prop_assert_eq!(snap.d_k, d_k);
        prop_assert_eq!(snap.cols, heads * d_v);
        for r in 0..d_k {
            for (h, block) in blocks.iter().enumerate() {
                for c in 0..d_v {
                    prop_assert_eq!(snap.get(r, h * d_v + c), block.get(r, c));
                }
            }
        }
        prop_assert_eq!(snap.row_norms().len(), d_k);
    }

    #[test]
    fn pose_fusion_ignores_quaternion_sign_and_order(n in 2usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut base = [0.0f64; 4];
        loop {
            for x in base.iter_mut() {
                *x = rng.gen_range(-1.0..=1.0);
            }
            if dot(&base, &base).sqrt() > 0.3 {
                break;
            }
        }
        let estimates: Vec<PoseEstimate> = (0..n)
            .map(|_| {
                let mut rot = base;
                for x in rot.iter_mut() {
                    *x += rng.gen_range(-0.2..=0.2);
                }
                PoseEstimate::new(
                    [
                        rng.gen_range(-1.0..=1.0),
                        rng.gen_range(-1.0..=1.0),
                        rng.gen_range(-1.0..=1.0),
                    ],
                    rot,
                    rng.gen_range(0.5..=2.0),
                )
                .unwrap()
            })
            .collect();
        let mut weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..=1.0)).collect();
        let total: f64 = weights.iter().sum();
        for w in weights.iter_mut() {
            *w /= total;
        }

        let fused = fuse_relative_pose(&estimates, &weights).unwrap();

        let flipped: Vec<PoseEstimate> = estimates
            .iter()
            .map(|e| {
                let r = e.rotation;
                PoseEstimate::new(e.translation, [-r[0], -r[1], -r[2], -r[3]], e.focal).unwrap()
            })
            .collect();
        let fused_flipped = fuse_relative_pose(&flipped, &weights).unwrap();
        // The geodesic passes through acos at 1, which stretches a one-ulp
        // disagreement in the quaternion dot product to about 1e-8.
        prop_assert!(quaternion_geodesic(&fused.rotation, &fused_flipped.rotation) <= 1e-7);

        let reversed: Vec<PoseEstimate> = estimates.iter().rev().cloned().collect();
        let rev_weights: Vec<f64> = weights.iter().rev().copied().collect();
        let fused_rev = fuse_relative_pose(&reversed, &rev_weights).unwrap();
        prop_assert!(quaternion_geodesic(&fused.rotation, &fused_rev.rotation) <= 1e-7);
        for axis in 0..3 {
            prop_assert!(
                (fused.translation[axis] - fused_rev.translation[axis]).abs() <= 1e-9
            );
        }
        prop_assert!((fused.focal - fused_rev.focal).abs() <= 1e-9);
    }

    #[test]
    fn config_keys_parse_and_unknown_keys_error(
        length in 1usize..100_000,
        seed in any::<u64>(),
        window in 1usize..50,
        m in 0.1f64..4.0,
    ) {
        let mut cfg = ScenarioConfig::default();
        cfg.apply_key("length", &length.to_string()).unwrap();
        prop_assert_eq!(cfg.length, length);
        cfg.apply_key("seed", &seed.to_string()).unwrap();
        prop_assert_eq!(cfg.seed, seed);
        cfg.apply_key("window", &window.to_string()).unwrap();
        prop_assert_eq!(cfg.window, window);
        cfg.apply_key("m", &format!("{m:.17}")).unwrap();
        prop_assert!((cfg.m - m).abs() <= 1e-12);
        prop_assert!(cfg.apply_key("not_a_setting", "1").is_err());
    }
}
