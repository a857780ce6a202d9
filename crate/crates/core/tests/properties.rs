//! Property tests over the crate's cross-cutting invariants.

use proptest::prelude::*;
use std::rc::Rc;

use darklift_core::diffusion::{make_linear_schedule, one_step_z0, q_sample};
use darklift_core::isp::{
    pack_bayer, srgb_decode, srgb_encode, unpack_bayer, CfaPattern, RawFrame, IDENTITY_CCM,
};
use darklift_core::rng::Rng;
use darklift_core::tensor::Graph;

fn cfa_strategy() -> impl Strategy<Value = CfaPattern> {
    prop_oneof![
        Just(CfaPattern::Rggb),
        Just(CfaPattern::Bggr),
        Just(CfaPattern::Grbg),
        Just(CfaPattern::Gbrg),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pack_unpack_round_trips_any_mosaic(
        pattern in cfa_strategy(),
        half_w in 1usize..6,
        half_h in 1usize..6,
        seed in any::<u64>(),
    ) {
        let (w, h) = (2 * half_w, 2 * half_h);
        let mut rng = Rng::new(seed);
        let mosaic: Vec<u16> = (0..w * h).map(|_| (rng.next_u64() & 0xFFFF) as u16).collect();
        let frame = RawFrame {
            width: w,
            height: h,
            mosaic: mosaic.clone(),
            cfa_pattern: pattern,
            black_level: 0,
            white_level: u16::MAX,
            wb_gains: [1.0, 1.0, 1.0],
            ccm: IDENTITY_CCM,
            exposure_ratio: 1.0,
        };
        let packed = pack_bayer(&frame).unwrap();
        prop_assert_eq!(unpack_bayer(&packed, pattern).unwrap(), mosaic);
    }

    #[test]
    fn gamma_round_trip_on_unit_interval(v in 0.0f32..=1.0) {
        let rt = srgb_decode(srgb_encode(v));
        prop_assert!((rt - v).abs() < 1e-6, "{} -> {}", v, rt);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        seed in any::<u64>(),
        rows in 1usize..6,
        cols in 2usize..8,
        // exactly representable shifts keep the stabilized input bit-identical
        shift_quarters in -16i32..=16,
    ) {
        let mut rng = Rng::new(seed);
        // quarter-grid values add exactly with quarter-grid shifts
        let data: Vec<f32> = (0..rows * cols)
            .map(|_| (rng.next_below(64) as f32 - 32.0) * 0.25)
            .collect();
        let mut g = Graph::new();
        let x = g.leaf(data, vec![rows, cols]).unwrap();
        let s0 = g.softmax_rows(x).unwrap();
        for r in 0..rows {
            let sum: f32 = g.data(s0)[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6, "row {} sums to {}", r, sum);
        }
        let shifted = g.add_scalar(x, shift_quarters as f32 * 0.25);
        let s1 = g.softmax_rows(shifted).unwrap();
        prop_assert_eq!(g.data(s0), g.data(s1));
    }

    #[test]
    fn gather_then_scatter_is_identity_for_permutations(
        seed in any::<u64>(),
        n in 1usize..40,
    ) {
        let mut rng = Rng::new(seed);
        let data: Vec<f32> = (0..n).map(|_| rng.normal()).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.next_below(i + 1);
            perm.swap(i, j);
        }
        let mut g = Graph::new();
        let x = g.leaf(data.clone(), vec![n]).unwrap();
        let idx = Rc::new(perm);
        let gathered = g.gather(x, idx.clone(), vec![n]).unwrap();
        let restored = g.scatter(gathered, idx, vec![n]).unwrap();
        prop_assert_eq!(g.data(restored), &data[..]);
    }

    #[test]
    fn forward_one_step_round_trip(
        seed in any::<u64>(),
        t in 1usize..=1000,
    ) {
        let schedule = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        let mut rng = Rng::new(seed);
        let mut g = Graph::new();
        let z0 = g.randn(&mut rng, vec![8]);
        let noise = g.randn(&mut rng, vec![8]);
        let z_t = q_sample(&mut g, z0, t, noise, &schedule).unwrap();
        let back = one_step_z0(&mut g, z_t, t, noise, &schedule).unwrap();
        for ((a, b), n) in g.data(back).iter().zip(g.data(z0)).zip(g.data(noise)) {
            // the f32 store of z_t quantizes at half an ulp, amplified by
            // 1/sqrt(alpha_bar); the bound scales with the noise magnitude
            prop_assert!((a - b).abs() < 1e-5 * (1.0 + n.abs()), "t {}: {} vs {}", t, a, b);
        }
    }

    #[test]
    fn schedule_ratio_identity_any_range(
        t_max in 1usize..500,
        start_scaled in 1u32..100,
        span_scaled in 0u32..400,
    ) {
        let beta_start = start_scaled as f64 * 1e-5;
        let beta_end = beta_start + span_scaled as f64 * 1e-4;
        prop_assume!(beta_end < 1.0);
        let s = make_linear_schedule(t_max, beta_start, beta_end).unwrap();
        for t in 1..=t_max {
            let ratio = s.alpha_bar(t) / s.alpha_bar(t - 1);
            prop_assert!((ratio - s.alpha(t)).abs() < 1e-9);
        }
    }
}
