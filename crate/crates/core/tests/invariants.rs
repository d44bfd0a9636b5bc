//! Property tests for the mixture identities, metric invariances, and the
//! checkpoint format.

use proptest::collection::vec;
use proptest::prelude::*;

use mogu_core::eval::{average_ranks, pearson, spearman};
use mogu_core::mixture::{combine_mean, uncertainty_gating_weights, variance_decomposition};
use mogu_core::numgrad::{params_from_str, params_to_string, ParamSet, Tensor};

fn stack_shape(k: usize, h: usize, v: usize, data: Vec<f64>) -> Tensor {
    Tensor::new(vec![k, h, v], data).unwrap()
}

proptest! {
    #[test]
    fn gating_weights_form_a_simplex(
        k in 1usize..6,
        h in 1usize..5,
        v in 1usize..4,
        seed in any::<u64>(),
    ) {
        let mut state = seed;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 4.0 + 1e-4
        };
        let cell = h * v;
        let vars: Vec<f64> = (0..k * cell).map(|_| next()).collect();
        let t = stack_shape(k, h, v, vars);
        let w = uncertainty_gating_weights(&t, 1e-6);
        for c in 0..cell {
            let sum: f64 = (0..k).map(|i| w.data()[i * cell + c]).sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            for i in 0..k {
                let wi = w.data()[i * cell + c];
                prop_assert!((0.0..=1.0 + 1e-12).contains(&wi));
            }
        }
    }

    #[test]
    fn decomposition_identities(
        k in 1usize..6,
        h in 1usize..4,
        v in 1usize..4,
        raw in vec(0.01f64..5.0, 1..200),
        means_raw in vec(-3.0f64..3.0, 1..200),
    ) {
        let cell = h * v;
        let need = k * cell;
        prop_assume!(raw.len() >= need && means_raw.len() >= need);
        let vars = stack_shape(k, h, v, raw[..need].to_vec());
        let means = stack_shape(k, h, v, means_raw[..need].to_vec());
        let w = uncertainty_gating_weights(&vars, 1e-6);
        let combined = combine_mean(&w, &means);
        let (alea, epis, total) = variance_decomposition(&w, &means, &vars, &combined);
        for c in 0..cell {
            // total = aleatoric + epistemic, both non-negative
            prop_assert!((total.data()[c] - alea.data()[c] - epis.data()[c]).abs() < 1e-12);
            prop_assert!(alea.data()[c] >= 0.0 && epis.data()[c] >= 0.0);
            // under inverse-variance gating the aleatoric term is the
            // harmonic mean k / sum(1/var)
            let harmonic = k as f64
                / (0..k).map(|i| 1.0 / vars.data()[i * cell + c]).sum::<f64>();
            prop_assert!((alea.data()[c] - harmonic).abs() < 1e-12);
            // combined mean is a convex combination of expert means
            let lo = (0..k).map(|i| means.data()[i * cell + c]).fold(f64::INFINITY, f64::min);
            let hi = (0..k).map(|i| means.data()[i * cell + c]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(combined.data()[c] >= lo - 1e-12 && combined.data()[c] <= hi + 1e-12);
            if k == 1 {
                prop_assert!(epis.data()[c] == 0.0);
            }
        }
    }

    #[test]
    fn pearson_is_symmetric_and_affine_invariant(
        (xs, ys) in (3usize..40).prop_flat_map(|n| (
            vec(-100.0f64..100.0, n..=n),
            vec(-100.0f64..100.0, n..=n),
        )),
        scale in 0.1f64..10.0,
        shift in -50.0f64..50.0,
    ) {
        let ok = |v: &[f64]| v.iter().any(|&x| (x - v[0]).abs() > 1e-9);
        prop_assume!(ok(&xs) && ok(&ys));
        let r_ab = pearson(&xs, &ys).unwrap();
        let r_ba = pearson(&ys, &xs).unwrap();
        prop_assert!((r_ab - r_ba).abs() < 1e-12);
        let transformed: Vec<f64> = xs.iter().map(|x| scale * x + shift).collect();
        let r_t = pearson(&transformed, &ys).unwrap();
        prop_assert!((r_ab - r_t).abs() < 1e-9);
    }

    #[test]
    fn spearman_is_invariant_to_monotone_transforms(
        (xs, ys) in (3usize..30).prop_flat_map(|n| (
            vec(-50.0f64..50.0, n..=n),
            vec(-50.0f64..50.0, n..=n),
        )),
    ) {
        let ok = |v: &[f64]| v.iter().any(|&x| (x - v[0]).abs() > 1e-9);
        prop_assume!(ok(&xs) && ok(&ys));
        let rho = spearman(&xs, &ys).unwrap();
        let warped: Vec<f64> = xs.iter().map(|x| (x / 10.0).exp()).collect();
        let rho_w = spearman(&warped, &ys).unwrap();
        prop_assert!((rho - rho_w).abs() < 1e-9);
    }

    #[test]
    fn ranks_are_a_permutation_weighted_by_ties(xs in vec(-10.0f64..10.0, 1..50)) {
        let ranks = average_ranks(&xs);
        // Rank sum is always n(n+1)/2 regardless of ties.
        let n = xs.len() as f64;
        let sum: f64 = ranks.iter().sum();
        prop_assert!((sum - n * (n + 1.0) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly(
        values in vec(prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO, 1..30),
        rows in 1usize..5,
    ) {
        prop_assume!(values.len() % rows == 0);
        let cols = values.len() / rows;
        prop_assume!(cols >= 1);
        let mut params = ParamSet::new();
        params.insert("p", Tensor::new(vec![rows, cols], values.clone()).unwrap()).unwrap();
        let text = params_to_string(&params);
        let back = params_from_str(&text).unwrap();
        let t = back.get("p").unwrap();
        for (a, b) in values.iter().zip(t.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn window_count_matches_closed_form(
        len in 2usize..400,
        lookback in 1usize..50,
        horizon in 1usize..50,
        stride in 1usize..5,
    ) {
        let values = Tensor::zeros(&[len, 1]);
        match mogu_core::data::make_windows(&values, 0..len, lookback, horizon, stride) {
            Ok(ws) => {
                prop_assert!(len >= lookback + horizon);
                let valid = len - lookback - horizon + 1;
                let want = valid.div_ceil(stride);
                prop_assert_eq!(ws.len(), want);
            }
            Err(_) => prop_assert!(len < lookback + horizon),
        }
    }
}
