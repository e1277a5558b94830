//! Cross-module invariants as property tests.

use std::sync::Arc;

use polytd::approx::{gradient_constants, Embedding, FeatureMap, LinearModel, ReluNetwork, ValueModel};
use polytd::chain::{make_random_chain, make_renewal_chain, sample_trajectory, tv_curve, Start};
use polytd::decomp::{decompose, expected_update, linear_fixed_point};
use polytd::depend::{block_sums, couple};
use polytd::rates::{fit_power_law, quantile_envelope};
use polytd::relu_diag::activation_pattern;
use polytd::td::{run_td, StepSchedule, TdConfig};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn stationary_law_is_invariant(n in 1usize..12, seed in 0u64..10_000) {
        let k = make_random_chain(n, seed).unwrap();
        for i in 0..n {
            let row: f64 = k.row(i).iter().sum();
            prop_assert!((row - 1.0).abs() < 1e-12);
        }
        let pi = k.stationary().unwrap().to_vec();
        prop_assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let next = k.push_forward(&pi);
        for (a, b) in pi.iter().zip(&next) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tv_to_stationarity_never_increases(kappa in 1.2f64..4.0, n in 3usize..60, start in 0usize..3) {
        let k = make_renewal_chain(kappa, n, |s| f64::from(u8::from(s == 0))).unwrap();
        let tv = tv_curve(&k, start.min(n - 1), 200).unwrap();
        for w in tv.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
        prop_assert!(tv.iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
    }

    #[test]
    fn linear_fixed_point_zeroes_the_expected_update(n in 2usize..8, d in 1usize..4, seed in 0u64..5_000, discount in 0.0f64..0.95) {
        let k = make_random_chain(n, seed).unwrap();
        let f = FeatureMap::random(n, d.min(n), seed + 1).unwrap();
        let fp = match linear_fixed_point(&k, &f, discount) {
            Ok(fp) => fp,
            Err(_) => return Ok(()),
        };
        let m = ValueModel::Linear(LinearModel::new(Arc::new(f), fp.theta_star.clone()).unwrap());
        let g = expected_update(&k, &m, discount).unwrap();
        let scale = 1.0 + fp.theta_star.iter().map(|x| x.abs()).fold(0.0, f64::max);
        prop_assert!(g.iter().all(|x| x.abs() < 1e-10 * scale), "{g:?}");
    }

    #[test]
    fn decomposition_reconstructs_every_checkpoint(n in 2usize..6, seed in 0u64..5_000, steps in 10u64..400) {
        let k = make_random_chain(n, seed).unwrap();
        let f = FeatureMap::tabular(n);
        let star = linear_fixed_point(&k, &f, 0.7).unwrap().theta_star;
        let m0 = ValueModel::Linear(LinearModel::zeros(Arc::new(f)));
        let cfg = TdConfig::new(StepSchedule::new(0.7, 0.8).unwrap(), 0.7, steps);
        let h = run_td(&k, &m0, &cfg, seed).unwrap();
        let d = decompose(&h, &k, &star).unwrap();
        prop_assert!(d.reconstruction_error <= 1e-10);
        prop_assert_eq!(d.times.len(), h.checkpoints.len());
    }

    #[test]
    fn blocks_partition_the_path(b in 1usize..9, len in 20usize..200, seed in 0u64..1_000) {
        let k = make_random_chain(4, seed).unwrap();
        let tr = sample_trajectory(&k, Start::Stationary, len, seed).unwrap();
        let f = [0.5, -1.0, 2.0, 0.25];
        let set = block_sums(&tr.states, &f, b).unwrap();
        prop_assert_eq!(set.n_blocks(), tr.states.len() / b);
        for kk in 0..set.n_blocks() {
            let direct: f64 = tr.states[set.range(kk)].iter().map(|&s| f[s]).sum();
            prop_assert!((direct - set.sums[kk]).abs() < 1e-12);
        }
    }

    #[test]
    fn coupled_chains_stay_together(kappa in 1.3f64..3.0, x0 in 0usize..10, y0 in 0usize..10, seed in 0u64..10_000) {
        let k = make_renewal_chain(kappa, 10, |s| s as f64).unwrap();
        let p = couple(&k, x0, y0, 300, seed).unwrap();
        prop_assert_eq!(p.apart[0], x0 != y0);
        match p.meeting_time {
            Some(tau) => {
                prop_assert!(p.apart[..tau].iter().all(|&a| a));
                prop_assert!(p.apart[tau..].iter().all(|&a| !a));
            }
            None => prop_assert!(p.apart.iter().all(|&a| a)),
        }
    }

    #[test]
    fn power_law_fit_recovers_exact_laws(c in 0.01f64..100.0, exponent in 0.05f64..3.0) {
        let ts: Vec<f64> = (1..200).map(f64::from).collect();
        let ys: Vec<f64> = ts.iter().map(|t| c * t.powf(-exponent)).collect();
        let fit = fit_power_law(&ts, &ys, (2.0, 150.0)).unwrap();
        prop_assert!((fit.exponent - exponent).abs() < 1e-9);
        prop_assert!((fit.predict(10.0) / (c * 10f64.powf(-exponent)) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn quantiles_shrink_as_delta_grows(seed in 0u64..1_000) {
        let mut rng = polytd::seeds::rng(seed);
        use rand::Rng;
        let curves: Vec<Vec<f64>> = (0..200).map(|_| (0..5).map(|_| rng.gen::<f64>()).collect()).collect();
        let tight = quantile_envelope(&curves, 0.05).unwrap();
        let loose = quantile_envelope(&curves, 0.2).unwrap();
        for (a, b) in tight.quantile.iter().zip(&loose.quantile) {
            prop_assert!(a >= b);
        }
    }

    #[test]
    fn projected_networks_respect_budget_and_gradient_bound(
        hidden in proptest::collection::vec(1usize..5, 1..3),
        budget in 1.0f64..2.0,
        seed in 0u64..10_000,
        scale in 0.1f64..3.0,
    ) {
        let emb = Embedding::OneHot { n_states: 4, scale: 1.0 };
        let net = ReluNetwork::random(&hidden, true, budget, 1.0, emb, seed, Some(scale)).unwrap();
        prop_assert!(net.layer_norms().iter().all(|&s| s <= budget * (1.0 + 1e-9)));
        let g = gradient_constants(&net, 1.0).g;
        for s in 0..4 {
            let x = net.input(s);
            let grad = net.grad_at(&x);
            let norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(norm <= g * (1.0 + 1e-9), "{norm} > {g}");
            let p = activation_pattern(&net, &x);
            prop_assert_eq!(p.flips(&p), 0);
            prop_assert_eq!(p.n_units(), hidden.iter().sum::<usize>());
        }
    }
}
