//! Observed properties of the benchmark configurations.

use polytd::decomp::{moment_curve, run_seeds};
use polytd::depend::{gap_covariance, BlockSet};
use polytd::experiments::{renewal_block_sets, renewal_indicator_chain, LinearBenchmark};

#[test]
fn linear_benchmark_moment_tail_decreases() {
    let b = LinearBenchmark::default();
    let k = b.kernel().unwrap();
    let star = b.theta_star(&k).unwrap();
    let cfg = b.td_config(b.steps, false).unwrap();
    let hs = run_seeds(&k, &b.model0(), &cfg, b.base_seed, 0..b.n_seeds).unwrap();
    let m2 = moment_curve(&hs, &star, 2, 0).unwrap();
    let m4 = moment_curve(&hs, &star, 4, 0).unwrap();
    let tail: Vec<(u64, f64)> = m2.times.iter().copied().zip(m2.values.iter().copied()).filter(|(t, _)| *t as f64 >= b.burn_in).collect();
    assert!(tail.len() > 20);
    for w in tail.windows(2) {
        assert!(w[1].1 <= w[0].1, "moment curve rises from t={} to t={}: {} -> {}", w[0].0, w[1].0, w[0].1, w[1].1);
    }
    for (a, c) in m2.values.iter().zip(&m4.values) {
        assert!(c >= &(a * (1.0 - 1e-12)));
    }
}

/// At fixed gap the cross-block covariance grows like `b^{2-beta}`; on a
/// slowly mixing chain doubling `b` multiplies it by nearly four.
#[test]
fn doubling_block_size_on_slow_chain() {
    let k = renewal_indicator_chain(1.2, 400).unwrap();
    let small = renewal_block_sets(&k, 8, 16, 2000, 1).unwrap();
    let large = renewal_block_sets(&k, 16, 16, 2000, 2).unwrap();
    let rs: Vec<&BlockSet> = small.iter().collect();
    let rl: Vec<&BlockSet> = large.iter().collect();
    let gs = gap_covariance(&rs, &[1, 2, 4]).unwrap();
    let gl = gap_covariance(&rl, &[1, 2, 4]).unwrap();
    let target = 2.0 * 2f64.ln();
    for i in 0..2 {
        let ratio = (gl.cov[i] / gs.cov[i]).ln();
        assert!((ratio - target).abs() <= 0.5, "gap {}: log-ratio {ratio}", gs.gaps[i]);
    }
    for g in [&gs, &gl] {
        assert!(g.cov[0] - 4.0 * g.se[0] > g.cov[2] + 4.0 * g.se[2], "{g:?}");
    }
}
