//! Benchmark problems and the numbered acceptance checks built on them.
//!
//! Each check returns an [`Outcome`] with a pass flag and the measured
//! quantities. Defaults are the full desk-scale settings; the test suite uses
//! reduced copies of the same configs.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use crate::approx::{gradient_constants, Embedding, FeatureMap, LinearModel, ReluNetwork, ValueModel};
use crate::chain::{make_random_chain, make_renewal_chain, sample_trajectory, tv_curve, Start, TransitionKernel};
use crate::decomp::{binned_increments, linear_fixed_point, moment_curve_from_errors, reference_fixed_point, run_seeds, ReferenceRun};
use crate::depend::{
    block_covariance_check, concentration_tail, coupling_curve, covariance_mixing, geometric_lags, make_blocks, BlockSet,
};
use crate::error::{Error, Result};
use crate::rates::{classify_decay, fit_power_law, fit_power_law_above, verify_bound, BoundReport, BoundSpec, BoundVariant, DecayRegime};
use crate::relu_diag::{default_probes, track_crossings, DEFAULT_PROBES};
use crate::seeds::{self, purpose};
use crate::td::{run_td, Checkpoints, IterateHistory, StepSchedule, TdConfig};

/// Result of one numbered check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub id: u32,
    pub name: String,
    pub passed: bool,
    pub summary: String,
    pub metrics: BTreeMap<String, f64>,
}

impl Outcome {
    pub fn new(id: u32, name: &str) -> Self {
        Self { id, name: name.to_string(), passed: false, summary: String::new(), metrics: BTreeMap::new() }
    }

    pub fn metric(&mut self, key: &str, value: f64) -> &mut Self {
        self.metrics.insert(key.to_string(), value);
        self
    }

    /// `criterion <id> [<name>]: PASS|FAIL - <summary>`
    pub fn line(&self) -> String {
        format!("criterion {:>2} [{}]: {} - {}", self.id, self.name, if self.passed { "PASS" } else { "FAIL" }, self.summary)
    }
}

fn indicator(n: usize, at: usize) -> Vec<f64> {
    (0..n).map(|s| if s == at { 1.0 } else { 0.0 }).collect()
}

/// Renewal chain with reward 1 at the renewal state and 0 elsewhere.
pub fn renewal_indicator_chain(kappa: f64, n_states: usize) -> Result<TransitionKernel> {
    make_renewal_chain(kappa, n_states, |s| if s == 0 { 1.0 } else { 0.0 })
}

/// Power-law exponent of the exact stationary autocovariance of the
/// renewal-state indicator.
pub fn mixing_exponent(kernel: &TransitionKernel, window: (f64, f64)) -> Result<f64> {
    let f = indicator(kernel.n_states(), 0);
    let lags = geometric_lags(window.1.ceil() as usize, 1.15);
    let est = covariance_mixing(kernel, &f, &f, &lags, window)?;
    est.fit.map(|f| f.exponent).ok_or(Error::WindowTooSmall { points: 0, needed: crate::rates::MIN_FIT_POINTS })
}

/// Tabular TD on a truncated renewal chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearBenchmark {
    pub kappa: f64,
    pub n_states: usize,
    pub discount: f64,
    pub c_alpha: f64,
    pub eta: f64,
    pub steps: u64,
    pub n_seeds: u64,
    pub base_seed: u64,
    pub delta: f64,
    pub burn_in: f64,
    /// Lag window for the mixing-exponent fit.
    pub mixing_window: (f64, f64),
}

impl Default for LinearBenchmark {
    fn default() -> Self {
        Self {
            kappa: 2.5,
            n_states: 30,
            discount: 0.5,
            c_alpha: 2.0,
            eta: 0.8,
            steps: 1_000_000,
            n_seeds: 200,
            base_seed: 2024,
            delta: 0.1,
            burn_in: 1e3,
            mixing_window: (2.0, 15.0),
        }
    }
}

impl LinearBenchmark {
    pub fn kernel(&self) -> Result<TransitionKernel> {
        renewal_indicator_chain(self.kappa, self.n_states)
    }

    pub fn model0(&self) -> ValueModel {
        ValueModel::Linear(LinearModel::zeros(Arc::new(FeatureMap::tabular(self.n_states))))
    }

    pub fn td_config(&self, steps: u64, record_stream: bool) -> Result<TdConfig> {
        let mut cfg = TdConfig::new(StepSchedule::new(self.c_alpha, self.eta)?, self.discount, steps);
        cfg.record_stream = record_stream;
        Ok(cfg)
    }

    pub fn theta_star(&self, kernel: &TransitionKernel) -> Result<Vec<f64>> {
        Ok(linear_fixed_point(kernel, &FeatureMap::tabular(self.n_states), self.discount)?.theta_star)
    }
}

/// Small ReLU network on a short renewal chain with scalar state coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReluBenchmark {
    pub kappa: f64,
    pub n_states: usize,
    pub hidden: Vec<usize>,
    pub budget: f64,
    pub x_max: f64,
    pub discount: f64,
    pub c_alpha: f64,
    pub eta: f64,
    pub steps: u64,
    pub n_seeds: u64,
    pub init_seed: u64,
    pub base_seed: u64,
    pub delta: f64,
    pub burn_in: f64,
    /// Mixing exponent used in the predicted rates. The chain is too short to
    /// fit one, so this is the nominal `kappa - 1`.
    pub beta: f64,
    /// Hoelder exponent of the gradient map away from kinks.
    pub holder_gamma: f64,
    pub crossing_steps: u64,
    pub reference: ReferenceRun,
}

impl Default for ReluBenchmark {
    fn default() -> Self {
        Self {
            kappa: 2.5,
            n_states: 5,
            hidden: vec![2],
            budget: 1.5,
            x_max: 1.0,
            discount: 0.5,
            c_alpha: 1.0,
            eta: 0.8,
            steps: 1_000_000,
            n_seeds: 200,
            init_seed: 11,
            base_seed: 2025,
            delta: 0.1,
            burn_in: 1e3,
            beta: 1.5,
            holder_gamma: 1.0,
            crossing_steps: 100_000,
            reference: ReferenceRun::default(),
        }
    }
}

impl ReluBenchmark {
    pub fn kernel(&self) -> Result<TransitionKernel> {
        renewal_indicator_chain(self.kappa, self.n_states)
    }

    pub fn network0(&self) -> Result<ReluNetwork> {
        let emb = Embedding::Coordinate { n_states: self.n_states };
        ReluNetwork::random(&self.hidden, true, self.budget, self.x_max, emb, self.init_seed, None)
    }

    pub fn td_config(&self, steps: u64, record_stream: bool) -> Result<TdConfig> {
        let mut cfg = TdConfig::new(StepSchedule::new(self.c_alpha, self.eta)?, self.discount, steps);
        cfg.record_stream = record_stream;
        Ok(cfg)
    }
}

/// Check 1: tabular TD reaches the closed-form fixed point on random kernels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointOracle {
    pub n_kernels: u64,
    pub n_states: usize,
    pub seeds_per_kernel: u64,
    pub steps: u64,
    pub c_alpha: f64,
    pub eta: f64,
    pub discount: f64,
    pub max_ratio: f64,
    pub required: usize,
    pub base_seed: u64,
}

impl Default for FixedPointOracle {
    fn default() -> Self {
        Self {
            n_kernels: 10,
            n_states: 5,
            seeds_per_kernel: 5,
            steps: 1_000_000,
            c_alpha: 3.0,
            eta: 0.8,
            discount: 0.9,
            max_ratio: 0.05,
            required: 9,
            base_seed: 1,
        }
    }
}

pub fn fixed_point_oracle(cfg: &FixedPointOracle) -> Result<Outcome> {
    let clock = Instant::now();
    let mut out = Outcome::new(1, "fixed-point oracle");
    let f = Arc::new(FeatureMap::tabular(cfg.n_states));
    let model0 = ValueModel::Linear(LinearModel::zeros(f.clone()));
    let mut td = TdConfig::new(StepSchedule::new(cfg.c_alpha, cfg.eta)?, cfg.discount, cfg.steps);
    td.record_stream = false;
    td.checkpoints = Checkpoints::Every(cfg.steps);
    let mut medians = Vec::new();
    for i in 0..cfg.n_kernels {
        let kernel = make_random_chain(cfg.n_states, seeds::derive(cfg.base_seed, purpose::KERNEL, i))?;
        let star = linear_fixed_point(&kernel, &f, cfg.discount)?.theta_star;
        let e0 = crate::td::dist(model0.params(), &star);
        let hs = run_seeds(&kernel, &model0, &td, seeds::derive(cfg.base_seed, purpose::TRAJECTORY, i), 0..cfg.seeds_per_kernel)?;
        let ratios: Vec<f64> = hs.iter().map(|h| crate::td::dist(h.final_theta(), &star) / e0).collect();
        medians.push(crate::stats::quantile_sorted(&crate::stats::sorted_copy(&ratios), 0.5));
    }
    let good = medians.iter().filter(|&&m| m <= cfg.max_ratio).count();
    let worst = medians.iter().copied().fold(0.0f64, f64::max);
    let secs = clock.elapsed().as_secs_f64();
    out.passed = good >= cfg.required;
    out.summary = format!(
        "{good}/{} kernels with median error ratio <= {} (worst median {worst:.4}, {secs:.1}s)",
        medians.len(),
        cfg.max_ratio
    );
    out.metric("kernels_passing", good as f64).metric("worst_median_ratio", worst).metric("seconds", secs);
    Ok(out)
}

/// Check 2: exact total-variation decay of the renewal chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ergodicity {
    pub kappa: f64,
    pub n_states: usize,
    pub window: (f64, f64),
    pub exponent_range: (f64, f64),
    pub min_r2: f64,
    /// Off-diagonal probability of the symmetric two-state chain.
    pub two_state_flip: f64,
}

impl Default for Ergodicity {
    fn default() -> Self {
        Self { kappa: 2.0, n_states: 200, window: (5.0, 80.0), exponent_range: (0.7, 1.3), min_r2: 0.98, two_state_flip: 0.15 }
    }
}

pub fn ergodicity(cfg: &Ergodicity) -> Result<Outcome> {
    let mut out = Outcome::new(2, "ergodicity");
    let kernel = renewal_indicator_chain(cfg.kappa, cfg.n_states)?;
    let t_max = cfg.window.1.ceil() as usize;
    let tv = tv_curve(&kernel, 0, t_max)?;
    let ts: Vec<f64> = (0..tv.len()).map(|t| t as f64).collect();
    let fit = fit_power_law(&ts, &tv, cfg.window)?;
    let q = cfg.two_state_flip;
    let two = TransitionKernel::new(vec![vec![1.0 - q, q], vec![q, 1.0 - q]], vec![1.0, 0.0], 1.0)?;
    let tv2 = tv_curve(&two, 0, 60)?;
    let ts2: Vec<f64> = (0..tv2.len()).map(|t| t as f64).collect();
    let class = classify_decay(&ts2, &tv2, (1.0, 60.0), 1e-14)?;
    let in_range = fit.exponent >= cfg.exponent_range.0 && fit.exponent <= cfg.exponent_range.1;
    let geometric = class.regime == DecayRegime::Geometric;
    out.passed = in_range && fit.r_squared >= cfg.min_r2 && geometric;
    out.summary = format!(
        "renewal TV exponent {:.3} (R^2 {:.4}) over [{}, {}]; two-state chain classified {:?}",
        fit.exponent, fit.r_squared, cfg.window.0, cfg.window.1, class.regime
    );
    out.metric("tv_exponent", fit.exponent)
        .metric("tv_r2", fit.r_squared)
        .metric("two_state_geometric", f64::from(u8::from(geometric)));
    Ok(out)
}

/// Check 3: exact martingale decomposition on the linear benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleStructure {
    pub bench: LinearBenchmark,
    pub n_seeds: u64,
    pub steps: u64,
    pub time_bins: usize,
    pub min_count: usize,
    pub z: f64,
    pub min_share: f64,
    pub max_reconstruction: f64,
}

impl Default for MartingaleStructure {
    fn default() -> Self {
        Self {
            bench: LinearBenchmark::default(),
            n_seeds: 8,
            steps: 100_000,
            time_bins: 24,
            min_count: 100,
            z: 4.0,
            min_share: 0.95,
            max_reconstruction: 1e-10,
        }
    }
}

pub fn martingale_structure(cfg: &MartingaleStructure) -> Result<Outcome> {
    let mut out = Outcome::new(3, "martingale structure");
    let b = &cfg.bench;
    let kernel = b.kernel()?;
    let star = b.theta_star(&kernel)?;
    let hs = run_seeds(&kernel, &b.model0(), &b.td_config(cfg.steps, true)?, b.base_seed, 0..cfg.n_seeds)?;
    let bins = binned_increments(&hs, &kernel, &star, cfg.time_bins, cfg.min_count, cfg.z)?;
    let share = bins.share_within();
    out.passed = bins.reconstruction_error <= cfg.max_reconstruction && share >= cfg.min_share && !bins.bins.is_empty();
    out.summary = format!(
        "max reconstruction error {:.2e}; {}/{} bins within {}SE ({:.1}%)",
        bins.reconstruction_error,
        bins.within,
        bins.bins.len(),
        cfg.z,
        100.0 * share
    );
    out.metric("reconstruction_error", bins.reconstruction_error)
        .metric("bins", bins.bins.len() as f64)
        .metric("share_within", share);
    Ok(out)
}

/// Check 4: cross-block covariance decay and its split-sample envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockCovariance {
    pub kappa: f64,
    pub n_states: usize,
    pub block_size: usize,
    pub n_blocks: usize,
    pub n_seeds: u64,
    pub window: (f64, f64),
    pub mixing_window: (f64, f64),
    pub base_seed: u64,
}

impl Default for BlockCovariance {
    fn default() -> Self {
        Self {
            kappa: 1.5,
            n_states: 200,
            block_size: 5,
            n_blocks: 64,
            n_seeds: 1000,
            window: (1.0, 16.0),
            mixing_window: (2.0, 100.0),
            base_seed: 3,
        }
    }
}

/// Block sums of the renewal indicator for stationary-start paths.
pub fn renewal_block_sets(kernel: &TransitionKernel, b: usize, n_blocks: usize, n_seeds: u64, base_seed: u64) -> Result<Vec<BlockSet>> {
    let f = indicator(kernel.n_states(), 0);
    (0..n_seeds)
        .map(|i| {
            let tr = sample_trajectory(kernel, Start::Stationary, b * n_blocks, seeds::derive(base_seed, purpose::BLOCKS, i))?;
            make_blocks(&tr, &f, b)
        })
        .collect()
}

pub fn block_covariance(cfg: &BlockCovariance) -> Result<Outcome> {
    let mut out = Outcome::new(4, "block covariance");
    let kernel = renewal_indicator_chain(cfg.kappa, cfg.n_states)?;
    let beta = mixing_exponent(&kernel, cfg.mixing_window)?;
    let sets = renewal_block_sets(&kernel, cfg.block_size, cfg.n_blocks, cfg.n_seeds, cfg.base_seed)?;
    let gaps = geometric_lags(cfg.n_blocks / 2, 1.3);
    let rep = block_covariance_check(&sets, &gaps, beta, cfg.window)?;
    let decay = rep.fit.as_ref().map(|f| f.exponent);
    out.passed = decay.is_some_and(|e| e > 0.0) && rep.domination;
    out.summary = format!(
        "|Cov| vs gap fitted exponent {} ; envelope C b^2 m^-{beta:.3} with C = {:.4} {} the held-out half on m in [{}, {}]",
        decay.map_or("n/a".to_string(), |e| format!("-{e:.3}")),
        rep.c_fitted,
        if rep.domination { "dominates" } else { "does not dominate" },
        cfg.window.0,
        cfg.window.1
    );
    out.metric("beta_hat", beta).metric("c_fitted", rep.c_fitted).metric("decay_exponent", decay.unwrap_or(f64::NAN));
    Ok(out)
}

/// Check 5: maximal coupling against the exact TV lower bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub kappa: f64,
    pub n_states: usize,
    pub x0: usize,
    pub y0: usize,
    pub t_max: usize,
    pub n_seeds: usize,
    pub window: (f64, f64),
    pub z: f64,
    pub exponent_slack: f64,
    pub base_seed: u64,
}

impl Default for Coupling {
    fn default() -> Self {
        Self {
            kappa: 2.0,
            n_states: 200,
            x0: 0,
            y0: 1,
            t_max: 200,
            n_seeds: 10_000,
            window: (2.0, 40.0),
            z: 4.0,
            exponent_slack: 0.3,
            base_seed: 9,
        }
    }
}

pub fn coupling(cfg: &Coupling) -> Result<Outcome> {
    let mut out = Outcome::new(5, "coupling");
    let kernel = renewal_indicator_chain(cfg.kappa, cfg.n_states)?;
    let curve = coupling_curve(&kernel, cfg.x0, cfg.y0, cfg.t_max, cfg.n_seeds, cfg.base_seed)?;
    let ts: Vec<f64> = (0..=cfg.t_max).map(|t| t as f64).collect();
    let p_fit = fit_power_law_above(&ts, &curve.p_apart, cfg.window, 0.0)?;
    let tv_fit = fit_power_law_above(&ts, &curve.tv_lower, cfg.window, 1e-15)?;
    let dominated = curve.worst_violation_se <= cfg.z;
    let fast_enough = p_fit.exponent >= tv_fit.exponent - cfg.exponent_slack;
    out.passed = dominated && fast_enough;
    out.summary = format!(
        "worst shortfall below TV bound {:.2} SE (limit {}); decay exponent {:.3} vs TV {:.3}",
        curve.worst_violation_se.max(0.0),
        cfg.z,
        p_fit.exponent,
        tv_fit.exponent
    );
    out.metric("worst_violation_se", curve.worst_violation_se)
        .metric("coupling_exponent", p_fit.exponent)
        .metric("tv_exponent", tv_fit.exponent)
        .metric("mean_meeting_time", curve.mean_meeting_time);
    Ok(out)
}

/// Check 6: calibrated Bernstein-form tail bound on held-out seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Concentration {
    pub kappa: f64,
    pub n_states: usize,
    pub lengths: Vec<usize>,
    pub epsilons: Vec<f64>,
    pub n_seeds: usize,
    pub mixing_window: (f64, f64),
    pub base_seed: u64,
}

impl Default for Concentration {
    fn default() -> Self {
        Self {
            kappa: 2.5,
            n_states: 30,
            lengths: vec![1_000, 10_000],
            epsilons: vec![0.01, 0.02, 0.05, 0.1, 0.2],
            n_seeds: 2000,
            mixing_window: (2.0, 15.0),
            base_seed: 5,
        }
    }
}

pub fn concentration(cfg: &Concentration) -> Result<Outcome> {
    let mut out = Outcome::new(6, "concentration");
    let kernel = renewal_indicator_chain(cfg.kappa, cfg.n_states)?;
    let beta = mixing_exponent(&kernel, cfg.mixing_window)?;
    let f = indicator(cfg.n_states, 0);
    let mut parts = Vec::new();
    let mut all = true;
    for &n in &cfg.lengths {
        let rep = concentration_tail(&kernel, &f, n, &cfg.epsilons, cfg.n_seeds, beta, Start::Stationary, cfg.base_seed)?;
        all &= rep.domination;
        parts.push(format!("n={n}: b={} C={:.3} {}", rep.block_size, rep.c_hat, if rep.domination { "ok" } else { "violated" }));
        out.metric(&format!("c_hat_n{n}"), rep.c_hat);
    }
    out.passed = all;
    out.summary = format!("beta_hat {beta:.3}; {}", parts.join("; "));
    out.metric("beta_hat", beta);
    Ok(out)
}

fn random_input<R: Rng>(rng: &mut R, dim: usize, radius: f64) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    let r = radius * rng.gen_range(0.0..=1.0f64);
    v.iter().map(|x| x * r / n).collect()
}

fn random_network<R: Rng>(rng: &mut R, budget: (f64, f64), seed: u64) -> Result<(ReluNetwork, Vec<f64>)> {
    let depth = rng.gen_range(1..=4usize);
    let hidden: Vec<usize> = (1..depth).map(|_| rng.gen_range(1..=6)).collect();
    let dim = rng.gen_range(1..=5usize);
    let budget = rng.gen_range(budget.0..budget.1);
    let x_max = rng.gen_range(0.5..3.0);
    let bias = rng.gen_bool(0.5);
    let x = random_input(rng, dim, x_max);
    // half the draws saturate every layer at the budget
    let scale = if rng.gen_bool(0.5) { Some(10.0 * budget) } else { None };
    let net = ReluNetwork::random(&hidden, bias, budget, x_max, Embedding::Table { inputs: vec![x.clone()] }, seed, scale)?;
    Ok((net, x))
}

/// Check 7: no within-budget network exceeds the uniform gradient bound.
///
/// The bound's proof uses `B^{n-1} <= B^n`, so it is only claimed for
/// budgets `B >= 1`; draws below 1 are counted separately for information.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientBound {
    pub draws: u64,
    pub budget_range: (f64, f64),
    /// Extra draws with `B < 1`, reported but not judged.
    pub small_budget_draws: u64,
    pub base_seed: u64,
}

impl Default for GradientBound {
    fn default() -> Self {
        Self { draws: 10_000, budget_range: (1.0, 2.0), small_budget_draws: 2_000, base_seed: 7 }
    }
}

/// `(violations, largest ||grad|| / G)` over `draws` random networks.
fn gradient_bound_sweep(draws: u64, budget: (f64, f64), seed: u64) -> Result<(u64, f64)> {
    let mut rng = seeds::rng(seeds::derive(seed, purpose::INIT, 0));
    let mut violations = 0u64;
    let mut worst = 0.0f64;
    for i in 0..draws {
        let (net, x) = random_network(&mut rng, budget, seeds::derive(seed, purpose::INIT, i + 1))?;
        let g = gradient_constants(&net, 1.0).g;
        let norm = net.grad_at(&x).iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(norm / g);
        if norm > g * (1.0 + 1e-12) {
            violations += 1;
        }
    }
    Ok((violations, worst))
}

pub fn gradient_bound(cfg: &GradientBound) -> Result<Outcome> {
    let mut out = Outcome::new(7, "uniform gradient bound");
    let (violations, worst) = gradient_bound_sweep(cfg.draws, cfg.budget_range, cfg.base_seed)?;
    let (small_v, small_worst) = gradient_bound_sweep(cfg.small_budget_draws, (0.25, 1.0), cfg.base_seed ^ 1)?;
    out.passed = violations == 0;
    out.summary = format!(
        "{violations} violations over {} draws with B in [{}, {}); largest ||grad|| / G = {worst:.4} \
         (B < 1, not judged: {small_v} of {} exceed G, worst ratio {small_worst:.3})",
        cfg.draws, cfg.budget_range.0, cfg.budget_range.1, cfg.small_budget_draws
    );
    out.metric("violations", violations as f64)
        .metric("max_ratio", worst)
        .metric("small_budget_violations", small_v as f64);
    Ok(out)
}

/// The hand-built one-unit scenario: the hidden unit switches off on the
/// first update and never returns. Returns the per-step crossing counts.
pub fn engineered_crossing() -> Result<Vec<usize>> {
    let kernel = TransitionKernel::new(vec![vec![1.0]], vec![-1.0], 1.0)?;
    let emb = Embedding::Table { inputs: vec![vec![1.0]] };
    let net = ReluNetwork::from_layers(vec![vec![vec![0.1]], vec![vec![1.0]]], false, 10.0, 1.0, emb)?;
    let cfg = TdConfig::new(StepSchedule::new(0.5, 1.0)?, 0.0, 20);
    let h = run_td(&kernel, &ValueModel::Relu(net), &cfg, 1)?;
    let (recs, _) = track_crossings(&h, &[vec![1.0]])?;
    Ok(recs.iter().map(|r| r.kappa).collect())
}

/// Check 8: probe crossings plateau on the nonlinear benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionCrossings {
    pub bench: ReluBenchmark,
    pub max_last_decade_share: f64,
    pub max_violation_rate: f64,
}

impl Default for RegionCrossings {
    fn default() -> Self {
        Self { bench: ReluBenchmark::default(), max_last_decade_share: 0.05, max_violation_rate: 0.01 }
    }
}

pub fn region_crossings(cfg: &RegionCrossings) -> Result<Outcome> {
    let mut out = Outcome::new(8, "region crossings");
    let b = &cfg.bench;
    let kernel = b.kernel()?;
    let net = b.network0()?;
    let td = b.td_config(b.crossing_steps, true)?;
    let h = run_td(&kernel, &ValueModel::Relu(net.clone()), &td, seeds::derive(b.base_seed, purpose::TRAJECTORY, u64::MAX - 1))?;
    let probes = default_probes(&net, DEFAULT_PROBES, seeds::derive(b.base_seed, purpose::PROBES, 0));
    let (_, s) = track_crossings(&h, &probes)?;
    let engineered = engineered_crossing()?;
    let single = engineered.first() == Some(&1) && engineered[1..].iter().all(|&k| k == 0);
    let share = s.last_decade_share();
    out.passed = s.total > 0 && share < cfg.max_last_decade_share && s.violation_rate() < cfg.max_violation_rate && single;
    out.summary = format!(
        "{} crossings in {} steps, last decade share {:.2}% (limit {}%); bound violations {:.3}%; engineered scenario kappa {:?}",
        s.total,
        s.steps,
        100.0 * share,
        100.0 * cfg.max_last_decade_share,
        100.0 * s.violation_rate(),
        &engineered[..engineered.len().min(3)]
    );
    out.metric("total", s.total as f64)
        .metric("last_decade_share", share)
        .metric("violation_rate", s.violation_rate())
        .metric("engineered_total", engineered.iter().sum::<usize>() as f64);
    Ok(out)
}

/// Rate fits of one benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateStudy {
    pub reports: Vec<BoundReport>,
    /// Index into `reports` of the variant closest to the measured exponent.
    pub chosen: usize,
    pub moment2_exponent: f64,
    pub fixed_point_residual: f64,
    pub beta: f64,
    pub times: Vec<f64>,
    pub quantile: Vec<f64>,
}

impl RateStudy {
    pub fn chosen_report(&self) -> &BoundReport {
        &self.reports[self.chosen]
    }
}

fn split_rate_study(
    histories: &[IterateHistory],
    theta_star: &[f64],
    specs: &[BoundSpec],
    schedule: &StepSchedule,
    burn_in: f64,
    residual: f64,
    beta: f64,
) -> Result<RateStudy> {
    let errs: Vec<Vec<f64>> = histories.iter().map(|h| h.errors(theta_star)).collect();
    let times = histories[0].checkpoint_times();
    let ts: Vec<f64> = times.iter().map(|&t| t as f64).collect();
    let half = errs.len() / 2;
    let reports: Vec<BoundReport> =
        specs.iter().map(|s| verify_bound(&errs[..half], &errs[half..], &ts, s, schedule, burn_in)).collect::<Result<_>>()?;
    let chosen = (0..reports.len())
        .min_by(|&a, &b| reports[a].exponent_gap.abs().total_cmp(&reports[b].exponent_gap.abs()))
        .unwrap_or(0);
    let m2 = moment_curve_from_errors(&times, &errs, 2, 0)?;
    let m2_fit = fit_power_law(&ts, &m2.values, (burn_in, f64::INFINITY))?;
    let pooled = crate::rates::quantile_envelope(&errs, specs[0].delta)?;
    Ok(RateStudy {
        reports,
        chosen,
        moment2_exponent: m2_fit.exponent,
        fixed_point_residual: residual,
        beta,
        times: ts,
        quantile: pooled.quantile,
    })
}

/// Quantile-rate study on the linear benchmark.
pub fn linear_rate_study(b: &LinearBenchmark) -> Result<RateStudy> {
    let kernel = b.kernel()?;
    let beta = mixing_exponent(&kernel, b.mixing_window)?;
    let star = b.theta_star(&kernel)?;
    let cfg = b.td_config(b.steps, false)?;
    let hs = run_seeds(&kernel, &b.model0(), &cfg, b.base_seed, 0..b.n_seeds)?;
    let spec = BoundSpec::new(BoundVariant::LinearHp, beta, b.eta, 1.0, 2.0, b.delta)?;
    split_rate_study(&hs, &star, &[spec], &cfg.schedule, b.burn_in, 0.0, beta)
}

/// Quantile-rate study on the ReLU benchmark, against both bound variants.
pub fn relu_rate_study(b: &ReluBenchmark) -> Result<RateStudy> {
    let kernel = b.kernel()?;
    let model0 = ValueModel::Relu(b.network0()?);
    let fp = reference_fixed_point(&kernel, &model0, b.discount, &b.reference)?;
    let cfg = b.td_config(b.steps, false)?;
    let hs = run_seeds(&kernel, &model0, &cfg, b.base_seed, 0..b.n_seeds)?;
    let specs = [
        BoundSpec::new(BoundVariant::NonlinearHp, b.beta, b.eta, b.holder_gamma, 2.0, b.delta)?,
        BoundSpec::new(BoundVariant::ReluAppendix, b.beta, b.eta, b.holder_gamma, 2.0, b.delta)?,
    ];
    split_rate_study(&hs, &fp.theta_star, &specs, &cfg.schedule, b.burn_in, fp.residual, b.beta)
}

/// Check 9: fitted tail exponents of the quantile curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateExponents {
    pub linear: LinearBenchmark,
    pub relu: ReluBenchmark,
    pub linear_tolerance: f64,
    pub relu_tolerance: f64,
}

impl Default for RateExponents {
    fn default() -> Self {
        Self { linear: LinearBenchmark::default(), relu: ReluBenchmark::default(), linear_tolerance: 0.15, relu_tolerance: 0.25 }
    }
}

pub fn rate_exponents(cfg: &RateExponents) -> Result<(Outcome, RateStudy, RateStudy)> {
    let clock = Instant::now();
    let mut out = Outcome::new(9, "rate exponents");
    let lin = linear_rate_study(&cfg.linear)?;
    let relu = relu_rate_study(&cfg.relu)?;
    let lr = lin.chosen_report();
    let rr = relu.chosen_report();
    let lin_ok = lr.exponent_gap.abs() <= cfg.linear_tolerance;
    let relu_ok = rr.exponent_gap.abs() <= cfg.relu_tolerance;
    let secs = clock.elapsed().as_secs_f64();
    out.passed = lin_ok && relu_ok;
    out.summary = format!(
        "linear: exponent {:.3} vs predicted {:.3} (beta_hat {:.3}, tol {}) {}; relu: exponent {:.3} vs {:.3} [{}] (tol {}) {}; {secs:.0}s",
        lr.quantile_exponent,
        lr.predicted_exponent,
        lin.beta,
        cfg.linear_tolerance,
        if lin_ok { "ok" } else { "off" },
        rr.quantile_exponent,
        rr.predicted_exponent,
        rr.variant.name(),
        cfg.relu_tolerance,
        if relu_ok { "ok" } else { "off" },
    );
    out.metric("linear_exponent", lr.quantile_exponent)
        .metric("linear_predicted", lr.predicted_exponent)
        .metric("linear_moment2_exponent", lin.moment2_exponent)
        .metric("relu_exponent", rr.quantile_exponent)
        .metric("relu_predicted", rr.predicted_exponent)
        .metric("relu_fixed_point_residual", relu.fixed_point_residual)
        .metric("seconds", secs);
    Ok((out, lin, relu))
}

/// Check 10: backward pass against central differences, and the kink convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub probes: usize,
    pub h: f64,
    pub tolerance: f64,
    /// Smallest `|pre-activation|` accepted, so the stencil stays in one region.
    pub kink_margin: f64,
    pub base_seed: u64,
}

impl Default for GradientCheck {
    fn default() -> Self {
        Self { probes: 1000, h: 1e-6, tolerance: 1e-5, kink_margin: 1e-3, base_seed: 10 }
    }
}

/// Relative error `||g - g_fd|| / ||g_fd||` at one input.
pub fn finite_difference_error(net: &ReluNetwork, x: &[f64], h: f64) -> f64 {
    let g = net.grad_at(x);
    let mut probe = net.clone();
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..g.len() {
        let p0 = probe.params()[i];
        probe.params_mut()[i] = p0 + h;
        let up = probe.value_at(x);
        probe.params_mut()[i] = p0 - h;
        let down = probe.value_at(x);
        probe.params_mut()[i] = p0;
        let fd = (up - down) / (2.0 * h);
        num += (g[i] - fd).powi(2);
        den += fd * fd;
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

/// A one-hidden-unit net whose pre-activation is exactly zero at `x = 1`.
/// Returns the gradient there; the closed gate zeroes every entry but the
/// output bias.
pub fn kink_gradient() -> Result<Vec<f64>> {
    let emb = Embedding::Table { inputs: vec![vec![1.0]] };
    let net = ReluNetwork::from_layers(vec![vec![vec![0.5, -0.5]], vec![vec![2.0, 0.3]]], true, 10.0, 1.0, emb)?;
    Ok(net.grad_at(&[1.0]))
}

pub fn gradient_check(cfg: &GradientCheck) -> Result<Outcome> {
    let mut out = Outcome::new(10, "gradient correctness");
    let mut rng = seeds::rng(seeds::derive(cfg.base_seed, purpose::INIT, 0));
    let mut accepted = 0usize;
    let mut worst = 0.0f64;
    let mut failures = 0usize;
    let mut i = 0u64;
    while accepted < cfg.probes {
        i += 1;
        if i > 100 * cfg.probes as u64 {
            return Err(Error::Numerical("could not find probes away from kinks".into()));
        }
        let (net, x) = random_network(&mut rng, (0.5, 2.0), seeds::derive(cfg.base_seed, purpose::INIT, i))?;
        let fwd = net.forward(&x);
        let hidden = &fwd.pre[..fwd.pre.len() - 1];
        if hidden.iter().flatten().any(|z| z.abs() < cfg.kink_margin) {
            continue;
        }
        accepted += 1;
        let e = finite_difference_error(&net, &x, cfg.h);
        worst = worst.max(e);
        if e > cfg.tolerance {
            failures += 1;
        }
    }
    let kink = kink_gradient()?;
    let kink_ok = kink[..3].iter().all(|&g| g == 0.0) && kink[3] == 1.0;
    out.passed = failures == 0 && kink_ok;
    out.summary = format!(
        "{failures} of {accepted} probes above rel. error {} (worst {worst:.2e}); gate at kink {}",
        cfg.tolerance,
        if kink_ok { "closed" } else { "open" }
    );
    out.metric("worst_rel_error", worst).metric("failures", failures as f64);
    Ok(out)
}

/// Part of check 11 inside the library: the Monte-Carlo stages serialise to
/// identical bytes under different worker counts.
pub fn thread_invariance(threads: &[usize]) -> Result<Outcome> {
    let mut out = Outcome::new(11, "determinism");
    let run = || -> Result<String> {
        let b = LinearBenchmark { steps: 2_000, ..LinearBenchmark::default() };
        let kernel = b.kernel()?;
        let hs = run_seeds(&kernel, &b.model0(), &b.td_config(b.steps, false)?, b.base_seed, 0..4)?;
        let cc = coupling_curve(&kernel, 0, 3, 50, 500, 1)?;
        let conc = concentration_tail(&kernel, &indicator(kernel.n_states(), 0), 200, &[0.05, 0.1], 1000, 1.5, Start::Stationary, 2)?;
        let mut s = String::new();
        for h in &hs {
            s.push_str(&h.to_json()?);
        }
        s.push_str(&serde_json::to_string(&cc)?);
        s.push_str(&serde_json::to_string(&conc)?);
        Ok(s)
    };
    let mut outputs = Vec::new();
    for &t in threads {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
        outputs.push(pool.install(run)?);
    }
    let same = outputs.windows(2).all(|w| w[0] == w[1]);
    out.passed = same;
    out.summary = format!("library outputs under {threads:?} worker threads {}", if same { "identical" } else { "differ" });
    out.metric("variants", threads.len() as f64);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outcome_line_format() {
        let mut o = Outcome::new(3, "demo");
        o.summary = "fine".into();
        assert_eq!(o.line(), "criterion  3 [demo]: FAIL - fine");
        o.passed = true;
        assert!(o.line().contains("PASS"));
    }

    #[test]
    fn benchmark_chains_mix_as_configured() {
        let b = LinearBenchmark::default();
        let beta = mixing_exponent(&b.kernel().unwrap(), b.mixing_window).unwrap();
        assert!((beta - (b.kappa - 1.0)).abs() < 0.2, "{beta}");
    }

    #[test]
    fn engineered_scenario_crosses_once() {
        let k = engineered_crossing().unwrap();
        assert_eq!(k[0], 1);
        assert_eq!(k.iter().sum::<usize>(), 1);
    }

    #[test]
    fn kink_gate_is_closed() {
        let g = kink_gradient().unwrap();
        assert_eq!(g, vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn reduced_checks_pass() {
        let fp = fixed_point_oracle(&FixedPointOracle { n_kernels: 3, seeds_per_kernel: 3, steps: 200_000, c_alpha: 3.0, max_ratio: 0.1, required: 3, ..Default::default() })
            .unwrap();
        assert!(fp.passed, "{}", fp.line());
        assert!(ergodicity(&Ergodicity::default()).unwrap().passed);
        let gb = gradient_bound(&GradientBound { draws: 500, small_budget_draws: 100, ..Default::default() }).unwrap();
        assert!(gb.passed, "{}", gb.line());
        let gc = gradient_check(&GradientCheck { probes: 100, ..Default::default() }).unwrap();
        assert!(gc.passed, "{}", gc.line());
    }

    #[test]
    fn reduced_martingale_check() {
        let cfg = MartingaleStructure { n_seeds: 2, steps: 20_000, min_count: 50, ..Default::default() };
        let o = martingale_structure(&cfg).unwrap();
        assert!(o.metrics["reconstruction_error"] <= 1e-10, "{}", o.line());
        assert!(o.metrics["bins"] >= 8.0, "{}", o.line());
    }

    #[test]
    fn threads_do_not_change_outputs() {
        assert!(thread_invariance(&[1, 3]).unwrap().passed);
    }
}
