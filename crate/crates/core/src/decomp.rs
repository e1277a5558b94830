//! Fixed points, the martingale/remainder split of the TD error, and
//! across-seed variance and moment curves.
//!
//! The conditional mean of the TD error given the current state and iterate is
//! computed exactly from the kernel row, so the martingale part is a true
//! martingale rather than an estimate of one.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::approx::{FeatureMap, ValueModel};
use crate::chain::TransitionKernel;
use crate::error::{Error, Result};
use crate::seeds::{self, purpose};
use crate::stats::{self, CompensatedSum, Interval};
use crate::td::{self, dist, run_td, IterateHistory, StepSchedule, TdConfig};

pub const MIN_SEEDS: usize = 30;
const BOOTSTRAP_RESAMPLES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FixedPointMethod {
    DirectSolve,
    LongRunAverage,
}

/// A TD fixed point and the norm of the (projected) expected update there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPoint {
    pub theta_star: Vec<f64>,
    pub residual: f64,
    pub method: FixedPointMethod,
}

/// Solve `Phi^T D (Phi - discount P Phi) theta = Phi^T D r` with `D = diag(pi)`.
pub fn linear_fixed_point(kernel: &TransitionKernel, features: &FeatureMap, discount: f64) -> Result<FixedPoint> {
    let n = kernel.n_states();
    if features.n_states() != n {
        return Err(Error::DimensionMismatch { what: "feature rows", expected: n, found: features.n_states() });
    }
    let d = features.dim();
    let pi = kernel.stationary()?;
    let phi = DMatrix::from_row_slice(n, d, features.as_flat());
    let p = DMatrix::from_fn(n, n, |i, j| kernel.prob(i, j));
    let dphi = DMatrix::from_fn(n, d, |i, j| pi[i] * phi[(i, j)]);
    let a = dphi.transpose() * (&phi - discount * &p * &phi);
    let r = DVector::from_column_slice(kernel.rewards());
    let b = dphi.transpose() * r;
    let sv = a.clone().singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    if !(smin > 1e-12 * smax.max(1e-300)) {
        return Err(Error::SingularSystem(format!("smallest singular value {smin:e} vs largest {smax:e}")));
    }
    let theta = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::SingularSystem("LU solve failed".into()))?;
    let theta_star: Vec<f64> = theta.iter().copied().collect();
    let model = ValueModel::Linear(crate::approx::LinearModel::new(features.clone().into(), theta_star.clone())?);
    let residual = approx_norm(&expected_update(kernel, &model, discount)?);
    Ok(FixedPoint { theta_star, residual, method: FixedPointMethod::DirectSolve })
}

fn approx_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `E[delta | s] = r(s) + discount * sum_j P(s, j) f(j) - f(s)`.
pub fn conditional_td_error(kernel: &TransitionKernel, model: &ValueModel, s: usize, discount: f64) -> f64 {
    let next: f64 = kernel
        .row(s)
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0.0)
        .map(|(j, &p)| p * model.value(j))
        .sum();
    kernel.rewards()[s] + discount * next - model.value(s)
}

/// `Var(delta | s) = discount^2 Var_{j ~ P(s, .)} f(j)`.
pub fn conditional_td_variance(kernel: &TransitionKernel, model: &ValueModel, s: usize, discount: f64) -> f64 {
    let (mut m1, mut m2) = (0.0, 0.0);
    for (j, &p) in kernel.row(s).iter().enumerate() {
        if p > 0.0 {
            let v = model.value(j);
            m1 += p * v;
            m2 += p * v * v;
        }
    }
    discount * discount * (m2 - m1 * m1).max(0.0)
}

/// Mean update direction given the current state: `E[delta | s] grad f(s)`.
pub fn conditional_update(kernel: &TransitionKernel, model: &ValueModel, s: usize, discount: f64) -> Vec<f64> {
    let e = conditional_td_error(kernel, model, s, discount);
    model.grad(s).into_iter().map(|g| e * g).collect()
}

/// Stationary mean update direction `sum_s pi(s) E[delta | s] grad f(s)`.
pub fn expected_update(kernel: &TransitionKernel, model: &ValueModel, discount: f64) -> Result<Vec<f64>> {
    if model.n_states() != kernel.n_states() {
        return Err(Error::DimensionMismatch { what: "model states", expected: kernel.n_states(), found: model.n_states() });
    }
    let pi = kernel.stationary()?;
    let values = model.values();
    let next = kernel.apply(&values);
    let mut acc = vec![CompensatedSum::new(); model.n_params()];
    for s in 0..kernel.n_states() {
        let e = kernel.rewards()[s] + discount * next[s] - values[s];
        let w = pi[s] * e;
        if w == 0.0 {
            continue;
        }
        for (a, g) in acc.iter_mut().zip(model.grad(s)) {
            a.add(w * g);
        }
    }
    Ok(acc.iter().map(|a| a.value()).collect())
}

/// Long reference run used as the fixed point of a nonlinear model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRun {
    pub steps: u64,
    pub c_alpha: f64,
    pub eta: f64,
    pub seed: u64,
    /// Deterministic expected-update iterations applied to the run's tail average.
    pub polish_iters: usize,
    pub polish_step: f64,
}

impl Default for ReferenceRun {
    fn default() -> Self {
        Self { steps: 10_000_000, c_alpha: 0.05, eta: 0.9, seed: 0, polish_iters: 20_000, polish_step: 0.5 }
    }
}

/// Reference fixed point for any model: a long small-step TD run, averaged
/// over its second half, then refined by projected mean-field iterations
/// `theta <- Proj(theta + h * expected_update(theta))`.
pub fn reference_fixed_point(
    kernel: &TransitionKernel,
    model0: &ValueModel,
    discount: f64,
    run: &ReferenceRun,
) -> Result<FixedPoint> {
    let mut cfg = TdConfig::new(StepSchedule::new(run.c_alpha, run.eta)?, discount, run.steps);
    cfg.checkpoints = td::Checkpoints::Every(run.steps);
    cfg.record_stream = false;
    let half = run.steps / 2;
    let mut avg = vec![CompensatedSum::new(); model0.n_params()];
    let mut count = 0u64;
    let seed = seeds::derive(run.seed, purpose::TRAJECTORY, u64::MAX);
    td::run_td_observed(kernel, model0, &cfg, seed, |k, m, _| {
        if k > half {
            count += 1;
            for (a, &p) in avg.iter_mut().zip(m.params()) {
                a.add(p);
            }
        }
        Ok(())
    })?;
    let theta: Vec<f64> = avg.iter().map(|a| a.value() / count.max(1) as f64).collect();
    let mut model = model0.with_params(&theta)?;
    project(&mut model);
    for _ in 0..run.polish_iters {
        let g = expected_update(kernel, &model, discount)?;
        for (p, gi) in model.params_mut().iter_mut().zip(&g) {
            *p += run.polish_step * gi;
        }
        project(&mut model);
    }
    // residual of the projected map, which is what the polishing drives to zero
    let g = expected_update(kernel, &model, discount)?;
    let mut stepped = model.clone();
    for (p, gi) in stepped.params_mut().iter_mut().zip(&g) {
        *p += run.polish_step * gi;
    }
    project(&mut stepped);
    let moved: Vec<f64> = stepped.params().iter().zip(model.params()).map(|(a, b)| (a - b) / run.polish_step).collect();
    let residual = approx_norm(&moved);
    Ok(FixedPoint { theta_star: model.params().to_vec(), residual, method: FixedPointMethod::LongRunAverage })
}

fn project(model: &mut ValueModel) {
    if let ValueModel::Relu(net) = model {
        net.project_in_place();
    }
}

/// Martingale and remainder parts of the error at each checkpoint.
///
/// `martingale[i]` is `M_t = sum_{k <= t} d_k` and `remainder[i]` is the sum of
/// the predictable drift and projection corrections, so that
/// `theta_0 - theta* + M_t + R_t = theta_t - theta*`. The other convention,
/// with `theta_0 - theta*` folded into the remainder, is
/// [`Decomposition::remainder_with_init`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub seed: u64,
    pub times: Vec<u64>,
    pub errors: Vec<f64>,
    pub martingale: Vec<Vec<f64>>,
    pub remainder: Vec<Vec<f64>>,
    /// `theta_0 - theta*`
    pub init_offset: Vec<f64>,
    /// Predictable quadratic variation `sum_k alpha_k^2 Var(delta_k | s_k) ||grad_k||^2`.
    pub bracket: Vec<f64>,
    /// `||d_k||` for every step.
    pub increment_norms: Vec<f64>,
    /// Largest `||theta_0 - theta* + M_t + R_t - e_t||` over checkpoints.
    pub reconstruction_error: f64,
}

impl Decomposition {
    pub fn norm_m(&self) -> Vec<f64> {
        self.martingale.iter().map(|m| approx_norm(m)).collect()
    }

    pub fn norm_r(&self) -> Vec<f64> {
        self.remainder.iter().map(|r| approx_norm(r)).collect()
    }

    /// `R_t + theta_0 - theta*`, i.e. `e_t - M_t`.
    pub fn remainder_with_init(&self) -> Vec<Vec<f64>> {
        self.remainder
            .iter()
            .map(|r| r.iter().zip(&self.init_offset).map(|(a, b)| a + b).collect())
            .collect()
    }

    /// CSV `t,err,norm_M,norm_R`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,err,norm_M,norm_R")?;
        for (((t, e), m), r) in self.times.iter().zip(&self.errors).zip(self.norm_m()).zip(self.norm_r()) {
            writeln!(w, "{t},{e:?},{m:?},{r:?}")?;
        }
        Ok(())
    }
}

/// Split the recorded run into martingale and remainder parts.
pub fn decompose(history: &IterateHistory, kernel: &TransitionKernel, theta_star: &[f64]) -> Result<Decomposition> {
    decompose_visit(history, kernel, theta_star, |_, _, _| {})
}

/// [`decompose`], also handing each increment `(k, s_k, d_k)` to `visit`.
pub fn decompose_visit(
    history: &IterateHistory,
    kernel: &TransitionKernel,
    theta_star: &[f64],
    mut visit: impl FnMut(u64, usize, &[f64]),
) -> Result<Decomposition> {
    let stream = history.stream()?;
    let dim = history.model0.n_params();
    if theta_star.len() != dim {
        return Err(Error::DimensionMismatch { what: "theta*", expected: dim, found: theta_star.len() });
    }
    let discount = history.config.discount;
    let init_offset: Vec<f64> = history.model0.params().iter().zip(theta_star).map(|(a, b)| a - b).collect();
    let mut m_acc = vec![CompensatedSum::new(); dim];
    let mut r_acc = vec![CompensatedSum::new(); dim];
    let mut bracket = CompensatedSum::new();
    let mut d = vec![0.0; dim];
    let mut increment_norms = Vec::with_capacity(history.alphas.len());
    let cps = &history.checkpoints;
    let mut times = Vec::with_capacity(cps.len());
    let mut errors = Vec::with_capacity(cps.len());
    let mut martingale = Vec::with_capacity(cps.len());
    let mut remainder = Vec::with_capacity(cps.len());
    let mut brackets = Vec::with_capacity(cps.len());
    let mut recon = 0.0f64;
    let mut cp = 0usize;

    let mut record = |t: u64, m_acc: &[CompensatedSum], r_acc: &[CompensatedSum], bracket: f64, cp: &mut usize| {
        while *cp < cps.len() && cps[*cp].t == t {
            let theta = &cps[*cp].theta;
            let m: Vec<f64> = m_acc.iter().map(|a| a.value()).collect();
            let r: Vec<f64> = r_acc.iter().map(|a| a.value()).collect();
            let mut err2 = 0.0;
            for i in 0..dim {
                let e = theta[i] - theta_star[i];
                let gap = init_offset[i] + m[i] + r[i] - e;
                err2 += gap * gap;
            }
            recon = recon.max(err2.sqrt());
            times.push(t);
            errors.push(dist(theta, theta_star));
            martingale.push(m);
            remainder.push(r);
            brackets.push(bracket);
            *cp += 1;
        }
    };
    record(0, &m_acc, &r_acc, 0.0, &mut cp);

    history.replay(|k, before, after, info| {
        let i = (k - 1) as usize;
        let s = stream.states[i];
        let alpha = history.alphas[i];
        let mean = conditional_td_error(kernel, before, s, discount);
        let grad = before.grad(s);
        let centred = alpha * (info.delta - mean);
        let mut g2 = 0.0;
        for j in 0..dim {
            d[j] = centred * grad[j];
            g2 += grad[j] * grad[j];
            m_acc[j].add(d[j]);
            r_acc[j].add((after.params()[j] - before.params()[j]) - d[j]);
        }
        bracket.add(alpha * alpha * conditional_td_variance(kernel, before, s, discount) * g2);
        increment_norms.push(centred.abs() * g2.sqrt());
        visit(k, s, &d);
        record(k, &m_acc, &r_acc, bracket.value(), &mut cp);
        Ok(())
    })?;

    Ok(Decomposition {
        seed: history.seed,
        times,
        errors,
        martingale,
        remainder,
        init_offset,
        bracket: brackets,
        increment_norms,
        reconstruction_error: recon,
    })
}

/// Sample mean of `d_k / alpha_k` in one `(state, time bin, component)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementBin {
    pub state: usize,
    pub time_bin: usize,
    pub component: usize,
    pub count: usize,
    pub mean: f64,
    pub se: f64,
}

/// Binned conditional-mean check of the martingale increments, pooled over runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedIncrements {
    pub bins: Vec<IncrementBin>,
    pub z: f64,
    /// Bins with `|mean| <= z * se`.
    pub within: usize,
    /// Largest reconstruction error over the runs.
    pub reconstruction_error: f64,
}

impl BinnedIncrements {
    pub fn share_within(&self) -> f64 {
        if self.bins.is_empty() {
            return 1.0;
        }
        self.within as f64 / self.bins.len() as f64
    }
}

#[derive(Clone, Default)]
struct Moments {
    n: usize,
    sum: CompensatedSum,
    sq: CompensatedSum,
}

/// Decompose every run and test that the increments average to zero within
/// each `(s_k, time bin)` cell.
///
/// Time bins are log-spaced over `1..=T`. Only cells with at least `min_count`
/// entries and positive sample variance are tested; cells that are zero by
/// construction (a feature that vanishes at that state) carry no information.
pub fn binned_increments(
    histories: &[IterateHistory],
    kernel: &TransitionKernel,
    theta_star: &[f64],
    time_bins: usize,
    min_count: usize,
    z: f64,
) -> Result<BinnedIncrements> {
    let first = histories.first().ok_or(Error::InsufficientSeeds { needed: 1, got: 0 })?;
    let n = kernel.n_states();
    let dim = first.model0.n_params();
    let time_bins = time_bins.max(1);
    let steps = first.steps().max(2) as f64;
    let mut cells = vec![Moments::default(); n * time_bins * dim];
    let mut recon = 0.0f64;
    for h in histories {
        let d = decompose_visit(h, kernel, theta_star, |k, s, d| {
            let tb = (((k as f64).ln() / steps.ln()) * time_bins as f64) as usize;
            let tb = tb.min(time_bins - 1);
            let a = h.alphas[(k - 1) as usize];
            if a == 0.0 {
                return;
            }
            for (j, x) in d.iter().enumerate() {
                let c = &mut cells[(s * time_bins + tb) * dim + j];
                let v = x / a;
                c.n += 1;
                c.sum.add(v);
                c.sq.add(v * v);
            }
        })?;
        recon = recon.max(d.reconstruction_error);
    }
    let mut bins = Vec::new();
    for (idx, c) in cells.iter().enumerate() {
        if c.n < min_count.max(2) {
            continue;
        }
        let nf = c.n as f64;
        let mean = c.sum.value() / nf;
        let var = ((c.sq.value() - nf * mean * mean) / (nf - 1.0)).max(0.0);
        if var <= 0.0 {
            continue;
        }
        bins.push(IncrementBin {
            state: idx / (time_bins * dim),
            time_bin: (idx / dim) % time_bins,
            component: idx % dim,
            count: c.n,
            mean,
            se: (var / nf).sqrt(),
        });
    }
    let within = bins.iter().filter(|b| b.mean.abs() <= z * b.se).count();
    Ok(BinnedIncrements { bins, z, within, reconstruction_error: recon })
}

/// A per-checkpoint statistic across seeds with a 95% interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedCurve {
    pub times: Vec<u64>,
    pub values: Vec<f64>,
    pub ci: Vec<Interval>,
    pub n_seeds: usize,
}

impl SeedCurve {
    pub fn times_f64(&self) -> Vec<f64> {
        self.times.iter().map(|&t| t as f64).collect()
    }
}

fn shared_times<'a>(mut it: impl Iterator<Item = &'a [u64]>) -> Result<&'a [u64]> {
    let first = it.next().ok_or(Error::InsufficientSeeds { needed: MIN_SEEDS, got: 0 })?;
    for t in it {
        if t != first {
            return Err(Error::DimensionMismatch { what: "checkpoint grid", expected: first.len(), found: t.len() });
        }
    }
    Ok(first)
}

/// Mean of `||M_t||^2` across seeds with bootstrap intervals.
pub fn martingale_variance_curve(decomps: &[Decomposition], seed: u64) -> Result<SeedCurve> {
    if decomps.len() < MIN_SEEDS {
        return Err(Error::InsufficientSeeds { needed: MIN_SEEDS, got: decomps.len() });
    }
    let times = shared_times(decomps.iter().map(|d| d.times.as_slice()))?.to_vec();
    let sq: Vec<Vec<f64>> = decomps
        .iter()
        .map(|d| d.martingale.iter().map(|m| m.iter().map(|x| x * x).sum()).collect())
        .collect();
    let mut values = Vec::with_capacity(times.len());
    let mut ci = Vec::with_capacity(times.len());
    for i in 0..times.len() {
        let col: Vec<f64> = sq.iter().map(|c| c[i]).collect();
        values.push(stats::mean(&col));
        ci.push(stats::bootstrap_mean_ci(&col, BOOTSTRAP_RESAMPLES, 0.95, seeds::derive(seed, purpose::BOOTSTRAP, i as u64)));
    }
    Ok(SeedCurve { times, values, ci, n_seeds: decomps.len() })
}

/// `(E ||theta_t - theta*||^p)^{1/p}` across seeds, `p` in {2, 4}.
pub fn moment_curve(histories: &[IterateHistory], theta_star: &[f64], p: u32, seed: u64) -> Result<SeedCurve> {
    if p != 2 && p != 4 {
        return Err(Error::InvalidParameter(format!("moment order must be 2 or 4, got {p}")));
    }
    if histories.len() < MIN_SEEDS {
        return Err(Error::InsufficientSeeds { needed: MIN_SEEDS, got: histories.len() });
    }
    let times_v: Vec<Vec<u64>> = histories.iter().map(|h| h.checkpoint_times()).collect();
    let times = shared_times(times_v.iter().map(|t| t.as_slice()))?.to_vec();
    let errs: Vec<Vec<f64>> = histories.iter().map(|h| h.errors(theta_star)).collect();
    moment_curve_from_errors(&times, &errs, p, seed)
}

/// [`moment_curve`] from precomputed error curves `errs[seed][checkpoint]`.
pub fn moment_curve_from_errors(times: &[u64], errs: &[Vec<f64>], p: u32, seed: u64) -> Result<SeedCurve> {
    if errs.len() < MIN_SEEDS {
        return Err(Error::InsufficientSeeds { needed: MIN_SEEDS, got: errs.len() });
    }
    let inv = 1.0 / p as f64;
    let mut values = Vec::with_capacity(times.len());
    let mut ci = Vec::with_capacity(times.len());
    for i in 0..times.len() {
        let col: Vec<f64> = errs.iter().map(|e| e[i].powi(p as i32)).collect();
        values.push(stats::mean(&col).powf(inv));
        let c = stats::bootstrap_mean_ci(&col, BOOTSTRAP_RESAMPLES, 0.95, seeds::derive(seed, purpose::BOOTSTRAP, i as u64));
        ci.push(Interval { lo: c.lo.powf(inv), hi: c.hi.powf(inv) });
    }
    Ok(SeedCurve { times: times.to_vec(), values, ci, n_seeds: errs.len() })
}

/// Finite-difference Jacobian of minus the expected update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateJacobian {
    pub dim: usize,
    /// Row-major `H = -d expected_update / d theta`.
    pub h: Vec<f64>,
    /// Eigenvalues of `(H + H^T) / 2`, ascending.
    pub sym_eigenvalues: Vec<f64>,
    pub lambda_min: f64,
    pub positive_definite: bool,
}

impl UpdateJacobian {
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.h[i * self.dim + j]
    }
}

/// Central differences of [`expected_update`] with probe scale `h`.
/// Perturbed networks are evaluated without projection.
pub fn estimate_update_jacobian(kernel: &TransitionKernel, model: &ValueModel, discount: f64, h: f64) -> Result<UpdateJacobian> {
    if !(h > 0.0) {
        return Err(Error::InvalidParameter(format!("probe scale must be positive, got {h}")));
    }
    let dim = model.n_params();
    let mut jac = DMatrix::zeros(dim, dim);
    let mut probe = model.clone();
    for j in 0..dim {
        let base = model.params()[j];
        probe.params_mut()[j] = base + h;
        let up = expected_update(kernel, &probe, discount)?;
        probe.params_mut()[j] = base - h;
        let down = expected_update(kernel, &probe, discount)?;
        probe.params_mut()[j] = base;
        for i in 0..dim {
            jac[(i, j)] = -(up[i] - down[i]) / (2.0 * h);
        }
    }
    let sym = (&jac + jac.transpose()) * 0.5;
    let mut eig: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
    eig.sort_by(|a, b| a.total_cmp(b));
    let lambda_min = eig.first().copied().unwrap_or(f64::NAN);
    let mut h_flat = Vec::with_capacity(dim * dim);
    for i in 0..dim {
        for j in 0..dim {
            h_flat.push(jac[(i, j)]);
        }
    }
    Ok(UpdateJacobian { dim, h: h_flat, sym_eigenvalues: eig, lambda_min, positive_definite: lambda_min > 0.0 })
}

/// Run `n_seeds` independent TD runs with derived seeds.
pub fn run_seeds(
    kernel: &TransitionKernel,
    model0: &ValueModel,
    cfg: &TdConfig,
    base_seed: u64,
    seed_range: std::ops::Range<u64>,
) -> Result<Vec<IterateHistory>> {
    seed_range
        .map(|i| run_td(kernel, model0, cfg, seeds::derive(base_seed, purpose::TRAJECTORY, i)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approx::{Embedding, LinearModel, ReluNetwork};
    use crate::chain::{make_iid_chain, make_random_chain, make_renewal_chain, sample_trajectory, Start};
    use crate::td::Checkpoints;
    use approx::assert_abs_diff_eq;
    use std::sync::Arc;

    fn linear(features: FeatureMap, theta: Vec<f64>) -> ValueModel {
        ValueModel::Linear(LinearModel::new(Arc::new(features), theta).unwrap())
    }

    fn cycle(n: usize) -> TransitionKernel {
        let rows = (0..n).map(|i| (0..n).map(|j| if j == (i + 1) % n { 1.0 } else { 0.0 }).collect()).collect();
        TransitionKernel::new(rows, (0..n).map(|i| i as f64 / n as f64).collect(), 1.0).unwrap()
    }

    fn bellman(kernel: &TransitionKernel, discount: f64) -> Vec<f64> {
        let n = kernel.n_states();
        let a = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 } - discount * kernel.prob(i, j));
        let v = a.lu().solve(&DVector::from_column_slice(kernel.rewards())).unwrap();
        v.iter().copied().collect()
    }

    #[test]
    fn tabular_fixed_point_is_the_value_function() {
        let k = make_random_chain(6, 3).unwrap();
        let fp = linear_fixed_point(&k, &FeatureMap::tabular(6), 0.9).unwrap();
        for (a, b) in fp.theta_star.iter().zip(bellman(&k, 0.9)) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-10);
        }
        assert!(fp.residual <= 1e-10);
        let fp0 = linear_fixed_point(&k, &FeatureMap::tabular(6), 0.0).unwrap();
        for (a, b) in fp0.theta_star.iter().zip(k.rewards()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
    }

    #[test]
    fn two_feature_fixed_point_matches_iterative_root() {
        let k = make_random_chain(3, 11).unwrap();
        let f = FeatureMap::random(3, 2, 7).unwrap();
        let fp = linear_fixed_point(&k, &f, 0.8).unwrap();
        // independent oracle: the deterministic mean-field recursion
        let mut m = linear(f.clone(), vec![0.0, 0.0]);
        for _ in 0..200_000 {
            let g = expected_update(&k, &m, 0.8).unwrap();
            for (p, gi) in m.params_mut().iter_mut().zip(&g) {
                *p += 0.5 * gi;
            }
        }
        for (a, b) in fp.theta_star.iter().zip(m.params()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-8);
        }
        assert!(fp.residual < 1e-8);
    }

    #[test]
    fn rank_deficient_features_are_singular() {
        let k = make_random_chain(4, 1).unwrap();
        let f = FeatureMap::new(vec![vec![1.0, 2.0]; 4]).unwrap();
        assert!(matches!(linear_fixed_point(&k, &f, 0.5), Err(Error::SingularSystem(_))));
    }

    #[test]
    fn expected_update_closed_forms() {
        let k = make_random_chain(5, 4).unwrap();
        let fp = linear_fixed_point(&k, &FeatureMap::random(5, 3, 2).unwrap(), 0.7).unwrap();
        let m = linear(FeatureMap::random(5, 3, 2).unwrap(), fp.theta_star.clone());
        assert!(approx_norm(&expected_update(&k, &m, 0.7).unwrap()) <= 1e-10);
        let theta = vec![0.3, -0.2, 0.5, 1.0, 0.0];
        let m = linear(FeatureMap::tabular(5), theta.clone());
        let g = expected_update(&k, &m, 0.0).unwrap();
        let pi = k.stationary().unwrap();
        for s in 0..5 {
            assert_abs_diff_eq!(g[s], pi[s] * (k.rewards()[s] - theta[s]), epsilon = 1e-14);
        }
    }

    #[test]
    fn expected_update_matches_monte_carlo() {
        let k = make_random_chain(4, 8).unwrap();
        let m = linear(FeatureMap::random(4, 2, 5).unwrap(), vec![0.4, -0.7]);
        let exact = expected_update(&k, &m, 0.9).unwrap();
        let traj = sample_trajectory(&k, Start::Stationary, 2_000_000, 17).unwrap();
        let mut xs: Vec<Vec<f64>> = (0..2).map(|_| Vec::with_capacity(traj.len())).collect();
        for (s, r, s2) in traj.transitions() {
            let delta = td::td_error(&m, s, r, s2, 0.9);
            for (x, g) in xs.iter_mut().zip(m.grad(s)) {
                x.push(delta * g);
            }
        }
        for (j, x) in xs.iter().enumerate() {
            // batch means absorb the serial correlation
            let batches: Vec<f64> = x.chunks(10_000).map(stats::mean).collect();
            let se = stats::std_error(&batches);
            assert!((stats::mean(x) - exact[j]).abs() <= 4.0 * se, "{j}: {} vs {}", stats::mean(x), exact[j]);
        }
    }

    #[test]
    fn td_error_at_fixed_point_is_centred() {
        let k = make_random_chain(5, 21).unwrap();
        let f = FeatureMap::random(5, 3, 9).unwrap();
        let fp = linear_fixed_point(&k, &f, 0.8).unwrap();
        let m = linear(f, fp.theta_star);
        let traj = sample_trajectory(&k, Start::Stationary, 1_000_000, 5).unwrap();
        let mut xs: Vec<Vec<f64>> = (0..3).map(|_| Vec::with_capacity(traj.len())).collect();
        for (s, r, s2) in traj.transitions() {
            let delta = td::td_error(&m, s, r, s2, 0.8);
            for (x, g) in xs.iter_mut().zip(m.grad(s)) {
                x.push(delta * g);
            }
        }
        for x in &xs {
            let batches: Vec<f64> = x.chunks(10_000).map(stats::mean).collect();
            assert!(stats::mean(x).abs() <= 4.0 * stats::std_error(&batches));
        }
    }

    fn stream_cfg(steps: u64, eta: f64, discount: f64) -> TdConfig {
        let mut cfg = TdConfig::new(StepSchedule::new(0.5, eta).unwrap(), discount, steps);
        cfg.record_stream = true;
        cfg
    }

    #[test]
    fn deterministic_kernel_has_no_martingale_part() {
        let k = cycle(4);
        let m0 = linear(FeatureMap::tabular(4), vec![0.0; 4]);
        let h = run_td(&k, &m0, &stream_cfg(2000, 0.8, 0.9), 1).unwrap();
        let star = linear_fixed_point(&k, &FeatureMap::tabular(4), 0.9).unwrap().theta_star;
        let d = decompose(&h, &k, &star).unwrap();
        assert!(d.increment_norms.iter().all(|&x| x == 0.0));
        assert!(d.norm_m().iter().all(|&x| x == 0.0));
        for (r, e) in d.remainder_with_init().iter().zip(&d.errors) {
            assert_abs_diff_eq!(approx_norm(r), *e, epsilon = 1e-10);
        }
    }

    #[test]
    fn reconstruction_identity_holds() {
        let k = make_renewal_chain(2.5, 30, |s| if s == 0 { 1.0 } else { -0.1 }).unwrap();
        let f = FeatureMap::random(30, 4, 3).unwrap();
        let star = linear_fixed_point(&k, &f, 0.9).unwrap().theta_star;
        let h = run_td(&k, &linear(f, vec![0.0; 4]), &stream_cfg(100_000, 0.7, 0.9), 9).unwrap();
        let d = decompose(&h, &k, &star).unwrap();
        assert!(d.reconstruction_error <= 1e-10, "{}", d.reconstruction_error);
        assert_eq!(d.times, h.checkpoint_times());

        let net = ReluNetwork::random(&[6], true, 2.0, 1.0, Embedding::OneHot { n_states: 30, scale: 1.0 }, 4, None).unwrap();
        let h = run_td(&k, &ValueModel::Relu(net), &stream_cfg(20_000, 0.8, 0.9), 2).unwrap();
        let d = decompose(&h, &k, &vec![0.0; h.model0.n_params()]).unwrap();
        assert!(d.reconstruction_error <= 1e-10, "{}", d.reconstruction_error);
    }

    #[test]
    fn decompose_requires_stream() {
        let k = make_random_chain(3, 1).unwrap();
        let m0 = linear(FeatureMap::tabular(3), vec![0.0; 3]);
        let mut cfg = TdConfig::new(StepSchedule::new(0.5, 0.8).unwrap(), 0.5, 10);
        cfg.record_stream = false;
        let h = run_td(&k, &m0, &cfg, 1).unwrap();
        assert!(matches!(decompose(&h, &k, &[0.0; 3]), Err(Error::MissingStepData)));
    }

    #[test]
    fn binned_increments_are_centred() {
        let k = make_random_chain(4, 6).unwrap();
        let f = FeatureMap::tabular(4);
        let star = linear_fixed_point(&k, &f, 0.9).unwrap().theta_star;
        let h = run_td(&k, &linear(f, vec![0.0; 4]), &stream_cfg(400_000, 0.7, 0.9), 3).unwrap();
        // bins: (state, quarter of the run); per-component increments scaled by 1/alpha
        let steps = h.steps();
        let mut bins = vec![vec![Vec::new(); 4 * 4]; 4];
        decompose_visit(&h, &k, &star, |kk, s, d| {
            let b = s * 4 + (((kk - 1) * 4) / steps) as usize;
            let a = h.alphas[(kk - 1) as usize];
            for (j, x) in d.iter().enumerate() {
                bins[j][b].push(x / a);
            }
        })
        .unwrap();
        for comp in &bins {
            for bin in comp.iter().filter(|b| b.len() > 100) {
                let se = stats::std_error(bin);
                assert!(stats::mean(bin).abs() <= 4.0 * se + 1e-15);
            }
        }
    }

    #[test]
    fn pooled_bins_are_centred() {
        let k = make_random_chain(3, 8).unwrap();
        let f = FeatureMap::tabular(3);
        let star = linear_fixed_point(&k, &f, 0.9).unwrap().theta_star;
        let hs = run_seeds(&k, &linear(f, vec![0.0; 3]), &stream_cfg(50_000, 0.7, 0.9), 4, 0..4).unwrap();
        let b = binned_increments(&hs, &k, &star, 5, 200, 4.0).unwrap();
        // tabular increments live only in the visited state's component
        assert!(b.bins.iter().all(|x| x.state == x.component));
        assert!(b.bins.len() >= 9);
        assert!(b.share_within() >= 0.9);
        assert!(b.reconstruction_error <= 1e-10);
    }

    fn decomps(k: &TransitionKernel, m0: &ValueModel, cfg: &TdConfig, star: &[f64], n: u64) -> Vec<Decomposition> {
        run_seeds(k, m0, cfg, 77, 0..n).unwrap().iter().map(|h| decompose(h, k, star).unwrap()).collect()
    }

    #[test]
    fn martingale_variance_matches_bracket() {
        let k = make_iid_chain(vec![0.2, 0.3, 0.5], vec![1.0, 0.0, -1.0], 1.0).unwrap();
        let f = FeatureMap::tabular(3);
        let star = linear_fixed_point(&k, &f, 0.8).unwrap().theta_star;
        let mut cfg = stream_cfg(2000, 0.8, 0.8);
        cfg.checkpoints = Checkpoints::Every(200);
        let ds = decomps(&k, &linear(f, vec![0.0; 3]), &cfg, &star, 400);
        let curve = martingale_variance_curve(&ds, 1).unwrap();
        for i in 1..curve.times.len() {
            let sq: Vec<f64> = ds.iter().map(|d| d.martingale[i].iter().map(|x| x * x).sum()).collect();
            let br: Vec<f64> = ds.iter().map(|d| d.bracket[i]).collect();
            let diff: Vec<f64> = sq.iter().zip(&br).map(|(a, b)| a - b).collect();
            assert!(stats::mean(&diff).abs() <= 4.0 * stats::std_error(&diff), "t={}", curve.times[i]);
            assert!(curve.ci[i].lo <= curve.values[i] && curve.values[i] <= curve.ci[i].hi);
        }
        assert!(matches!(martingale_variance_curve(&ds[..10], 1), Err(Error::InsufficientSeeds { .. })));
    }

    #[test]
    fn martingale_variance_is_zero_for_deterministic_kernel() {
        let k = cycle(3);
        let f = FeatureMap::tabular(3);
        let star = linear_fixed_point(&k, &f, 0.5).unwrap().theta_star;
        let ds = decomps(&k, &linear(f, vec![0.0; 3]), &stream_cfg(300, 0.8, 0.5), &star, 30);
        assert!(martingale_variance_curve(&ds, 1).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn increments_are_orthogonal_across_seeds() {
        let k = make_random_chain(3, 2).unwrap();
        let f = FeatureMap::tabular(3);
        let star = linear_fixed_point(&k, &f, 0.9).unwrap().theta_star;
        let cfg = stream_cfg(30, 0.8, 0.9);
        let picks = [(3u64, 10u64), (5, 6), (12, 29)];
        let mut prods = vec![Vec::new(); picks.len()];
        for h in run_seeds(&k, &linear(f, vec![0.0; 3]), &cfg, 5, 0..3000).unwrap() {
            let mut ds = Vec::new();
            decompose_visit(&h, &k, &star, |_, _, d| ds.push(d.to_vec())).unwrap();
            for (p, &(a, b)) in prods.iter_mut().zip(&picks) {
                let x: f64 = ds[a as usize - 1].iter().zip(&ds[b as usize - 1]).map(|(u, v)| u * v).sum();
                p.push(x);
            }
        }
        for p in &prods {
            assert!(stats::mean(p).abs() <= 4.0 * stats::std_error(p));
        }
    }

    #[test]
    fn moment_curves() {
        let k = make_random_chain(4, 3).unwrap();
        let f = FeatureMap::tabular(4);
        let star = linear_fixed_point(&k, &f, 0.8).unwrap().theta_star;
        let mut cfg = TdConfig::new(StepSchedule::new(0.5, 0.8).unwrap(), 0.8, 3000);
        cfg.checkpoints = Checkpoints::Every(300);
        let hs = run_seeds(&k, &linear(f, vec![0.0; 4]), &cfg, 3, 0..40).unwrap();
        let m2 = moment_curve(&hs, &star, 2, 1).unwrap();
        let m4 = moment_curve(&hs, &star, 4, 1).unwrap();
        for i in 0..m2.times.len() {
            let errs: Vec<f64> = hs.iter().map(|h| h.errors(&star)[i]).collect();
            let rms = (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt();
            assert_abs_diff_eq!(m2.values[i], rms, epsilon = 1e-12 * rms.max(1.0));
            assert!(m4.values[i] >= m2.values[i] * (1.0 - 1e-12));
        }
        assert!(matches!(moment_curve(&hs, &star, 3, 1), Err(Error::InvalidParameter(_))));
        assert!(matches!(moment_curve(&hs[..5], &star, 2, 1), Err(Error::InsufficientSeeds { .. })));
    }

    #[test]
    fn jacobian_closed_forms() {
        let k = make_random_chain(4, 12).unwrap();
        let f = FeatureMap::tabular(4);
        let pi = k.stationary().unwrap().to_vec();
        let m = linear(f, vec![0.1, 0.2, -0.3, 0.0]);
        let jac = estimate_update_jacobian(&k, &m, 0.7, 1e-4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let exact = pi[i] * ((i == j) as u8 as f64 - 0.7 * k.prob(i, j));
                assert_abs_diff_eq!(jac.entry(i, j), exact, epsilon = 1e-6);
            }
        }
        assert!(jac.positive_definite);
        let jac0 = estimate_update_jacobian(&k, &m, 0.0, 1e-4).unwrap();
        let min_pi = pi.iter().copied().fold(f64::INFINITY, f64::min);
        assert_abs_diff_eq!(jac0.lambda_min, min_pi, epsilon = 1e-8);
    }

    #[test]
    fn reference_fixed_point_for_linear_matches_direct_solve() {
        let k = make_random_chain(4, 30).unwrap();
        let f = FeatureMap::tabular(4);
        let direct = linear_fixed_point(&k, &f, 0.5).unwrap();
        let run = ReferenceRun { steps: 20_000, polish_iters: 5000, ..ReferenceRun::default() };
        let fp = reference_fixed_point(&k, &linear(f, vec![0.0; 4]), 0.5, &run).unwrap();
        assert_eq!(fp.method, FixedPointMethod::LongRunAverage);
        assert!(fp.residual < 1e-10);
        for (a, b) in fp.theta_star.iter().zip(&direct.theta_star) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-8);
        }
    }
}
