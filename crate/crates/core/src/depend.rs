//! Dependence diagnostics: exact lag covariances, block sums, maximal
//! coupling and concentration of time averages.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::{tv_between_curve, ChainSampler, Start, TransitionKernel, Trajectory};
use crate::error::{Error, Result};
use crate::rates::{classify_decay, fit_power_law, fit_power_law_above, DecayClassification, PowerLawFit};
use crate::seeds::{self, purpose};
use crate::stats::{self, CompensatedSum};

/// Values below this are treated as numerically zero when fitting.
pub const FIT_FLOOR: f64 = 1e-12;
pub const MIN_BLOCK_SEEDS: usize = 100;
pub const MIN_CONCENTRATION_SEEDS: usize = 1000;

/// Rounded geometric grid `1, 2, ..., max` with ratio `ratio`, deduplicated.
pub fn geometric_lags(max: usize, ratio: f64) -> Vec<usize> {
    let mut out = Vec::new();
    let mut x = 1.0f64;
    while x.round() as usize <= max {
        let k = x.round() as usize;
        if out.last() != Some(&k) {
            out.push(k);
        }
        x *= ratio;
    }
    out
}

/// Exact stationary lag covariances and their power-law fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingEstimate {
    pub lags: Vec<usize>,
    /// `|Cov_pi(f(x_0), g(x_k))|`
    pub values: Vec<f64>,
    pub window: (f64, f64),
    pub fit: Option<PowerLawFit>,
    pub regime: Option<DecayClassification>,
}

/// `|f^T D P^k g - (pi f)(pi g)|` at each lag, fitted over `window`.
///
/// Lags whose value is below [`FIT_FLOOR`] are left out of the fit; if too few
/// remain, `fit` is `None`.
pub fn covariance_mixing(
    kernel: &TransitionKernel,
    f: &[f64],
    g: &[f64],
    lags: &[usize],
    window: (f64, f64),
) -> Result<MixingEstimate> {
    let n = kernel.n_states();
    for (what, v) in [("f values", f), ("g values", g)] {
        if v.len() != n {
            return Err(Error::DimensionMismatch { what, expected: n, found: v.len() });
        }
    }
    if lags.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter("lags must be strictly increasing".into()));
    }
    let pi = kernel.stationary()?;
    let pf = stats::sum(&pi.iter().zip(f).map(|(p, x)| p * x).collect::<Vec<_>>());
    let pg = stats::sum(&pi.iter().zip(g).map(|(p, x)| p * x).collect::<Vec<_>>());
    let dfv: Vec<f64> = pi.iter().zip(f).map(|(p, x)| p * (x - pf)).collect();
    let gc: Vec<f64> = g.iter().map(|x| x - pg).collect();
    let mut pkg = gc;
    let mut k = 0usize;
    let mut values = Vec::with_capacity(lags.len());
    for &lag in lags {
        while k < lag {
            pkg = kernel.apply(&pkg);
            k += 1;
        }
        let terms: Vec<f64> = dfv.iter().zip(&pkg).map(|(a, b)| a * b).collect();
        values.push(stats::sum(&terms).abs());
    }
    let ts: Vec<f64> = lags.iter().map(|&l| l as f64).collect();
    let fit = fit_power_law_above(&ts, &values, window, FIT_FLOOR).ok();
    let regime = classify_decay(&ts, &values, window, FIT_FLOOR).ok();
    Ok(MixingEstimate { lags: lags.to_vec(), values, window, fit, regime })
}

/// Non-overlapping length-`b` blocks of a path and the block sums of a functional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSet {
    pub block_size: usize,
    /// `sums[k] = sum of functional over states[k b .. (k+1) b]`.
    pub sums: Vec<f64>,
}

impl BlockSet {
    pub fn n_blocks(&self) -> usize {
        self.sums.len()
    }

    pub fn range(&self, k: usize) -> std::ops::Range<usize> {
        k * self.block_size..(k + 1) * self.block_size
    }
}

/// Block sums over the visited states `x_0, x_1, ...`; the trailing partial
/// block is dropped.
pub fn make_blocks(traj: &Trajectory, functional: &[f64], b: usize) -> Result<BlockSet> {
    block_sums(&traj.states, functional, b)
}

pub fn block_sums(states: &[usize], functional: &[f64], b: usize) -> Result<BlockSet> {
    if b == 0 {
        return Err(Error::InvalidParameter("block size must be at least 1".into()));
    }
    if states.len() < 2 * b {
        return Err(Error::TrajectoryTooShort { len: states.len(), block_size: b });
    }
    let sums = states
        .chunks_exact(b)
        .map(|c| {
            let mut s = CompensatedSum::new();
            for &x in c {
                s.add(functional[x]);
            }
            s.value()
        })
        .collect();
    Ok(BlockSet { block_size: b, sums })
}

/// Across-seed block covariance at each gap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapCovariance {
    pub gaps: Vec<usize>,
    /// Signed covariance averaged over block pairs at each gap.
    pub cov: Vec<f64>,
    pub se: Vec<f64>,
}

/// Covariance across seeds at fixed `(k, k + m)`, averaged over `k`.
///
/// Each seed contributes the mean over `k` of its centred products, which
/// gives a per-seed statistic whose spread yields the standard error.
pub fn gap_covariance(sets: &[&BlockSet], gaps: &[usize]) -> Result<GapCovariance> {
    let n = sets.len();
    if n < 2 {
        return Err(Error::InsufficientSeeds { needed: 2, got: n });
    }
    let k = sets.iter().map(|s| s.n_blocks()).min().unwrap_or(0);
    let means: Vec<f64> = (0..k)
        .map(|i| stats::mean(&sets.iter().map(|s| s.sums[i]).collect::<Vec<_>>()))
        .collect();
    let corr = n as f64 / (n - 1) as f64;
    let mut cov = Vec::with_capacity(gaps.len());
    let mut se = Vec::with_capacity(gaps.len());
    let mut kept = Vec::with_capacity(gaps.len());
    for &m in gaps {
        if m == 0 || m >= k {
            continue;
        }
        let z: Vec<f64> = sets
            .iter()
            .map(|s| {
                let mut acc = CompensatedSum::new();
                for i in 0..k - m {
                    acc.add((s.sums[i] - means[i]) * (s.sums[i + m] - means[i + m]));
                }
                corr * acc.value() / (k - m) as f64
            })
            .collect();
        kept.push(m);
        cov.push(stats::mean(&z));
        se.push(stats::std_error(&z));
    }
    Ok(GapCovariance { gaps: kept, cov, se })
}

/// Outcome of the block covariance check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockCovReport {
    pub block_size: usize,
    pub n_seeds: usize,
    pub all: GapCovariance,
    pub fit: Option<PowerLawFit>,
    pub beta_nominal: f64,
    /// `C` in `C b^2 m^{-beta}`, fitted on the first half of the seeds.
    pub c_fitted: f64,
    pub calibration: GapCovariance,
    pub held_out: GapCovariance,
    pub window: (f64, f64),
    /// The envelope lies above every held-out `|Cov|` in the window.
    pub domination: bool,
}

/// Fit `|Cov(Y_k, Y_{k+m})|` against `m` and test `C b^2 m^{-beta}` on held-out seeds.
///
/// `C` is the smallest constant for which the envelope covers the upper
/// two-standard-error limit of the calibration half at every gap in `window`.
pub fn block_covariance_check(
    blocksets: &[BlockSet],
    gaps: &[usize],
    beta_nominal: f64,
    window: (f64, f64),
) -> Result<BlockCovReport> {
    if blocksets.len() < MIN_BLOCK_SEEDS {
        return Err(Error::InsufficientSeeds { needed: MIN_BLOCK_SEEDS, got: blocksets.len() });
    }
    let b = blocksets[0].block_size;
    if let Some(s) = blocksets.iter().find(|s| s.block_size != b) {
        return Err(Error::DimensionMismatch { what: "block size", expected: b, found: s.block_size });
    }
    let refs: Vec<&BlockSet> = blocksets.iter().collect();
    let half = refs.len() / 2;
    let all = gap_covariance(&refs, gaps)?;
    let cal = gap_covariance(&refs[..half], gaps)?;
    let held = gap_covariance(&refs[half..], gaps)?;
    let ts: Vec<f64> = all.gaps.iter().map(|&m| m as f64).collect();
    let abs: Vec<f64> = all.cov.iter().map(|c| c.abs()).collect();
    let fit = fit_power_law_above(&ts, &abs, window, FIT_FLOOR).ok();
    let b2 = (b * b) as f64;
    let in_window = |m: usize| (m as f64) >= window.0 && (m as f64) <= window.1;
    let shape = |m: usize| b2 * (m as f64).powf(-beta_nominal);
    let c_fitted = cal
        .gaps
        .iter()
        .zip(cal.cov.iter().zip(&cal.se))
        .filter(|(m, _)| in_window(**m))
        .map(|(&m, (c, se))| (c.abs() + 2.0 * se) / shape(m))
        .fold(0.0f64, f64::max);
    let domination = held
        .gaps
        .iter()
        .zip(&held.cov)
        .filter(|(m, _)| in_window(**m))
        .all(|(&m, c)| c.abs() <= c_fitted * shape(m));
    Ok(BlockCovReport {
        block_size: b,
        n_seeds: blocksets.len(),
        all,
        fit,
        beta_nominal,
        c_fitted,
        calibration: cal,
        held_out: held,
        window,
        domination,
    })
}

/// One maximally coupled pair of paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupledPath {
    /// `apart[t] = 1{x_t != y_t}` for `t = 0..=T`.
    pub apart: Vec<bool>,
    /// First `t` with `x_t = y_t`, if within the horizon.
    pub meeting_time: Option<usize>,
}

/// One step of the maximal coupling from `(x, y)` driven by a single uniform.
///
/// With probability `o = sum_s min(P(x, s), P(y, s))` both move to the same
/// state drawn from the normalised overlap; otherwise each moves according to
/// its normalised residual, whose supports are disjoint.
pub fn coupled_step(kernel: &TransitionKernel, x: usize, y: usize, u: f64) -> (usize, usize) {
    if x == y {
        let s = kernel.sample_next(x, u);
        return (s, s);
    }
    let (px, py) = (kernel.row(x), kernel.row(y));
    let overlap: f64 = px.iter().zip(py).map(|(a, b)| a.min(*b)).sum();
    let n = px.len();
    let pick = |w: &dyn Fn(usize) -> f64, total: f64, v: f64| -> usize {
        let target = v * total;
        let mut acc = 0.0;
        let mut last = None;
        for s in 0..n {
            let ws = w(s);
            if ws > 0.0 {
                acc += ws;
                last = Some(s);
                if target < acc {
                    return s;
                }
            }
        }
        last.expect("non-empty support")
    };
    if u < overlap {
        let s = pick(&|s| px[s].min(py[s]), overlap, u / overlap);
        (s, s)
    } else {
        let v = (u - overlap) / (1.0 - overlap);
        let sx = pick(&|s| (px[s] - py[s]).max(0.0), 1.0 - overlap, v);
        let sy = pick(&|s| (py[s] - px[s]).max(0.0), 1.0 - overlap, v);
        (sx, sy)
    }
}

/// Run the maximal coupling from `(x0, y0)` for `t_max` steps.
pub fn couple(kernel: &TransitionKernel, x0: usize, y0: usize, t_max: usize, seed: u64) -> Result<CoupledPath> {
    let n = kernel.n_states();
    if x0 >= n || y0 >= n {
        return Err(Error::InvalidParameter(format!("start states ({x0}, {y0}) out of range")));
    }
    let mut rng = seeds::rng(seed);
    let (mut x, mut y) = (x0, y0);
    let mut apart = Vec::with_capacity(t_max + 1);
    let mut meeting_time = None;
    for t in 0..=t_max {
        if x == y && meeting_time.is_none() {
            meeting_time = Some(t);
        }
        apart.push(x != y);
        if t < t_max {
            let u: f64 = rng.gen();
            (x, y) = coupled_step(kernel, x, y, u);
        }
    }
    Ok(CoupledPath { apart, meeting_time })
}

/// Across-seed coupling probabilities and the exact lower bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingCurve {
    pub x0: usize,
    pub y0: usize,
    pub n_seeds: usize,
    /// `P(x_t != y_t)` estimate for `t = 0..=T`.
    pub p_apart: Vec<f64>,
    pub se: Vec<f64>,
    /// Exact `1/2 || e_x P^t - e_y P^t ||_1`.
    pub tv_lower: Vec<f64>,
    /// Largest `(tv_lower - p_apart) / se` over `t`; positive values are shortfalls.
    pub worst_violation_se: f64,
    pub mean_meeting_time: f64,
    pub unmet: usize,
}

fn apart_counts(kernel: &TransitionKernel, x0: usize, y0: usize, t_max: usize, seeds: &[u64]) -> Result<(Vec<usize>, Vec<Option<usize>>)> {
    let paths: Vec<CoupledPath> = seeds.par_iter().map(|&s| couple(kernel, x0, y0, t_max, s)).collect::<Result<_>>()?;
    let mut counts = vec![0usize; t_max + 1];
    for p in &paths {
        for (c, &a) in counts.iter_mut().zip(&p.apart) {
            *c += a as usize;
        }
    }
    Ok((counts, paths.iter().map(|p| p.meeting_time).collect()))
}

/// Seed `i` of a coupling batch.
pub fn coupling_seed(base: u64, i: u64) -> u64 {
    seeds::derive(base, purpose::COUPLING, i)
}

/// Estimate `P(x_t != y_t)` from `n_seeds` coupled pairs.
pub fn coupling_curve(kernel: &TransitionKernel, x0: usize, y0: usize, t_max: usize, n_seeds: usize, base_seed: u64) -> Result<CouplingCurve> {
    if n_seeds < 2 {
        return Err(Error::InsufficientSeeds { needed: 2, got: n_seeds });
    }
    let seeds: Vec<u64> = (0..n_seeds as u64).map(|i| coupling_seed(base_seed, i)).collect();
    let (counts, meets) = apart_counts(kernel, x0, y0, t_max, &seeds)?;
    let n = n_seeds as f64;
    let p_apart: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let se: Vec<f64> = p_apart.iter().map(|p| (p * (1.0 - p) / (n - 1.0)).sqrt()).collect();
    let tv_lower = tv_between_curve(kernel, x0, y0, t_max);
    let worst_violation_se = p_apart
        .iter()
        .zip(&se)
        .zip(&tv_lower)
        .map(|((p, s), tv)| {
            let gap = tv - p;
            if gap <= 1e-12 {
                return f64::NEG_INFINITY;
            }
            // score form: the standard error under the bound itself, so an
            // empirical zero is judged against the bound's own variance
            let s0 = (tv * (1.0 - tv) / n).sqrt().max(*s);
            if s0 > 0.0 {
                gap / s0
            } else {
                f64::INFINITY
            }
        })
        .fold(f64::NEG_INFINITY, f64::max);
    let met: Vec<f64> = meets.iter().flatten().map(|&t| t as f64).collect();
    Ok(CouplingCurve {
        x0,
        y0,
        n_seeds,
        p_apart,
        se,
        tv_lower,
        worst_violation_se,
        mean_meeting_time: stats::mean(&met),
        unmet: meets.iter().filter(|m| m.is_none()).count(),
    })
}

/// Split-sample envelope check `C t^{-beta}` for a coupling curve pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingEnvelope {
    pub fit: PowerLawFit,
    pub beta: f64,
    pub c_fitted: f64,
    pub window: (f64, f64),
    pub domination: bool,
}

/// Fit a power law to the calibration curve, set `C` to cover it on the
/// window, and test the held-out curve.
pub fn coupling_envelope(calibration: &CouplingCurve, held_out: &CouplingCurve, window: (f64, f64)) -> Result<CouplingEnvelope> {
    let ts: Vec<f64> = (0..calibration.p_apart.len()).map(|t| t as f64).collect();
    let fit = fit_power_law(&ts, &calibration.p_apart, window)?;
    let beta = fit.exponent;
    let in_w = |t: f64| t >= window.0 && t <= window.1;
    let c = ts
        .iter()
        .zip(&calibration.p_apart)
        .filter(|(t, _)| in_w(**t))
        .map(|(t, p)| p * t.powf(beta))
        .fold(0.0f64, f64::max);
    let domination = ts
        .iter()
        .zip(&held_out.p_apart)
        .filter(|(t, _)| in_w(**t))
        .all(|(t, p)| *p <= c * t.powf(-beta));
    Ok(CouplingEnvelope { fit, beta, c_fitted: c, window, domination })
}

/// Empirical tails of time averages against `2 exp(-n eps^2 / (2 C))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationReport {
    pub n: usize,
    pub n_seeds: usize,
    pub block_size: usize,
    pub beta_hat: f64,
    pub stationary_mean: f64,
    /// Long-run variance estimate from block sums of the calibration batch.
    pub c_blocks: f64,
    /// Smallest `C` whose bound covers the calibration batch's tail.
    pub c_tail: f64,
    pub c_hat: f64,
    pub rows: Vec<ConcentrationRow>,
    /// The bound covers the held-out frequency at every epsilon.
    pub domination: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationRow {
    pub epsilon: f64,
    pub empirical: f64,
    pub calibration: f64,
    pub bound: f64,
}

/// Block size `round(n^{1/(beta+1)})`, at least 1.
pub fn concentration_block_size(n: usize, beta_hat: f64) -> usize {
    ((n as f64).powf(1.0 / (beta_hat + 1.0)).round() as usize).max(1)
}

/// Per seed: the deviation of the time average over `x_0..x_{n-1}` from
/// `pi f`, and the sum of squared centred block sums.
fn concentration_draw(kernel: &TransitionKernel, f: &[f64], pf: f64, n: usize, b: usize, start: Start, seed: u64) -> Result<(f64, f64, usize)> {
    let mut sampler = ChainSampler::new(kernel, start, seed)?;
    let mut total = CompensatedSum::new();
    let mut block = 0.0;
    let mut sq = 0.0;
    let mut blocks = 0usize;
    for t in 0..n {
        let x = f[sampler.state()];
        total.add(x);
        block += x - pf;
        if (t + 1) % b == 0 {
            sq += block * block;
            blocks += 1;
            block = 0.0;
        }
        if t + 1 < n {
            sampler.step();
        }
    }
    Ok((total.value() / n as f64 - pf, sq, blocks))
}

/// Concentration check. Seeds `0..n_seeds/2` calibrate `C`; the rest are held out.
#[allow(clippy::too_many_arguments)]
pub fn concentration_tail(
    kernel: &TransitionKernel,
    functional: &[f64],
    n: usize,
    epsilons: &[f64],
    n_seeds: usize,
    beta_hat: f64,
    start: Start,
    base_seed: u64,
) -> Result<ConcentrationReport> {
    if n_seeds < MIN_CONCENTRATION_SEEDS {
        return Err(Error::InsufficientSeeds { needed: MIN_CONCENTRATION_SEEDS, got: n_seeds });
    }
    if functional.len() != kernel.n_states() {
        return Err(Error::DimensionMismatch { what: "functional", expected: kernel.n_states(), found: functional.len() });
    }
    if n == 0 {
        return Err(Error::InvalidParameter("time average needs n >= 1".into()));
    }
    let pi = kernel.stationary()?;
    let pf = stats::sum(&pi.iter().zip(functional).map(|(p, x)| p * x).collect::<Vec<_>>());
    let b = concentration_block_size(n, beta_hat);
    let draws: Vec<(f64, f64, usize)> = (0..n_seeds as u64)
        .into_par_iter()
        .map(|i| concentration_draw(kernel, functional, pf, n, b, start, seeds::derive(base_seed, purpose::CONCENTRATION, i)))
        .collect::<Result<_>>()?;
    let half = n_seeds / 2;
    let (cal, held) = draws.split_at(half);
    let (sq, nb) = cal.iter().fold((CompensatedSum::new(), 0usize), |(mut s, c), d| {
        s.add(d.1);
        (s, c + d.2)
    });
    let c_blocks = if nb > 0 { sq.value() / (nb * b) as f64 } else { 0.0 };
    let freq = |ds: &[(f64, f64, usize)], eps: f64| ds.iter().filter(|d| d.0.abs() > eps).count() as f64 / ds.len() as f64;
    let nf = n as f64;
    let c_tail = epsilons
        .iter()
        .filter_map(|&e| {
            let p = freq(cal, e);
            (p > 0.0 && p < 2.0).then(|| nf * e * e / (2.0 * (2.0 / p).ln()))
        })
        .fold(0.0f64, f64::max);
    let c_hat = c_blocks.max(c_tail);
    let rows: Vec<ConcentrationRow> = epsilons
        .iter()
        .map(|&e| ConcentrationRow {
            epsilon: e,
            empirical: freq(held, e),
            calibration: freq(cal, e),
            bound: if c_hat > 0.0 { (2.0 * (-nf * e * e / (2.0 * c_hat)).exp()).min(1.0) } else { 0.0 },
        })
        .collect();
    let domination = rows.iter().all(|r| r.empirical <= r.bound);
    Ok(ConcentrationReport {
        n,
        n_seeds,
        block_size: b,
        beta_hat,
        stationary_mean: pf,
        c_blocks,
        c_tail,
        c_hat,
        rows,
        domination,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{make_iid_chain, make_random_chain, make_renewal_chain, sample_trajectory, tv_curve};
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;

    fn two_state() -> TransitionKernel {
        TransitionKernel::new(vec![vec![0.9, 0.1], vec![0.2, 0.8]], vec![1.0, 0.0], 1.0).unwrap()
    }

    fn matrix_power_cov(k: &TransitionKernel, f: &[f64], g: &[f64], lag: usize) -> f64 {
        let n = k.n_states();
        let p = DMatrix::from_fn(n, n, |i, j| k.prob(i, j));
        let pk = p.pow(lag as u32);
        let pi = k.stationary().unwrap();
        let mut e_fg = 0.0;
        for i in 0..n {
            for j in 0..n {
                e_fg += pi[i] * f[i] * pk[(i, j)] * g[j];
            }
        }
        let pf: f64 = (0..n).map(|i| pi[i] * f[i]).sum();
        let pg: f64 = (0..n).map(|i| pi[i] * g[i]).sum();
        (e_fg - pf * pg).abs()
    }

    #[test]
    fn lag_zero_is_the_variance_and_constants_vanish() {
        let k = make_random_chain(5, 2).unwrap();
        let f = vec![0.3, -1.0, 2.0, 0.5, 0.0];
        let est = covariance_mixing(&k, &f, &f, &[0, 1, 2, 3], (1.0, 3.0)).unwrap();
        let pi = k.stationary().unwrap();
        let m: f64 = (0..5).map(|i| pi[i] * f[i]).sum();
        let var: f64 = (0..5).map(|i| pi[i] * (f[i] - m).powi(2)).sum();
        assert_abs_diff_eq!(est.values[0], var, epsilon = 1e-10);
        for lag in [1, 2, 3] {
            assert_abs_diff_eq!(est.values[lag], matrix_power_cov(&k, &f, &f, lag), epsilon = 1e-12);
        }
        let c = covariance_mixing(&k, &f, &[2.0; 5], &[0, 1, 5], (1.0, 5.0)).unwrap();
        assert!(c.values.iter().all(|&v| v < 1e-15));
        assert!(c.fit.is_none());
    }

    #[test]
    fn two_state_covariance_is_geometric() {
        let k = two_state();
        let f = [1.0, 0.0];
        let lags: Vec<usize> = (1..=40).collect();
        let est = covariance_mixing(&k, &f, &f, &lags, (1.0, 40.0)).unwrap();
        // spectral oracle: Var_pi(f) 0.7^k
        let var = 2.0 / 9.0;
        for (l, v) in lags.iter().zip(&est.values) {
            assert_abs_diff_eq!(*v, var * 0.7f64.powi(*l as i32), epsilon = 1e-14);
        }
        assert_eq!(est.regime.unwrap().regime, crate::rates::DecayRegime::Geometric);
    }

    #[test]
    fn renewal_indicator_covariance_exponent() {
        let k = make_renewal_chain(2.0, 200, |s| (s == 0) as u8 as f64).unwrap();
        let f: Vec<f64> = (0..200).map(|s| (s == 0) as u8 as f64).collect();
        let est = covariance_mixing(&k, &f, &f, &geometric_lags(80, 1.15), (5.0, 80.0)).unwrap();
        let fit = est.fit.unwrap();
        assert!((0.7..=1.3).contains(&fit.exponent), "{}", fit.exponent);
    }

    #[test]
    fn covariance_mixing_rejects_unsorted_lags() {
        let k = two_state();
        assert!(covariance_mixing(&k, &[1.0, 0.0], &[1.0, 0.0], &[3, 2], (1.0, 3.0)).is_err());
    }

    #[test]
    fn block_examples() {
        let k = make_random_chain(4, 1).unwrap();
        let traj = sample_trajectory(&k, Start::State(0), 99, 3).unwrap();
        let ones = vec![1.0; 4];
        let bs = make_blocks(&traj, &ones, 50).unwrap();
        assert_eq!(bs.n_blocks(), 2);
        assert!(bs.sums.iter().all(|&y| y == 50.0));
        let f = vec![0.1, -0.4, 2.5, 1.0];
        let bs = make_blocks(&traj, &f, 7).unwrap();
        assert_eq!(bs.n_blocks(), 100 / 7);
        for kk in 0..bs.n_blocks() {
            let mut direct = 0.0;
            for t in bs.range(kk) {
                direct += f[traj.states[t]];
            }
            assert_abs_diff_eq!(bs.sums[kk], direct, epsilon = 1e-12);
        }
        assert!(matches!(make_blocks(&traj, &f, 51), Err(Error::TrajectoryTooShort { .. })));
    }

    fn blocksets(k: &TransitionKernel, f: &[f64], len: usize, b: usize, seeds: u64, start: Start) -> Vec<BlockSet> {
        (0..seeds)
            .into_par_iter()
            .map(|i| {
                let tr = sample_trajectory(k, start, len, seeds::derive(11, purpose::BLOCKS, i)).unwrap();
                make_blocks(&tr, f, b).unwrap()
            })
            .collect()
    }

    #[test]
    fn iid_blocks_are_uncorrelated() {
        let k = make_iid_chain(vec![0.3, 0.7], vec![0.0, 1.0], 1.0).unwrap();
        let sets = blocksets(&k, &[1.0, -1.0], 400, 20, 400, Start::Stationary);
        let rep = block_covariance_check(&sets, &[1, 2, 3, 5, 8], 1.0, (1.0, 8.0)).unwrap();
        for (c, se) in rep.all.cov.iter().zip(&rep.all.se) {
            assert!(c.abs() <= 4.0 * se, "{c} {se}");
        }
        assert!(matches!(block_covariance_check(&sets[..50], &[1], 1.0, (1.0, 1.0)), Err(Error::InsufficientSeeds { .. })));
    }

    #[test]
    fn unit_blocks_match_exact_lag_covariance() {
        let k = two_state();
        let f = [1.0, 0.0];
        let sets = blocksets(&k, &f, 59, 1, 4000, Start::Stationary);
        let gc = gap_covariance(&sets.iter().collect::<Vec<_>>(), &[1, 2, 4]).unwrap();
        let exact = covariance_mixing(&k, &f, &f, &[1, 2, 4], (1.0, 4.0)).unwrap();
        for ((c, se), e) in gc.cov.iter().zip(&gc.se).zip(&exact.values) {
            assert!((c - e).abs() <= 4.0 * se, "{c} vs {e}");
        }
    }

    #[test]
    fn renewal_block_covariance_decreases_with_gap() {
        let k = make_renewal_chain(2.0, 200, |_| 0.0).unwrap();
        let f: Vec<f64> = (0..200).map(|s| (s == 0) as u8 as f64).collect();
        let sets = blocksets(&k, &f, 1000, 10, 1000, Start::Stationary);
        let gc = gap_covariance(&sets.iter().collect::<Vec<_>>(), &[1, 10]).unwrap();
        let (c1, c10) = (gc.cov[0].abs(), gc.cov[1].abs());
        let sep = (gc.se[0].powi(2) + gc.se[1].powi(2)).sqrt();
        assert!(c1 - c10 >= 4.0 * sep, "{c1} {c10} {sep}");
    }

    #[test]
    fn coupling_trivial_cases() {
        let k = make_random_chain(4, 3).unwrap();
        let p = couple(&k, 2, 2, 50, 1).unwrap();
        assert_eq!(p.meeting_time, Some(0));
        assert!(p.apart.iter().all(|a| !a));
        let iid = make_iid_chain(vec![0.4, 0.6], vec![0.0, 1.0], 1.0).unwrap();
        for s in 0..200 {
            assert_eq!(couple(&iid, 0, 1, 10, s).unwrap().meeting_time, Some(1));
        }
        assert_eq!(couple(&k, 0, 3, 100, 9).unwrap(), couple(&k, 0, 3, 100, 9).unwrap());
    }

    #[test]
    fn coupled_step_marginals_are_the_kernel_rows() {
        let k = make_random_chain(4, 8).unwrap();
        let m = 200_000;
        let mut cx = [0usize; 4];
        let mut cy = [0usize; 4];
        for i in 0..m {
            let u = (i as f64 + 0.5) / m as f64;
            let (a, b) = coupled_step(&k, 0, 2, u);
            cx[a] += 1;
            cy[b] += 1;
        }
        for s in 0..4 {
            assert_abs_diff_eq!(cx[s] as f64 / m as f64, k.prob(0, s), epsilon = 1e-4);
            assert_abs_diff_eq!(cy[s] as f64 / m as f64, k.prob(2, s), epsilon = 1e-4);
        }
        // meets with exactly the overlap probability
        let overlap: f64 = (0..4).map(|s| k.prob(0, s).min(k.prob(2, s))).sum();
        let met = (0..m).filter(|&i| {
            let (a, b) = coupled_step(&k, 0, 2, (i as f64 + 0.5) / m as f64);
            a == b
        });
        assert_abs_diff_eq!(met.count() as f64 / m as f64, overlap, epsilon = 1e-4);
    }

    #[test]
    fn coupling_dominates_tv_lower_bound() {
        let k = make_renewal_chain(2.0, 60, |_| 0.0).unwrap();
        let c = coupling_curve(&k, 0, 30, 120, 3000, 4).unwrap();
        assert!(c.worst_violation_se <= 4.0, "{}", c.worst_violation_se);
        let paths: Vec<CoupledPath> = (0..200).map(|i| couple(&k, 0, 30, 120, coupling_seed(4, i)).unwrap()).collect();
        for p in &paths {
            // once met, never apart
            assert!(p.apart.windows(2).all(|w| w[0] || !w[1]));
        }
        let tv0 = tv_curve(&k, 0, 5).unwrap();
        assert!(tv0.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn concentration_trivial_and_iid_cases() {
        let k = make_iid_chain(vec![0.5, 0.5], vec![0.0, 1.0], 1.0).unwrap();
        let f = [1.0, -1.0];
        let n = 100;
        let rep = concentration_tail(&k, &f, n, &[0.05, 0.1, 0.2, 0.3, 2.5], 4000, 5.0, Start::Stationary, 2).unwrap();
        assert_eq!(rep.rows.last().unwrap().empirical, 0.0);
        // exact binomial tail of |2X/n - 1| > eps
        let ln_binom = |k: usize| -> f64 {
            let lg = |m: usize| (1..=m).map(|x| (x as f64).ln()).sum::<f64>();
            lg(n) - lg(k) - lg(n - k) - n as f64 * 2f64.ln()
        };
        for row in &rep.rows[..4] {
            let exact: f64 = (0..=n).filter(|&x| ((2 * x) as f64 / n as f64 - 1.0).abs() > row.epsilon).map(|x| ln_binom(x).exp()).sum();
            let se = (exact * (1.0 - exact) / 2000.0).sqrt();
            assert!((row.empirical - exact).abs() <= 4.0 * se + 1e-12, "{} vs {exact}", row.empirical);
        }
        assert!(matches!(
            concentration_tail(&k, &f, 10, &[0.1], 10, 1.0, Start::Stationary, 1),
            Err(Error::InsufficientSeeds { .. })
        ));
    }

    #[test]
    fn concentration_tail_shrinks_with_n() {
        let k = make_random_chain(3, 5).unwrap();
        let f = [1.0, -1.0, 0.5];
        let a = concentration_tail(&k, &f, 200, &[0.1], 2000, 5.0, Start::Stationary, 3).unwrap();
        let b = concentration_tail(&k, &f, 400, &[0.1], 2000, 5.0, Start::Stationary, 4).unwrap();
        assert!(b.rows[0].empirical < a.rows[0].empirical);
        assert!(a.rows[0].empirical > 0.0);
    }

    #[test]
    fn lag_grid() {
        assert_eq!(geometric_lags(10, 1.5), vec![1, 2, 3, 5, 8]);
        let g = geometric_lags(1000, 1.2);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
    }
}
