//! Power-law rate fits and bound envelopes for the error of TD(0).
//!
//! The high-probability bounds have existential constants, so what can be
//! checked is (a) the exponent of the error tail and (b) whether a two-term
//! envelope with constants fitted on one seed batch dominates the
//! `(1 - delta)`-quantile of a held-out batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{self, Interval};
use crate::td::StepSchedule;

pub const MIN_FIT_POINTS: usize = 6;

/// Least-squares fit of `log y = log_intercept - exponent * log t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub exponent: f64,
    pub log_intercept: f64,
    pub r_squared: f64,
    /// Standard error of the fitted slope.
    pub exponent_se: f64,
    pub window: (f64, f64),
    pub n_points: usize,
}

impl PowerLawFit {
    pub fn predict(&self, t: f64) -> f64 {
        (self.log_intercept - self.exponent * t.ln()).exp()
    }
}

/// Ordinary least squares of `y` on `x` returning `(intercept, slope, r2, slope_se)`.
pub(crate) fn ols(x: &[f64], y: &[f64]) -> (f64, f64, f64, f64) {
    let n = x.len() as f64;
    let mx = stats::mean(x);
    let my = stats::mean(y);
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r2 = if syy > 0.0 { (1.0 - ss_res / syy).clamp(0.0, 1.0) } else { 1.0 };
    let se = if n > 2.0 { (ss_res / (n - 2.0) / sxx).sqrt() } else { f64::NAN };
    (intercept, slope, r2, se)
}

/// Fit a power law to the points of `(ts, ys)` with `t` inside `window`
/// (inclusive). Every `y` in the window must be positive.
pub fn fit_power_law(ts: &[f64], ys: &[f64], window: (f64, f64)) -> Result<PowerLawFit> {
    assert_eq!(ts.len(), ys.len(), "series length mismatch");
    let mut lx = Vec::new();
    let mut ly = Vec::new();
    for (&t, &y) in ts.iter().zip(ys) {
        if t < window.0 || t > window.1 {
            continue;
        }
        if !(y > 0.0) || !(t > 0.0) {
            return Err(Error::NonPositiveValue { t, value: y });
        }
        lx.push(t.ln());
        ly.push(y.ln());
    }
    if lx.len() < MIN_FIT_POINTS {
        return Err(Error::WindowTooSmall { points: lx.len(), needed: MIN_FIT_POINTS });
    }
    let (a, b, r2, se) = ols(&lx, &ly);
    Ok(PowerLawFit { exponent: -b, log_intercept: a, r_squared: r2, exponent_se: se, window, n_points: lx.len() })
}

/// [`fit_power_law`] after dropping points below a numerical `floor`.
pub fn fit_power_law_above(ts: &[f64], ys: &[f64], window: (f64, f64), floor: f64) -> Result<PowerLawFit> {
    let (t2, y2): (Vec<f64>, Vec<f64>) = ts.iter().zip(ys).filter(|(_, &y)| y >= floor).map(|(&t, &y)| (t, y)).unzip();
    fit_power_law(&t2, &y2, window)
}

/// Which decay law describes a positive series better.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayRegime {
    Polynomial,
    Geometric,
}

/// Fit both `log y ~ log t` and `log y ~ t` over the window and keep the
/// better-fitting law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayClassification {
    pub regime: DecayRegime,
    pub power_r2: f64,
    pub geometric_r2: f64,
    /// Per-step log decay rate of the geometric fit.
    pub geometric_rate: f64,
}

pub fn classify_decay(ts: &[f64], ys: &[f64], window: (f64, f64), floor: f64) -> Result<DecayClassification> {
    let power = fit_power_law_above(ts, ys, window, floor)?;
    let (x, y): (Vec<f64>, Vec<f64>) = ts
        .iter()
        .zip(ys)
        .filter(|(&t, &y)| t >= window.0 && t <= window.1 && y >= floor)
        .map(|(&t, &y)| (t, y.ln()))
        .unzip();
    let (_, slope, geo_r2, _) = ols(&x, &y);
    let regime = if geo_r2 > power.r_squared { DecayRegime::Geometric } else { DecayRegime::Polynomial };
    Ok(DecayClassification { regime, power_r2: power.r_squared, geometric_r2: geo_r2, geometric_rate: -slope })
}

/// Shape of the envelope being checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundVariant {
    /// `C t^{-beta/2} + C' alpha_t^gamma`
    LinearHp,
    /// Same form as `LinearHp`, for nonlinear models.
    NonlinearHp,
    /// `C t^{-(beta-1)/2} + C' t^{-eta beta}`
    ReluAppendix,
    /// `C t^{-beta/2} + C' alpha_t^{gamma/p}`
    MomentP,
}

impl BoundVariant {
    pub fn name(&self) -> &'static str {
        match self {
            BoundVariant::LinearHp => "linear-hp",
            BoundVariant::NonlinearHp => "nonlinear-hp",
            BoundVariant::ReluAppendix => "relu-appendix",
            BoundVariant::MomentP => "moment-p",
        }
    }
}

/// Envelope form, exponents and (fitted or supplied) constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundSpec {
    pub variant: BoundVariant,
    pub c: f64,
    pub c_prime: f64,
    pub beta: f64,
    pub eta: f64,
    pub holder_gamma: f64,
    pub p: f64,
    pub delta: f64,
}

impl BoundSpec {
    pub fn new(variant: BoundVariant, beta: f64, eta: f64, holder_gamma: f64, p: f64, delta: f64) -> Result<Self> {
        if !(beta > 0.0 && eta > 0.0 && holder_gamma > 0.0 && p > 0.0) {
            return Err(Error::InvalidParameter("bound exponents must be positive".into()));
        }
        if variant == BoundVariant::ReluAppendix && !(beta > 1.0) {
            return Err(Error::InvalidParameter(format!("relu-appendix form needs beta > 1, got {beta}")));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidParameter(format!("delta must lie in (0, 1), got {delta}")));
        }
        Ok(Self { variant, c: 1.0, c_prime: 1.0, beta, eta, holder_gamma, p, delta })
    }

    pub fn with_constants(mut self, c: f64, c_prime: f64) -> Self {
        self.c = c;
        self.c_prime = c_prime;
        self
    }

    /// The two basis functions at `t`.
    pub fn basis(&self, schedule: &StepSchedule, t: f64) -> (f64, f64) {
        let alpha = schedule.c_alpha * t.powf(-schedule.eta);
        match self.variant {
            BoundVariant::LinearHp | BoundVariant::NonlinearHp => (t.powf(-self.beta / 2.0), alpha.powf(self.holder_gamma)),
            BoundVariant::ReluAppendix => (t.powf(-(self.beta - 1.0) / 2.0), t.powf(-self.eta * self.beta)),
            BoundVariant::MomentP => (t.powf(-self.beta / 2.0), alpha.powf(self.holder_gamma / self.p)),
        }
    }

    /// Prediction of the other envelope family for the same exponents.
    pub fn alternative_exponent(&self) -> Option<f64> {
        match self.variant {
            BoundVariant::ReluAppendix => Some((self.beta / 2.0).min(self.eta * self.holder_gamma)),
            _ if self.beta > 1.0 => Some(((self.beta - 1.0) / 2.0).min(self.eta * self.beta)),
            _ => None,
        }
    }

    /// Asymptotic exponent of the envelope: the slower of its two terms.
    pub fn predicted_exponent(&self) -> f64 {
        match self.variant {
            BoundVariant::LinearHp | BoundVariant::NonlinearHp => (self.beta / 2.0).min(self.eta * self.holder_gamma),
            BoundVariant::ReluAppendix => ((self.beta - 1.0) / 2.0).min(self.eta * self.beta),
            BoundVariant::MomentP => (self.beta / 2.0).min(self.eta * self.holder_gamma / self.p),
        }
    }
}

/// Envelope values at each `t`.
pub fn bound_curve(spec: &BoundSpec, schedule: &StepSchedule, ts: &[f64]) -> Vec<f64> {
    ts.iter()
        .map(|&t| {
            let (b1, b2) = spec.basis(schedule, t);
            spec.c * b1 + spec.c_prime * b2
        })
        .collect()
}

/// Per-checkpoint `(1 - delta)`-quantile of the error across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileEnvelope {
    pub delta: f64,
    pub n_seeds: usize,
    pub quantile: Vec<f64>,
    /// Distribution-free 95% interval from binomial order statistics.
    pub ci: Vec<Interval>,
}

/// `curves[seed][checkpoint]`; needs at least `10 / delta` seeds.
pub fn quantile_envelope(curves: &[Vec<f64>], delta: f64) -> Result<QuantileEnvelope> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParameter(format!("delta must lie in (0, 1), got {delta}")));
    }
    let needed = (10.0 / delta).ceil() as usize;
    if curves.len() < needed {
        return Err(Error::InsufficientSeeds { needed, got: curves.len() });
    }
    let n = curves.len();
    let len = curves[0].len();
    if let Some(c) = curves.iter().find(|c| c.len() != len) {
        return Err(Error::DimensionMismatch { what: "error curve", expected: len, found: c.len() });
    }
    let q = 1.0 - delta;
    let half = 1.96 * (n as f64 * q * (1.0 - q)).sqrt();
    let lo_rank = ((n as f64 * q - half).floor().max(1.0) as usize).min(n) - 1;
    let hi_rank = ((n as f64 * q + half).ceil().max(1.0) as usize).min(n) - 1;
    let mut quantile = Vec::with_capacity(len);
    let mut ci = Vec::with_capacity(len);
    for i in 0..len {
        let col: Vec<f64> = curves.iter().map(|c| c[i]).collect();
        let sorted = stats::sorted_copy(&col);
        quantile.push(stats::quantile_sorted(&sorted, q));
        ci.push(Interval { lo: sorted[lo_rank], hi: sorted[hi_rank] });
    }
    Ok(QuantileEnvelope { delta, n_seeds: n, quantile, ci })
}

/// Constants fitted on the calibration batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FittedConstants {
    #[serde(rename = "C")]
    pub c: f64,
    #[serde(rename = "Cp")]
    pub c_prime: f64,
}

/// Outcome of a split-sample bound check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub variant: BoundVariant,
    pub fitted: FittedConstants,
    pub quantile_exponent: f64,
    pub quantile_fit: PowerLawFit,
    pub predicted_exponent: f64,
    pub exponent_gap: f64,
    /// Prediction of the other envelope form (main-text vs ReLU variant), when defined.
    pub alternative_exponent: Option<f64>,
    /// Envelope (calibrated on batch A) lies above batch B's quantile everywhere.
    pub domination: bool,
    /// Whether non-negative constants could be scaled to cover batch A at all.
    pub majorizes_calibration: bool,
    /// `min_t (envelope - q_B) / q_B`.
    pub slack_min: f64,
    pub ts: Vec<f64>,
    pub quantile_a: Vec<f64>,
    pub quantile_b: Vec<f64>,
    pub envelope: Vec<f64>,
}

/// Weighted non-negative least squares of `q` on two basis columns, with
/// relative weights `1 / q^2`.
fn nnls2(q: &[f64], b1: &[f64], b2: &[f64]) -> (f64, f64) {
    let w: Vec<f64> = q.iter().map(|x| 1.0 / (x * x)).collect();
    let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).zip(&w).map(|((x, y), wi)| x * y * wi).sum() };
    let resid = |c1: f64, c2: f64| -> f64 {
        q.iter().zip(b1).zip(b2).zip(&w).map(|(((y, u), v), wi)| wi * (y - c1 * u - c2 * v).powi(2)).sum()
    };
    let (a11, a12, a22) = (dot(b1, b1), dot(b1, b2), dot(b2, b2));
    let (r1, r2) = (dot(b1, q), dot(b2, q));
    let det = a11 * a22 - a12 * a12;
    let mut candidates = Vec::new();
    if det.abs() > 1e-14 * a11 * a22 {
        let c1 = (r1 * a22 - r2 * a12) / det;
        let c2 = (a11 * r2 - a12 * r1) / det;
        if c1 >= 0.0 && c2 >= 0.0 {
            candidates.push((c1, c2));
        }
    }
    if a11 > 0.0 {
        candidates.push(((r1 / a11).max(0.0), 0.0));
    }
    if a22 > 0.0 {
        candidates.push((0.0, (r2 / a22).max(0.0)));
    }
    candidates
        .into_iter()
        .min_by(|a, b| resid(a.0, a.1).total_cmp(&resid(b.0, b.1)))
        .unwrap_or((0.0, 0.0))
}

/// Calibrate `(C, C')` on batch A, then test domination on batch B.
///
/// `ts` are the checkpoint times shared by every curve; only `t >= burn_in`
/// enter the fits and the domination check. The tail exponent is fitted on the
/// quantile of both batches pooled.
pub fn verify_bound(
    batch_a: &[Vec<f64>],
    batch_b: &[Vec<f64>],
    ts: &[f64],
    spec: &BoundSpec,
    schedule: &StepSchedule,
    burn_in: f64,
) -> Result<BoundReport> {
    let qa = quantile_envelope(batch_a, spec.delta)?;
    let qb = quantile_envelope(batch_b, spec.delta)?;
    let pooled: Vec<Vec<f64>> = batch_a.iter().chain(batch_b).cloned().collect();
    let qp = quantile_envelope(&pooled, spec.delta)?;
    let idx: Vec<usize> = (0..ts.len()).filter(|&i| ts[i] >= burn_in.max(1.0)).collect();
    if idx.len() < MIN_FIT_POINTS {
        return Err(Error::WindowTooSmall { points: idx.len(), needed: MIN_FIT_POINTS });
    }
    let tw: Vec<f64> = idx.iter().map(|&i| ts[i]).collect();
    let qa_w: Vec<f64> = idx.iter().map(|&i| qa.quantile[i]).collect();
    let qb_w: Vec<f64> = idx.iter().map(|&i| qb.quantile[i]).collect();
    if let Some(i) = qa_w.iter().chain(&qb_w).position(|&q| !(q > 0.0)) {
        return Err(Error::NonPositiveValue { t: tw[i % tw.len()], value: 0.0 });
    }
    let (b1, b2): (Vec<f64>, Vec<f64>) = tw.iter().map(|&t| spec.basis(schedule, t)).unzip();
    let (mut c1, mut c2) = nnls2(&qa_w, &b1, &b2);
    let env = |c1: f64, c2: f64| -> Vec<f64> { b1.iter().zip(&b2).map(|(u, v)| c1 * u + c2 * v).collect() };
    // scale the least-squares envelope up until it covers batch A
    let e = env(c1, c2);
    let scale = qa_w.iter().zip(&e).map(|(q, e)| q / e).fold(0.0f64, f64::max);
    let majorizes = scale.is_finite() && scale > 0.0;
    if majorizes && scale > 1.0 {
        c1 *= scale;
        c2 *= scale;
    }
    let envelope = env(c1, c2);
    let tol = 1e-12;
    let domination = majorizes && envelope.iter().zip(&qb_w).all(|(e, q)| *e >= q * (1.0 - tol));
    let slack_min = envelope.iter().zip(&qb_w).map(|(e, q)| (e - q) / q).fold(f64::INFINITY, f64::min);
    let qfit = fit_power_law(ts, &qp.quantile, (tw[0], *tw.last().unwrap()))?;
    let predicted = spec.predicted_exponent();
    Ok(BoundReport {
        variant: spec.variant,
        fitted: FittedConstants { c: c1, c_prime: c2 },
        quantile_exponent: qfit.exponent,
        quantile_fit: qfit,
        predicted_exponent: predicted,
        exponent_gap: qfit.exponent - predicted,
        alternative_exponent: spec.alternative_exponent(),
        domination,
        majorizes_calibration: majorizes,
        slack_min,
        ts: tw,
        quantile_a: qa_w,
        quantile_b: qb_w,
        envelope,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn grid() -> Vec<f64> {
        (0..30).map(|i| 1.3f64.powi(i).round()).collect()
    }

    #[test]
    fn exact_power_laws() {
        let ts = grid();
        let ys: Vec<f64> = ts.iter().map(|t| 1.0 / t).collect();
        let f = fit_power_law(&ts, &ys, (1.0, 1e9)).unwrap();
        assert_abs_diff_eq!(f.exponent, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(f.r_squared, 1.0, epsilon = 1e-12);
        let ys: Vec<f64> = ts.iter().map(|t| 3.0 * t.powf(-0.5)).collect();
        let f = fit_power_law(&ts, &ys, (1.0, 1e9)).unwrap();
        assert_abs_diff_eq!(f.exponent, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(f.log_intercept, 3f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn noisy_power_law_exponent() {
        let ts = grid();
        let mut rng = seeds::rng(99);
        for _ in 0..100 {
            let ys: Vec<f64> = ts.iter().map(|t| (1.0 + 0.01 * rng.gen_range(-1.0..1.0)) / t).collect();
            let f = fit_power_law(&ts, &ys, (1.0, 1e9)).unwrap();
            assert!((0.97..=1.03).contains(&f.exponent), "{}", f.exponent);
        }
    }

    #[test]
    fn fit_errors() {
        let ts = grid();
        let mut ys: Vec<f64> = ts.iter().map(|t| 1.0 / t).collect();
        assert!(matches!(fit_power_law(&ts[..5], &ys[..5], (0.0, 1e9)), Err(Error::WindowTooSmall { .. })));
        ys[3] = 0.0;
        assert!(matches!(fit_power_law(&ts, &ys, (0.0, 1e9)), Err(Error::NonPositiveValue { .. })));
        // the floor-aware variant drops it
        assert!(fit_power_law_above(&ts, &ys, (0.0, 1e9), 1e-12).is_ok());
    }

    #[test]
    fn geometric_series_is_flagged() {
        let ts: Vec<f64> = (1..60).map(f64::from).collect();
        let ys: Vec<f64> = ts.iter().map(|t| 0.7f64.powf(*t)).collect();
        let c = classify_decay(&ts, &ys, (1.0, 60.0), 1e-12).unwrap();
        assert_eq!(c.regime, DecayRegime::Geometric);
        assert_abs_diff_eq!(c.geometric_rate, -(0.7f64.ln()), epsilon = 1e-10);
        let ys: Vec<f64> = ts.iter().map(|t| t.powf(-1.2)).collect();
        assert_eq!(classify_decay(&ts, &ys, (1.0, 60.0), 1e-12).unwrap().regime, DecayRegime::Polynomial);
    }

    #[test]
    fn bound_curve_examples() {
        let sched = StepSchedule::new(1.0, 1.0).unwrap();
        let spec = BoundSpec::new(BoundVariant::LinearHp, 1.0, 1.0, 1.0, 2.0, 0.1).unwrap();
        assert_abs_diff_eq!(bound_curve(&spec, &sched, &[4.0])[0], 0.75, epsilon = 1e-15);
        let pure = spec.with_constants(2.0, 0.0);
        let ts = grid();
        for (t, y) in ts.iter().zip(bound_curve(&pure, &sched, &ts)) {
            assert_abs_diff_eq!(y, 2.0 * t.powf(-0.5), epsilon = 1e-15);
        }
        let relu = BoundSpec::new(BoundVariant::ReluAppendix, 1.5, 0.8, 1.0, 2.0, 0.1).unwrap();
        assert_abs_diff_eq!(bound_curve(&relu, &sched, &[16.0])[0], 16f64.powf(-0.25) + 16f64.powf(-1.2), epsilon = 1e-15);
        assert_abs_diff_eq!(relu.predicted_exponent(), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn envelopes_decrease_for_valid_parameters() {
        let mut rng = seeds::rng(5);
        for _ in 0..200 {
            let variant = [BoundVariant::LinearHp, BoundVariant::NonlinearHp, BoundVariant::ReluAppendix, BoundVariant::MomentP]
                [rng.gen_range(0..4)];
            let spec = BoundSpec::new(variant, rng.gen_range(1.01..4.0), rng.gen_range(0.51..1.0), rng.gen_range(0.1..1.0), 4.0, 0.1)
                .unwrap()
                .with_constants(rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0));
            let sched = StepSchedule::new(rng.gen_range(0.1..2.0), spec.eta).unwrap();
            let c = bound_curve(&spec, &sched, &grid());
            assert!(c.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn bound_spec_validation() {
        assert!(BoundSpec::new(BoundVariant::LinearHp, 1.0, 0.8, 1.0, 2.0, 1.5).is_err());
        assert!(BoundSpec::new(BoundVariant::LinearHp, -1.0, 0.8, 1.0, 2.0, 0.1).is_err());
        assert!(BoundSpec::new(BoundVariant::ReluAppendix, 0.9, 0.8, 1.0, 2.0, 0.1).is_err());
    }

    fn noisy_curves(n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = seeds::rng(seed);
        (0..n).map(|_| grid().iter().map(|t| rng.gen_range(0.5..1.5) / t.sqrt()).collect()).collect()
    }

    #[test]
    fn quantile_examples() {
        let curves = noisy_curves(40, 1);
        let med = quantile_envelope(&curves, 0.5).unwrap();
        for i in 0..grid().len() {
            let col: Vec<f64> = curves.iter().map(|c| c[i]).collect();
            let s = stats::sorted_copy(&col);
            assert_abs_diff_eq!(med.quantile[i], 0.5 * (s[19] + s[20]), epsilon = 1e-15);
        }
        let same = vec![grid(); 20];
        assert_eq!(quantile_envelope(&same, 0.5).unwrap().quantile, grid());
        assert!(matches!(quantile_envelope(&curves[..5], 0.1), Err(Error::InsufficientSeeds { .. })));
    }

    #[test]
    fn quantile_is_monotone_in_delta() {
        let curves = noisy_curves(200, 2);
        let deltas = [0.5, 0.3, 0.2, 0.1, 0.05];
        let qs: Vec<_> = deltas.iter().map(|&d| quantile_envelope(&curves, d).unwrap().quantile).collect();
        for w in qs.windows(2) {
            assert!(w[0].iter().zip(&w[1]).all(|(a, b)| a <= b));
        }
    }

    #[test]
    fn synthetic_exact_power_law_is_dominated_tightly() {
        let ts: Vec<f64> = grid();
        let beta = 1.2;
        let curves: Vec<Vec<f64>> = vec![ts.iter().map(|t| 0.7 * t.powf(-beta / 2.0)).collect(); 100];
        let sched = StepSchedule::new(1.0, 0.9).unwrap();
        let spec = BoundSpec::new(BoundVariant::LinearHp, beta, 0.9, 1.0, 2.0, 0.1).unwrap();
        let r = verify_bound(&curves, &curves, &ts, &spec, &sched, 1.0).unwrap();
        assert!(r.domination);
        assert!(r.slack_min.abs() < 1e-9, "{}", r.slack_min);
        assert_abs_diff_eq!(r.quantile_exponent, beta / 2.0, epsilon = 1e-10);
        assert_abs_diff_eq!(r.fitted.c, 0.7, epsilon = 1e-9);
    }

    #[test]
    fn calibration_batch_is_always_covered() {
        let ts = grid();
        let a = noisy_curves(100, 3);
        let b = noisy_curves(100, 4);
        let sched = StepSchedule::new(1.0, 0.8).unwrap();
        let spec = BoundSpec::new(BoundVariant::LinearHp, 1.0, 0.8, 1.0, 2.0, 0.1).unwrap();
        let r = verify_bound(&a, &b, &ts, &spec, &sched, 1.0).unwrap();
        assert!(r.majorizes_calibration);
        assert!(r.envelope.iter().zip(&r.quantile_a).all(|(e, q)| *e >= q * (1.0 - 1e-12)));
    }
}
