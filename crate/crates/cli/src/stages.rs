//! Pipeline stages. Each reads its declared inputs from the artifact store
//! and writes its outputs back; runs over seeds are parallel, and every file
//! depends only on its own seed, so outputs do not depend on the worker count.

use polytd::approx::ValueModel;
use polytd::chain::{sample_trajectory, tv_curve, Start, TransitionKernel};
use polytd::decomp::{
    binned_increments, decompose, linear_fixed_point, martingale_variance_curve, moment_curve_from_errors,
    reference_fixed_point, FixedPoint, SeedCurve, MIN_SEEDS,
};
use polytd::depend::{
    block_covariance_check, coupling_curve, coupling_envelope, covariance_mixing, geometric_lags, make_blocks,
    BlockCovReport, CouplingCurve, CouplingEnvelope, MixingEstimate,
};
use polytd::plot::{loglog_svg, Series, Style};
use polytd::rates::{
    classify_decay, fit_power_law, fit_power_law_above, quantile_envelope, verify_bound, BoundReport, BoundSpec,
    DecayClassification, PowerLawFit,
};
use polytd::relu_diag::{default_probes, track_crossings, write_crossings_csv, CrossingSummary};
use polytd::seeds::{self, purpose};
use polytd::td::{run_td, IterateHistory};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifacts::{seed_file, Store, CONFIG, FIXED_POINT, KERNEL, SEEDS};
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult, StageContext};

pub const MIXING: &str = "mixing.json";
pub const BLOCKS: &str = "blocks.json";
pub const COUPLING: &str = "coupling.json";
pub const DECOMPOSE: &str = "decompose.json";
pub const CROSSINGS: &str = "crossings.json";
pub const RATES: &str = "rates.json";
pub const TRAIN: &str = "train.json";

/// Stage names in pipeline order.
pub const STAGES: [&str; 9] = ["simulate", "train", "decompose", "mixing", "blocks", "couple", "crossings", "rates", "report"];

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> polytd::Result<()>, stage: &'static str) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf).stage(stage)?;
    Ok(buf)
}

pub fn load_kernel(store: &Store) -> CliResult<TransitionKernel> {
    TransitionKernel::from_json(&store.read(KERNEL, "simulate")?).stage("read kernel")
}

fn load_seeds(store: &Store) -> CliResult<Vec<u64>> {
    store.read_json(SEEDS, "simulate")
}

fn load_history(store: &Store, index: usize) -> CliResult<IterateHistory> {
    IterateHistory::from_json(&store.read(&seed_file("histories", index, "json"), "train")?).stage("read history")
}

fn load_histories(store: &Store, n: usize) -> CliResult<Vec<IterateHistory>> {
    (0..n).into_par_iter().map(|i| load_history(store, i)).collect()
}

fn rewards_functional(kernel: &TransitionKernel) -> Vec<f64> {
    kernel.rewards().to_vec()
}

/// Power-law exponent of the exact reward autocovariance over `window`.
fn fitted_beta(kernel: &TransitionKernel, window: (f64, f64)) -> CliResult<MixingEstimate> {
    let f = rewards_functional(kernel);
    let lags = geometric_lags((4.0 * window.1).ceil() as usize, 1.15);
    covariance_mixing(kernel, &f, &f, &lags, window).stage("mixing")
}

/// `simulate`: the kernel, the resolved seed list and (optionally) the sampled paths.
pub fn simulate(cfg: &ExperimentConfig, store: &Store) -> CliResult<()> {
    let kernel = cfg.build_kernel()?;
    let seeds = cfg.seed_list()?;
    store.write(CONFIG, cfg.canonical_json().as_bytes())?;
    store.write(KERNEL, kernel.to_json().stage("simulate")?.as_bytes())?;
    store.write_json(SEEDS, &seeds)?;
    if cfg.diagnostics.trajectories {
        seeds.par_iter().enumerate().try_for_each(|(i, &seed)| {
            let tr = sample_trajectory(&kernel, cfg.start, cfg.steps as usize, seed).stage("simulate")?;
            store.write(&seed_file("trajectories", i, "csv"), &csv_bytes(|b| tr.write_csv(b), "simulate")?)
        })?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub n_seeds: usize,
    pub steps: u64,
    pub model_kind: String,
    pub fixed_point_residual: f64,
    pub initial_error: f64,
    pub final_errors: Vec<f64>,
}

fn fixed_point(cfg: &ExperimentConfig, kernel: &TransitionKernel, model0: &ValueModel) -> CliResult<FixedPoint> {
    match (model0, &cfg.model) {
        (ValueModel::Linear(m), _) => linear_fixed_point(kernel, &m.features, cfg.discount).stage("fixed point"),
        (ValueModel::Relu(_), crate::config::ModelSpec::Relu { reference, .. }) => {
            reference_fixed_point(kernel, model0, cfg.discount, &(*reference).into()).stage("fixed point")
        }
        _ => unreachable!("model spec and model agree"),
    }
}

/// `train`: the fixed point and one TD run per seed. Paths are regenerated
/// from the seeds, which reproduces the exported trajectories exactly.
pub fn train(cfg: &ExperimentConfig, store: &Store) -> CliResult<()> {
    let kernel = load_kernel(store)?;
    let seeds = load_seeds(store)?;
    let model0 = cfg.build_model(kernel.n_states())?;
    let fp = fixed_point(cfg, &kernel, &model0)?;
    store.write_json(FIXED_POINT, &fp)?;
    let td = cfg.td_config(cfg.needs_stream())?;
    let finals: Vec<f64> = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| {
            let h = run_td(&kernel, &model0, &td, seed).stage("train")?;
            store.write(&seed_file("histories", i, "json"), h.to_json().stage("train")?.as_bytes())?;
            if cfg.diagnostics.step_csv {
                store.write(&seed_file("histories", i, "csv"), &csv_bytes(|b| h.write_csv(b, Some(&fp.theta_star)), "train")?)?;
            }
            Ok(*h.errors(&fp.theta_star).last().expect("history has checkpoints"))
        })
        .collect::<CliResult<_>>()?;
    let init = model0.params().iter().zip(&fp.theta_star).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    store.write_json(
        TRAIN,
        &TrainSummary {
            n_seeds: seeds.len(),
            steps: cfg.steps,
            model_kind: model0.kind().to_string(),
            fixed_point_residual: fp.residual,
            initial_error: init,
            final_errors: finals,
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecomposeSummary {
    pub n_seeds: usize,
    pub reconstruction_error: f64,
    pub z: f64,
    pub bins_tested: usize,
    pub bins_within: usize,
    /// Mean of `||M_t||^2` across seeds, when there are enough seeds.
    pub martingale_variance: Option<SeedCurve>,
}

/// `decompose`: martingale/remainder split per run plus the pooled increment check.
pub fn decompose_stage(cfg: &ExperimentConfig, store: &Store) -> CliResult<()> {
    let kernel = load_kernel(store)?;
    let n = load_seeds(store)?.len();
    let fp: FixedPoint = store.read_json(FIXED_POINT, "train")?;
    let hs = load_histories(store, n)?;
    let decomps: Vec<_> = hs
        .par_iter()
        .enumerate()
        .map(|(i, h)| {
            let mut d = decompose(h, &kernel, &fp.theta_star).stage("decompose")?;
            store.write(&seed_file("decomposition", i, "csv"), &csv_bytes(|b| d.write_csv(b), "decompose")?)?;
            d.increment_norms = Vec::new();
            Ok(d)
        })
        .collect::<CliResult<_>>()?;
    let w = &cfg.windows;
    let bins = binned_increments(&hs, &kernel, &fp.theta_star, w.time_bins, w.min_bin_count, w.z).stage("decompose")?;
    let recon = decomps.iter().map(|d| d.reconstruction_error).fold(bins.reconstruction_error, f64::max);
    let variance = if decomps.len() >= MIN_SEEDS { Some(martingale_variance_curve(&decomps, 0).stage("decompose")?) } else { None };
    if let Some(v) = &variance {
        let svg = loglog_svg("martingale term", "t", "mean ||M_t||^2", &[Series::new("across seeds", &v.times_f64(), &v.values, Style::Line)]);
        store.write("decompose.svg", svg.as_bytes())?;
    }
    store.write_json(
        DECOMPOSE,
        &DecomposeSummary {
            n_seeds: n,
            reconstruction_error: recon,
            z: bins.z,
            bins_tested: bins.bins.len(),
            bins_within: bins.within,
            martingale_variance: variance,
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingSummary {
    pub kernel_id: String,
    pub window: (f64, f64),
    pub aperiodic: bool,
    /// Power-law fit of the TV distance from state 0.
    pub tv_fit: Option<PowerLawFit>,
    pub tv_regime: Option<DecayClassification>,
    pub tv_note: Option<String>,
    /// Exact reward autocovariance and its fit.
    pub covariance: MixingEstimate,
    pub beta_hat: Option<f64>,
}

/// `mixing`: needs nothing but a kernel.
pub fn mixing(kernel: &TransitionKernel, window: (f64, f64), store: &Store) -> CliResult<MixingSummary> {
    let t_max = (4.0 * window.1).ceil() as usize;
    let tv = tv_curve(kernel, 0, t_max).stage("mixing")?;
    let ts: Vec<f64> = (0..tv.len()).map(|t| t as f64).collect();
    let mut note = None;
    let tv_fit = fit_power_law_above(&ts, &tv, window, 1e-14).map_err(|e| note = Some(e.to_string())).ok();
    let tv_regime = classify_decay(&ts, &tv, window, 1e-14).ok();
    let cov = fitted_beta(kernel, window)?;
    let mut csv = String::from("t,tv\n");
    for (t, v) in tv.iter().enumerate() {
        csv.push_str(&format!("{t},{v:?}\n"));
    }
    store.write("mixing.csv", csv.as_bytes())?;
    let mut series = vec![Series::new("TV from state 0", &ts, &tv, Style::Points)];
    if let Some(f) = &tv_fit {
        series.push(Series::reference_slope(&format!("slope {:.2}", f.exponent), window.0, window.1, f.predict(window.0), f.exponent));
    }
    store.write("mixing.svg", loglog_svg("total variation to stationarity", "t", "TV", &series).as_bytes())?;
    let s = MixingSummary {
        kernel_id: kernel.id(),
        window,
        aperiodic: kernel.is_aperiodic(),
        tv_fit,
        tv_regime,
        tv_note: note,
        beta_hat: cov.fit.map(|f| f.exponent),
        covariance: cov,
    };
    store.write_json(MIXING, &s)?;
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlocksSummary {
    pub beta_nominal: f64,
    pub n_blocks: usize,
    pub report: BlockCovReport,
}

/// `blocks`: block sums of the reward over stationary paths.
pub fn blocks(cfg: &ExperimentConfig, store: &Store) -> CliResult<()> {
    let kernel = load_kernel(store)?;
    let spec = cfg.diagnostics.blocks.clone().unwrap_or_default();
    let beta = fitted_beta(&kernel, cfg.windows.mixing)?
        .fit
        .map(|f| f.exponent)
        .ok_or_else(|| CliError::Stage { stage: "blocks", source: polytd::Error::Numerical("mixing exponent could not be fitted".into()) })?;
    let f = rewards_functional(&kernel);
    let (b, k) = (spec.block_size, spec.n_blocks);
    let sets = (0..spec.n_seeds)
        .into_par_iter()
        .map(|i| {
            let tr = sample_trajectory(&kernel, Start::Stationary, b * k, seeds::derive(spec.base_seed, purpose::BLOCKS, i))?;
            make_blocks(&tr, &f, b)
        })
        .collect::<polytd::Result<Vec<_>>>()
        .stage("blocks")?;
    let gaps = geometric_lags(k / 2, 1.3);
    let report = block_covariance_check(&sets, &gaps, beta, cfg.windows.blocks).stage("blocks")?;
    let mut csv = String::from("gap,cov,se\n");
    for ((m, c), s) in report.all.gaps.iter().zip(&report.all.cov).zip(&report.all.se) {
        csv.push_str(&format!("{m},{c:?},{s:?}\n"));
    }
    store.write("blocks.csv", csv.as_bytes())?;
    store.write_json(BLOCKS, &BlocksSummary { beta_nominal: beta, n_blocks: k, report })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingSummary {
    pub z: f64,
    pub curve: CouplingCurve,
    pub coupling_fit: Option<PowerLawFit>,
    pub tv_fit: Option<PowerLawFit>,
    pub envelope: Option<CouplingEnvelope>,
}

/// `couple`: maximal coupling from two starts; a kernel is the only input.
pub fn couple(cfg: &ExperimentConfig, store: &Store) -> CliResult<()> {
    let kernel = load_kernel(store)?;
    let spec = cfg.diagnostics.coupling.clone().unwrap_or_default();
    let curve = coupling_curve(&kernel, spec.x0, spec.y0, spec.t_max, spec.n_seeds, spec.base_seed).stage("couple")?;
    let half = spec.n_seeds / 2;
    let cal = coupling_curve(&kernel, spec.x0, spec.y0, spec.t_max, half, spec.base_seed).stage("couple")?;
    let held = coupling_curve(&kernel, spec.x0, spec.y0, spec.t_max, spec.n_seeds - half, spec.base_seed.wrapping_add(1)).stage("couple")?;
    let w = cfg.windows.coupling;
    let ts: Vec<f64> = (0..=spec.t_max).map(|t| t as f64).collect();
    let coupling_fit = fit_power_law_above(&ts, &curve.p_apart, w, f64::MIN_POSITIVE).ok();
    let tv_fit = fit_power_law_above(&ts, &curve.tv_lower, w, 1e-15).ok();
    let envelope = coupling_envelope(&cal, &held, w).ok();
    let mut csv = String::from("t,p_apart,se,tv_lower\n");
    for t in 0..=spec.t_max {
        csv.push_str(&format!("{t},{:?},{:?},{:?}\n", curve.p_apart[t], curve.se[t], curve.tv_lower[t]));
    }
    store.write("coupling.csv", csv.as_bytes())?;
    let svg = loglog_svg(
        "maximal coupling",
        "t",
        "probability",
        &[Series::new("P(x_t != y_t)", &ts, &curve.p_apart, Style::Points), Series::new("TV lower bound", &ts, &curve.tv_lower, Style::Line)],
    );
    store.write("coupling.svg", svg.as_bytes())?;
    store.write_json(COUPLING, &CouplingSummary { z: spec.z, curve, coupling_fit, tv_fit, envelope })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossingsSummary {
    pub probes: usize,
    pub per_seed: Vec<CrossingSummary>,
    pub total: u64,
    pub last_decade_share: f64,
    pub violation_rate: f64,
}

/// `crossings`: activation-region crossings along each recorded ReLU run.
pub fn crossings(cfg: &ExperimentConfig, store: &Store) -> CliResult<()> {
    let n = load_seeds(store)?.len();
    let per_seed: Vec<CrossingSummary> = (0..n)
        .into_par_iter()
        .map(|i| {
            let h = load_history(store, i)?;
            let ValueModel::Relu(net0) = &h.model0 else {
                return Err(CliError::Stage {
                    stage: "crossings",
                    source: polytd::Error::InvalidParameter("crossing diagnostics need a ReLU model".into()),
                });
            };
            let probes = default_probes(net0, cfg.windows.probes, seeds::derive(h.seed, purpose::PROBES, 0));
            let (records, s) = track_crossings(&h, &probes).stage("crossings")?;
            store.write(&seed_file("crossings", i, "csv"), &csv_bytes(|b| write_crossings_csv(b, &records), "crossings")?)?;
            Ok(s)
        })
        .collect::<CliResult<_>>()?;
    let total: u64 = per_seed.iter().map(|s| s.total).sum();
    let last: u64 = per_seed.iter().map(|s| s.last_decade).sum();
    let steps: u64 = per_seed.iter().map(|s| s.steps).sum();
    let viol: u64 = per_seed.iter().map(|s| s.bound_violations).sum();
    store.write_json(
        CROSSINGS,
        &CrossingsSummary {
            probes: cfg.windows.probes,
            per_seed,
            total,
            last_decade_share: if total == 0 { 0.0 } else { last as f64 / total as f64 },
            violation_rate: if steps == 0 { 0.0 } else { viol as f64 / steps as f64 },
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatesSummary {
    pub beta: f64,
    pub tolerance: f64,
    pub reports: Vec<BoundReport>,
    /// Index of the variant whose prediction is closest to the fitted exponent.
    pub chosen: usize,
    pub moment2_exponent: Option<f64>,
    pub fixed_point_residual: f64,
}

/// `rates`: split-sample bound checks on the error quantile curve.
pub fn rates(cfg: &ExperimentConfig, store: &Store) -> CliResult<()> {
    let kernel = load_kernel(store)?;
    let n = load_seeds(store)?.len();
    let fp: FixedPoint = store.read_json(FIXED_POINT, "train")?;
    let spec = cfg.diagnostics.rates.clone().unwrap_or_default();
    let beta = match spec.beta {
        Some(b) => b,
        None => fitted_beta(&kernel, cfg.windows.mixing)?.fit.map(|f| f.exponent).ok_or_else(|| CliError::Stage {
            stage: "rates",
            source: polytd::Error::Numerical("mixing exponent could not be fitted; set diagnostics.rates.beta".into()),
        })?,
    };
    let curves: Vec<(Vec<u64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let h = load_history(store, i)?;
            Ok((h.checkpoint_times(), h.errors(&fp.theta_star)))
        })
        .collect::<CliResult<_>>()?;
    let times = curves[0].0.clone();
    let ts: Vec<f64> = times.iter().map(|&t| t as f64).collect();
    let errs: Vec<Vec<f64>> = curves.into_iter().map(|c| c.1).collect();
    let schedule = cfg.td_config(false)?.schedule;
    let half = errs.len() / 2;
    let reports: Vec<BoundReport> = cfg
        .rate_variants(&spec)
        .into_iter()
        .map(|v| {
            let b = BoundSpec::new(v, beta, cfg.schedule.eta, spec.holder_gamma, 2.0, spec.delta)?;
            verify_bound(&errs[..half], &errs[half..], &ts, &b, &schedule, spec.burn_in)
        })
        .collect::<polytd::Result<_>>()
        .stage("rates")?;
    let chosen = (0..reports.len())
        .min_by(|&a, &b| reports[a].exponent_gap.abs().total_cmp(&reports[b].exponent_gap.abs()))
        .unwrap_or(0);
    let moment2_exponent = moment_curve_from_errors(&times, &errs, 2, 0)
        .and_then(|m| fit_power_law(&ts, &m.values, (spec.burn_in, f64::INFINITY)))
        .map(|f| f.exponent)
        .ok();
    let pooled = quantile_envelope(&errs, spec.delta).stage("rates")?;
    let r = &reports[chosen];
    let mut csv = String::from("t,quantile\n");
    for (t, q) in ts.iter().zip(&pooled.quantile) {
        csv.push_str(&format!("{t},{q:?}\n"));
    }
    store.write("rates.csv", csv.as_bytes())?;
    let svg = loglog_svg(
        "error quantile",
        "t",
        &format!("{}-quantile of error", 1.0 - spec.delta),
        &[
            Series::new("pooled quantile", &ts, &pooled.quantile, Style::Points),
            Series::new(&format!("{} envelope", r.variant.name()), &r.ts, &r.envelope, Style::Line),
        ],
    );
    store.write("rates.svg", svg.as_bytes())?;
    store.write_json(
        RATES,
        &RatesSummary { beta, tolerance: spec.tolerance, reports, chosen, moment2_exponent, fixed_point_residual: fp.residual },
    )
}
