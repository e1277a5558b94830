//! Experiment configuration: parsing, validation and model construction.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use polytd::approx::{Embedding, FeatureMap, LinearModel, ReluNetwork, ValueModel};
use polytd::chain::{make_random_chain, make_renewal_chain, Start, TransitionKernel};
use polytd::decomp::ReferenceRun;
use polytd::rates::BoundVariant;
use polytd::seeds::{self, purpose};
use polytd::td::{StepSchedule, TdConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult, StageContext};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub chain: ChainSpec,
    pub model: ModelSpec,
    pub schedule: ScheduleSpec,
    pub discount: f64,
    /// Number of TD updates per run.
    pub steps: u64,
    pub seeds: SeedSpec,
    #[serde(default)]
    pub start: Start,
    #[serde(default)]
    pub diagnostics: Diagnostics,
    #[serde(default)]
    pub windows: Windows,
    /// Artifact directory; `--out` takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChainSpec {
    /// Renewal chain; rewards default to the indicator of state 0.
    Renewal {
        kappa: f64,
        n_states: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rewards: Option<Vec<f64>>,
    },
    /// Dense random kernel.
    Random { n_states: usize, seed: u64 },
    /// Explicit rows.
    Matrix {
        rows: Vec<Vec<f64>>,
        rewards: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        r_max: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Tabular,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Coordinate,
    OneHot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Linear {
        features: FeatureKind,
        /// Feature dimension for random features.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dim: Option<usize>,
        #[serde(default)]
        feature_seed: u64,
    },
    Relu {
        hidden: Vec<usize>,
        #[serde(default = "yes")]
        bias: bool,
        budget: f64,
        x_max: f64,
        #[serde(default = "coordinate")]
        embedding: EmbeddingKind,
        #[serde(default)]
        init_seed: u64,
        #[serde(default)]
        reference: ReferenceSpec,
    },
}

fn yes() -> bool {
    true
}

fn coordinate() -> EmbeddingKind {
    EmbeddingKind::Coordinate
}

/// Long run that defines the fixed point of a ReLU model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceSpec {
    pub steps: u64,
    pub c_alpha: f64,
    pub eta: f64,
    pub seed: u64,
    pub polish_iters: usize,
    pub polish_step: f64,
}

impl Default for ReferenceSpec {
    fn default() -> Self {
        let r = ReferenceRun::default();
        Self { steps: r.steps, c_alpha: r.c_alpha, eta: r.eta, seed: r.seed, polish_iters: r.polish_iters, polish_step: r.polish_step }
    }
}

impl From<ReferenceSpec> for ReferenceRun {
    fn from(r: ReferenceSpec) -> Self {
        ReferenceRun { steps: r.steps, c_alpha: r.c_alpha, eta: r.eta, seed: r.seed, polish_iters: r.polish_iters, polish_step: r.polish_step }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub c_alpha: f64,
    pub eta: f64,
}

/// Either an explicit list or `n_seeds` seeds derived from `base_seed`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub list: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_seeds: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Diagnostics {
    pub decompose: bool,
    pub mixing: bool,
    pub blocks: Option<BlocksSpec>,
    pub coupling: Option<CouplingSpec>,
    pub crossings: bool,
    pub rates: Option<RatesSpec>,
    /// Write each sampled path as CSV in `simulate`.
    pub trajectories: bool,
    /// Write the per-step history CSV next to each JSON sidecar.
    pub step_csv: bool,
}

impl Default for Diagnostics {
    fn default() -> Self {
        Self {
            decompose: true,
            mixing: true,
            blocks: None,
            coupling: None,
            crossings: true,
            rates: None,
            trajectories: true,
            step_csv: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlocksSpec {
    pub block_size: usize,
    pub n_blocks: usize,
    pub n_seeds: u64,
    pub base_seed: u64,
}

impl Default for BlocksSpec {
    fn default() -> Self {
        Self { block_size: 5, n_blocks: 64, n_seeds: 200, base_seed: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CouplingSpec {
    pub x0: usize,
    pub y0: usize,
    pub t_max: usize,
    pub n_seeds: usize,
    pub base_seed: u64,
    /// Allowed shortfall below the exact lower bound, in standard errors.
    pub z: f64,
}

impl Default for CouplingSpec {
    fn default() -> Self {
        Self { x0: 0, y0: 1, t_max: 200, n_seeds: 10_000, base_seed: 9, z: 4.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RatesSpec {
    /// Envelope forms to test; empty selects the defaults of the model kind.
    pub variants: Vec<BoundVariant>,
    pub delta: f64,
    pub burn_in: f64,
    /// Mixing exponent; fitted from the kernel when absent.
    pub beta: Option<f64>,
    pub holder_gamma: f64,
    /// Allowed gap between fitted and predicted exponents.
    pub tolerance: f64,
}

impl Default for RatesSpec {
    fn default() -> Self {
        Self { variants: Vec::new(), delta: 0.1, burn_in: 1e3, beta: None, holder_gamma: 1.0, tolerance: 0.15 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Windows {
    /// Lag window for the mixing fits.
    pub mixing: (f64, f64),
    pub blocks: (f64, f64),
    pub coupling: (f64, f64),
    /// Time bins and minimum cell count of the increment check.
    pub time_bins: usize,
    pub min_bin_count: usize,
    pub z: f64,
    pub probes: usize,
}

impl Default for Windows {
    fn default() -> Self {
        Self { mixing: (2.0, 15.0), blocks: (1.0, 16.0), coupling: (2.0, 40.0), time_bins: 24, min_bin_count: 100, z: 4.0, probes: 64 }
    }
}

/// Overrides from the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub n_seeds: Option<u64>,
    pub steps: Option<u64>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::config(if path == "." { "<root>".to_string() } else { path }, e.into_inner().to_string())
        })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config("<file>", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn apply(&mut self, o: &Overrides) -> CliResult<()> {
        if let Some(n) = o.n_seeds {
            match &mut self.seeds.list {
                Some(list) if (n as usize) <= list.len() => list.truncate(n as usize),
                Some(list) => {
                    return Err(CliError::config("seeds.list", format!("--seeds {n} exceeds the {} listed seeds", list.len())));
                }
                None => self.seeds.n_seeds = Some(n),
            }
        }
        if let Some(t) = o.steps {
            self.steps = t;
        }
        Ok(())
    }

    /// Check every constraint that can be checked without building anything.
    pub fn validate(&self) -> CliResult<()> {
        let s = &self.schedule;
        if !(s.eta > 0.5 && s.eta <= 1.0) {
            return Err(CliError::config("schedule.eta", format!("must lie in (0.5, 1], got {}", s.eta)));
        }
        if !(s.c_alpha > 0.0 && s.c_alpha.is_finite()) {
            return Err(CliError::config("schedule.c_alpha", format!("must be positive, got {}", s.c_alpha)));
        }
        if !(0.0..1.0).contains(&self.discount) {
            return Err(CliError::config("discount", format!("must lie in [0, 1), got {}", self.discount)));
        }
        if self.steps == 0 {
            return Err(CliError::config("steps", "must be at least 1"));
        }
        self.seed_list()?;
        match &self.chain {
            ChainSpec::Renewal { kappa, n_states, rewards } => {
                if !(*kappa > 1.0 && kappa.is_finite()) {
                    return Err(CliError::config("chain.kappa", format!("must exceed 1, got {kappa}")));
                }
                if *n_states < 3 {
                    return Err(CliError::config("chain.n_states", format!("must be at least 3, got {n_states}")));
                }
                if let Some(r) = rewards {
                    if r.len() != *n_states {
                        return Err(CliError::config("chain.rewards", format!("expected {n_states} entries, got {}", r.len())));
                    }
                }
            }
            ChainSpec::Random { n_states, .. } if *n_states == 0 => {
                return Err(CliError::config("chain.n_states", "must be at least 1"));
            }
            ChainSpec::Random { .. } => {}
            ChainSpec::Matrix { rows, rewards, .. } => {
                if rows.is_empty() {
                    return Err(CliError::config("chain.rows", "must not be empty"));
                }
                if rewards.len() != rows.len() {
                    return Err(CliError::config("chain.rewards", format!("expected {} entries, got {}", rows.len(), rewards.len())));
                }
            }
        }
        match &self.model {
            ModelSpec::Linear { features: FeatureKind::Random, dim: None, .. } => {
                return Err(CliError::config("model.dim", "random features need a dimension"));
            }
            ModelSpec::Linear { .. } => {}
            ModelSpec::Relu { hidden, budget, x_max, .. } => {
                if hidden.is_empty() || hidden.contains(&0) {
                    return Err(CliError::config("model.hidden", "needs at least one layer, each of positive width"));
                }
                if !(*budget > 0.0) {
                    return Err(CliError::config("model.budget", format!("must be positive, got {budget}")));
                }
                if !(*x_max > 0.0) {
                    return Err(CliError::config("model.x_max", format!("must be positive, got {x_max}")));
                }
            }
        }
        let w = &self.windows;
        for (name, win) in [("windows.mixing", w.mixing), ("windows.blocks", w.blocks), ("windows.coupling", w.coupling)] {
            if !(win.0 > 0.0 && win.1 > win.0) {
                return Err(CliError::config(name, format!("needs 0 < lo < hi, got {win:?}")));
            }
        }
        if let Some(c) = &self.diagnostics.coupling {
            if c.n_seeds < 2 {
                return Err(CliError::config("diagnostics.coupling.n_seeds", "need at least 2 seeds"));
            }
        }
        if let Some(r) = &self.diagnostics.rates {
            if !(r.delta > 0.0 && r.delta < 1.0) {
                return Err(CliError::config("diagnostics.rates.delta", format!("must lie in (0, 1), got {}", r.delta)));
            }
            if let Some(b) = r.beta {
                if !(b > 0.0) {
                    return Err(CliError::config("diagnostics.rates.beta", format!("must be positive, got {b}")));
                }
            }
        }
        Ok(())
    }

    /// Resolved run seeds, distinct and in order.
    pub fn seed_list(&self) -> CliResult<Vec<u64>> {
        let s = &self.seeds;
        let list = match (&s.list, s.base_seed, s.n_seeds) {
            (Some(list), None, None) => list.clone(),
            (None, Some(base), Some(n)) => (0..n).map(|i| seeds::derive(base, purpose::TRAJECTORY, i)).collect(),
            (Some(_), _, _) => return Err(CliError::config("seeds", "give either `list` or `base_seed` with `n_seeds`, not both")),
            (None, None, _) => return Err(CliError::config("seeds.base_seed", "missing (or give `list`)")),
            (None, Some(_), None) => return Err(CliError::config("seeds.n_seeds", "missing")),
        };
        if list.is_empty() {
            return Err(CliError::config(if s.list.is_some() { "seeds.list" } else { "seeds.n_seeds" }, "need at least one seed"));
        }
        let mut seen = BTreeSet::new();
        for (i, x) in list.iter().enumerate() {
            if !seen.insert(*x) {
                let path = if s.list.is_some() { format!("seeds.list[{i}]") } else { "seeds".into() };
                return Err(CliError::config(path, format!("seed {x} appears twice")));
            }
        }
        Ok(list)
    }

    /// Canonical serialisation; its hash identifies the experiment.
    pub fn canonical_json(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        let mut s = serde_json::to_string_pretty(&c).expect("config serialises");
        s.push('\n');
        s
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    pub fn build_kernel(&self) -> CliResult<TransitionKernel> {
        match &self.chain {
            ChainSpec::Renewal { kappa, n_states, rewards } => {
                let r = rewards.clone();
                make_renewal_chain(*kappa, *n_states, |s| match &r {
                    Some(r) => r[s],
                    None => f64::from(u8::from(s == 0)),
                })
            }
            ChainSpec::Random { n_states, seed } => make_random_chain(*n_states, *seed),
            ChainSpec::Matrix { rows, rewards, r_max } => {
                let rm = r_max.unwrap_or_else(|| rewards.iter().fold(0.0f64, |m, r| m.max(r.abs())).max(f64::MIN_POSITIVE));
                TransitionKernel::new(rows.clone(), rewards.clone(), rm)
            }
        }
        .map_err(|e| CliError::config("chain", e.to_string()))
    }

    pub fn build_model(&self, n_states: usize) -> CliResult<ValueModel> {
        match &self.model {
            ModelSpec::Linear { features, dim, feature_seed } => {
                let fm = match features {
                    FeatureKind::Tabular => FeatureMap::tabular(n_states),
                    FeatureKind::Random => FeatureMap::random(n_states, dim.unwrap_or(1), *feature_seed)
                        .map_err(|e| CliError::config("model", e.to_string()))?,
                };
                Ok(ValueModel::Linear(LinearModel::zeros(Arc::new(fm))))
            }
            ModelSpec::Relu { hidden, bias, budget, x_max, embedding, init_seed, .. } => {
                let emb = match embedding {
                    EmbeddingKind::Coordinate => Embedding::Coordinate { n_states },
                    EmbeddingKind::OneHot => Embedding::OneHot { n_states, scale: *x_max },
                };
                let net = ReluNetwork::random(hidden, *bias, *budget, *x_max, emb, *init_seed, None)
                    .map_err(|e| CliError::config("model", e.to_string()))?;
                Ok(ValueModel::Relu(net))
            }
        }
    }

    pub fn td_config(&self, record_stream: bool) -> CliResult<TdConfig> {
        let schedule = StepSchedule::new(self.schedule.c_alpha, self.schedule.eta).stage("train")?;
        let mut cfg = TdConfig::new(schedule, self.discount, self.steps);
        cfg.start = self.start;
        cfg.record_stream = record_stream;
        Ok(cfg)
    }

    /// Whether runs must keep the per-step stream.
    pub fn needs_stream(&self) -> bool {
        self.diagnostics.decompose || (self.diagnostics.crossings && self.is_relu())
    }

    pub fn is_relu(&self) -> bool {
        matches!(self.model, ModelSpec::Relu { .. })
    }

    /// Bound variants for the rates stage.
    pub fn rate_variants(&self, spec: &RatesSpec) -> Vec<BoundVariant> {
        if !spec.variants.is_empty() {
            return spec.variants.clone();
        }
        if self.is_relu() {
            vec![BoundVariant::NonlinearHp, BoundVariant::ReluAppendix]
        } else {
            vec![BoundVariant::LinearHp]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const MINIMAL: &str = r#"{
        "chain": {"kind": "matrix", "rows": [[0.7, 0.3], [0.4, 0.6]], "rewards": [1.0, 0.0]},
        "model": {"kind": "linear", "features": "tabular"},
        "schedule": {"c_alpha": 1.0, "eta": 0.8},
        "discount": 0.5,
        "steps": 100,
        "seeds": {"list": [1]}
    }"#;

    fn path_of(e: CliError) -> String {
        match e {
            CliError::Config { path, .. } => path,
            other => panic!("expected a config error, got {other}"),
        }
    }

    #[test]
    fn minimal_config_validates() {
        let c = ExperimentConfig::from_json(MINIMAL).unwrap();
        c.validate().unwrap();
        assert_eq!(c.seed_list().unwrap(), vec![1]);
        assert_eq!(c.build_kernel().unwrap().n_states(), 2);
    }

    #[test]
    fn bad_eta_names_its_field() {
        let text = MINIMAL.replace("\"eta\": 0.8", "\"eta\": 0.3");
        let c = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(path_of(c.validate().unwrap_err()), "schedule.eta");
        let c = ExperimentConfig::from_json(&MINIMAL.replace("\"eta\": 0.8", "\"eta\": 1.0")).unwrap();
        c.validate().unwrap();
    }

    #[test]
    fn discount_and_duplicate_seeds_rejected() {
        let c = ExperimentConfig::from_json(&MINIMAL.replace("\"discount\": 0.5", "\"discount\": 1.0")).unwrap();
        assert_eq!(path_of(c.validate().unwrap_err()), "discount");
        let c = ExperimentConfig::from_json(&MINIMAL.replace("[1]", "[4, 2, 4]")).unwrap();
        assert_eq!(path_of(c.validate().unwrap_err()), "seeds.list[2]");
    }

    #[test]
    fn parse_errors_carry_the_path() {
        let e = ExperimentConfig::from_json(&MINIMAL.replace("\"c_alpha\": 1.0", "\"c_alpha\": \"big\"")).unwrap_err();
        assert_eq!(path_of(e), "schedule.c_alpha");
        let e = ExperimentConfig::from_json(&MINIMAL.replace("\"steps\": 100", "\"stepz\": 100")).unwrap_err();
        assert!(matches!(e, CliError::Config { .. }));
    }

    #[test]
    fn derived_seeds_and_overrides() {
        let text = MINIMAL.replace(r#"{"list": [1]}"#, r#"{"base_seed": 5, "n_seeds": 3}"#);
        let mut c = ExperimentConfig::from_json(&text).unwrap();
        let s = c.seed_list().unwrap();
        assert_eq!(s.len(), 3);
        c.apply(&Overrides { n_seeds: Some(5), steps: Some(7) }).unwrap();
        assert_eq!(c.seed_list().unwrap()[..3], s[..]);
        assert_eq!(c.steps, 7);
    }

    #[test]
    fn canonical_form_round_trips() {
        let c = ExperimentConfig::from_json(MINIMAL).unwrap();
        let again = ExperimentConfig::from_json(&c.canonical_json()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.hash(), again.hash());
    }
}
