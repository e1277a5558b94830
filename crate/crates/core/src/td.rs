//! Vanilla last-iterate TD(0) with polynomially decaying step sizes.
//!
//! Update `k = 1, 2, ...` consumes the transition `(s_{k-1}, r_{k-1}, s_k)` of
//! one sampled path and applies
//!
//! ```text
//! delta_k  = r + discount * f(s') - f(s)
//! theta_k  = theta_{k-1} + alpha_k * delta_k * grad f(s)
//! ```
//!
//! with `alpha_k = c_alpha * k^{-eta}`. Linear models are never projected.
//! ReLU networks are projected back onto their spectral budget after every
//! step.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::approx::{decode_f64s, encode_f64s, ModelFile, ValueModel};
use crate::chain::{ChainSampler, Start, TransitionKernel, Trajectory};
use crate::error::{Error, Result};

/// `alpha_k = c_alpha * k^{-eta}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub c_alpha: f64,
    pub eta: f64,
}

impl StepSchedule {
    pub fn new(c_alpha: f64, eta: f64) -> Result<Self> {
        if !(eta > 0.5 && eta <= 1.0) {
            return Err(Error::InvalidParameter(format!("eta must lie in (1/2, 1], got {eta}")));
        }
        if !(c_alpha > 0.0 && c_alpha.is_finite()) {
            return Err(Error::InvalidParameter(format!("c_alpha must be positive, got {c_alpha}")));
        }
        Ok(Self { c_alpha, eta })
    }

    /// All-zero steps; used to check diagnostics on a frozen model.
    pub fn frozen() -> Self {
        Self { c_alpha: 0.0, eta: 1.0 }
    }

    #[inline]
    pub fn alpha(&self, k: u64) -> f64 {
        debug_assert!(k >= 1);
        self.c_alpha * (k as f64).powf(-self.eta)
    }
}

/// Step size at `t >= 1`.
pub fn step_size(schedule: &StepSchedule, t: u64) -> Result<f64> {
    if t == 0 {
        return Err(Error::InvalidParameter("step sizes are indexed from 1".into()));
    }
    Ok(schedule.alpha(t))
}

/// `delta = r + discount * f(s') - f(s)`.
pub fn td_error(model: &ValueModel, s: usize, r: f64, s_next: usize, discount: f64) -> f64 {
    r + discount * model.value(s_next) - model.value(s)
}

/// What one update did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub delta: f64,
    /// `||grad f(s)||`
    pub grad_norm: f64,
    /// `||theta' - theta||`, projection included.
    pub displacement: f64,
}

/// Apply one TD(0) update in place. `step` only labels errors.
pub fn td_update(
    model: &mut ValueModel,
    (s, r, s_next): (usize, f64, usize),
    alpha: f64,
    discount: f64,
    step: u64,
) -> Result<StepInfo> {
    match model {
        ValueModel::Linear(m) => {
            let row = m.features.sparse_row(s);
            let v: f64 = row.iter().map(|&(i, x)| m.theta[i] * x).sum();
            let v_next = m.value(s_next);
            let delta = r + discount * v_next - v;
            if !delta.is_finite() {
                return Err(Error::NonFiniteUpdate { step });
            }
            let scale = alpha * delta;
            let mut g2 = 0.0;
            for &(i, x) in row {
                m.theta[i] += scale * x;
                g2 += x * x;
            }
            let grad_norm = g2.sqrt();
            Ok(StepInfo { delta, grad_norm, displacement: scale.abs() * grad_norm })
        }
        ValueModel::Relu(net) => {
            let (v, g) = net.value_and_grad_at(&net.input(s));
            let v_next = net.value_at(&net.input(s_next));
            let delta = r + discount * v_next - v;
            if !delta.is_finite() || g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteUpdate { step });
            }
            let before = net.params().to_vec();
            let scale = alpha * delta;
            for (p, gi) in net.params_mut().iter_mut().zip(&g) {
                *p += scale * gi;
            }
            net.project_in_place();
            let displacement = net.params().iter().zip(&before).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let grad_norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            Ok(StepInfo { delta, grad_norm, displacement })
        }
    }
}

/// Pure form of [`td_update`].
pub fn td_step(model: &ValueModel, transition: (usize, f64, usize), alpha: f64, discount: f64) -> Result<ValueModel> {
    if !(alpha >= 0.0) {
        return Err(Error::InvalidParameter(format!("alpha must be non-negative, got {alpha}")));
    }
    let mut next = model.clone();
    td_update(&mut next, transition, alpha, discount, 0)?;
    Ok(next)
}

/// Which iterates a run keeps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Checkpoints {
    /// Powers of 1.2 (rounded) and powers of two, plus `0` and `T`.
    Geometric,
    /// Every `k`-th iterate, plus `0` and `T`.
    Every(u64),
}

impl Checkpoints {
    pub fn grid(&self, steps: u64) -> Vec<u64> {
        let mut ts = vec![0, steps];
        match *self {
            Checkpoints::Geometric => {
                let mut x = 1.0f64;
                while x.round() as u64 <= steps {
                    ts.push(x.round() as u64);
                    x *= 1.2;
                }
                let mut d = 1u64;
                while d <= steps {
                    ts.push(d);
                    d *= 2;
                }
            }
            Checkpoints::Every(k) => {
                let k = k.max(1);
                ts.extend((1..=steps / k).map(|i| i * k));
            }
        }
        ts.sort_unstable();
        ts.dedup();
        ts
    }
}

/// Settings of one TD run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TdConfig {
    pub schedule: StepSchedule,
    pub discount: f64,
    pub steps: u64,
    pub start: Start,
    pub checkpoints: Checkpoints,
    /// Keep the full `(s, r, s')` stream so the run can be replayed.
    pub record_stream: bool,
}

impl TdConfig {
    pub fn new(schedule: StepSchedule, discount: f64, steps: u64) -> Self {
        Self {
            schedule,
            discount,
            steps,
            start: Start::State(0),
            checkpoints: Checkpoints::Geometric,
            record_stream: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.discount) {
            return Err(Error::InvalidParameter(format!("discount must lie in [0, 1), got {}", self.discount)));
        }
        if self.steps == 0 {
            return Err(Error::InvalidParameter("a run needs at least one step".into()));
        }
        Ok(())
    }
}

/// Parameter vector after `t` updates.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub t: u64,
    pub theta: Vec<f64>,
}

/// Per-step transition stream: `states` has `T + 1` entries.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepStream {
    pub states: Vec<usize>,
    pub rewards: Vec<f64>,
}

/// Everything a run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct IterateHistory {
    pub seed: u64,
    pub kernel_id: String,
    pub config: TdConfig,
    pub model0: ValueModel,
    /// `alphas[k-1] = alpha_k`
    pub alphas: Vec<f64>,
    /// `deltas[k-1] = delta_k`
    pub deltas: Vec<f64>,
    pub checkpoints: Vec<Checkpoint>,
    pub stream: Option<StepStream>,
}

impl IterateHistory {
    pub fn steps(&self) -> u64 {
        self.alphas.len() as u64
    }

    pub fn model_kind(&self) -> &'static str {
        self.model0.kind()
    }

    pub fn final_theta(&self) -> &[f64] {
        &self.checkpoints.last().expect("at least theta_0").theta
    }

    pub fn checkpoint_times(&self) -> Vec<u64> {
        self.checkpoints.iter().map(|c| c.t).collect()
    }

    /// `||theta_t - theta*||` at every checkpoint.
    pub fn errors(&self, theta_star: &[f64]) -> Vec<f64> {
        self.checkpoints.iter().map(|c| dist(&c.theta, theta_star)).collect()
    }

    pub fn stream(&self) -> Result<&StepStream> {
        self.stream.as_ref().ok_or(Error::MissingStepData)
    }

    /// Re-execute the recorded run from `model0`, calling `visit(k, before,
    /// after, info)` for each update. Fails if a replayed checkpoint differs
    /// from the stored one.
    pub fn replay(&self, mut visit: impl FnMut(u64, &ValueModel, &ValueModel, &StepInfo) -> Result<()>) -> Result<()> {
        let stream = self.stream()?;
        let mut model = self.model0.clone();
        let mut next_cp = self.checkpoints.iter().peekable();
        while next_cp.peek().is_some_and(|c| c.t == 0) {
            next_cp.next();
        }
        for k in 1..=self.steps() {
            let i = (k - 1) as usize;
            let before = model.clone();
            let tr = (stream.states[i], stream.rewards[i], stream.states[i + 1]);
            let info = td_update(&mut model, tr, self.alphas[i], self.config.discount, k)?;
            visit(k, &before, &model, &info)?;
            if let Some(cp) = next_cp.peek() {
                if cp.t == k {
                    if cp.theta != model.params() {
                        return Err(Error::Numerical(format!("replay diverged from checkpoint at t = {k}")));
                    }
                    next_cp.next();
                }
            }
        }
        Ok(())
    }

    /// CSV `t,alpha,delta,err`; `err` is filled at checkpoints when `theta_star` is given.
    pub fn write_csv<W: Write>(&self, mut w: W, theta_star: Option<&[f64]>) -> Result<()> {
        writeln!(w, "t,alpha,delta,err")?;
        let mut cps = self.checkpoints.iter().peekable();
        while cps.peek().is_some_and(|c| c.t == 0) {
            cps.next();
        }
        for (i, (a, d)) in self.alphas.iter().zip(&self.deltas).enumerate() {
            let t = i as u64 + 1;
            let err = match (cps.peek(), theta_star) {
                (Some(c), Some(star)) if c.t == t => format!("{:?}", dist(&c.theta, star)),
                _ => String::new(),
            };
            if cps.peek().is_some_and(|c| c.t == t) {
                cps.next();
            }
            writeln!(w, "{t},{a:?},{d:?},{err}")?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&HistoryFile::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: HistoryFile = serde_json::from_str(s)?;
        f.try_into()
    }
}

/// JSON sidecar of a history: metadata, initial model, checkpointed
/// parameters and (optionally) the full stream. Doubles are base64 encoded.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistoryFile {
    pub seed: u64,
    pub kernel_id: String,
    pub model_kind: String,
    pub config: TdConfig,
    pub model0: ModelFile,
    pub alphas: String,
    pub deltas: String,
    pub checkpoints: Vec<(u64, String)>,
    pub stream_states: Option<Vec<usize>>,
    pub stream_rewards: Option<String>,
}

impl From<&IterateHistory> for HistoryFile {
    fn from(h: &IterateHistory) -> Self {
        HistoryFile {
            seed: h.seed,
            kernel_id: h.kernel_id.clone(),
            model_kind: h.model_kind().to_string(),
            config: h.config.clone(),
            model0: ModelFile::from(&h.model0),
            alphas: encode_f64s(&h.alphas),
            deltas: encode_f64s(&h.deltas),
            checkpoints: h.checkpoints.iter().map(|c| (c.t, encode_f64s(&c.theta))).collect(),
            stream_states: h.stream.as_ref().map(|s| s.states.clone()),
            stream_rewards: h.stream.as_ref().map(|s| encode_f64s(&s.rewards)),
        }
    }
}

impl TryFrom<HistoryFile> for IterateHistory {
    type Error = Error;

    fn try_from(f: HistoryFile) -> Result<Self> {
        let stream = match (f.stream_states, f.stream_rewards) {
            (Some(states), Some(r)) => Some(StepStream { states, rewards: decode_f64s(&r)? }),
            _ => None,
        };
        Ok(IterateHistory {
            seed: f.seed,
            kernel_id: f.kernel_id,
            config: f.config,
            model0: f.model0.try_into()?,
            alphas: decode_f64s(&f.alphas)?,
            deltas: decode_f64s(&f.deltas)?,
            checkpoints: f
                .checkpoints
                .into_iter()
                .map(|(t, th)| Ok(Checkpoint { t, theta: decode_f64s(&th)? }))
                .collect::<Result<_>>()?,
            stream,
        })
    }
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Run TD(0) over one freshly sampled trajectory.
pub fn run_td(kernel: &TransitionKernel, model0: &ValueModel, cfg: &TdConfig, seed: u64) -> Result<IterateHistory> {
    run_td_observed(kernel, model0, cfg, seed, |_, _, _| Ok(()))
}

/// [`run_td`] with a hook called after every update with the new model.
pub fn run_td_observed(
    kernel: &TransitionKernel,
    model0: &ValueModel,
    cfg: &TdConfig,
    seed: u64,
    observe: impl FnMut(u64, &ValueModel, &StepInfo) -> Result<()>,
) -> Result<IterateHistory> {
    let mut sampler = ChainSampler::new(kernel, cfg.start, seed)?;
    run_over(kernel, model0, cfg, seed, || sampler.step(), observe)
}

/// Run TD(0) over a stored trajectory (its length must be at least `cfg.steps`).
pub fn run_td_on(traj: &Trajectory, kernel: &TransitionKernel, model0: &ValueModel, cfg: &TdConfig) -> Result<IterateHistory> {
    if (traj.len() as u64) < cfg.steps {
        return Err(Error::InvalidParameter(format!(
            "trajectory has {} transitions, run needs {}",
            traj.len(),
            cfg.steps
        )));
    }
    let mut it = traj.transitions();
    run_over(kernel, model0, cfg, traj.seed, || it.next().expect("length checked"), |_, _, _| Ok(()))
}

fn run_over(
    kernel: &TransitionKernel,
    model0: &ValueModel,
    cfg: &TdConfig,
    seed: u64,
    mut next: impl FnMut() -> (usize, f64, usize),
    mut observe: impl FnMut(u64, &ValueModel, &StepInfo) -> Result<()>,
) -> Result<IterateHistory> {
    cfg.validate()?;
    if model0.n_states() != kernel.n_states() {
        return Err(Error::DimensionMismatch { what: "model states", expected: kernel.n_states(), found: model0.n_states() });
    }
    let steps = cfg.steps as usize;
    let grid = cfg.checkpoints.grid(cfg.steps);
    let mut grid_iter = grid.iter().copied().skip(1).peekable();
    let mut model = model0.clone();
    let mut alphas = Vec::with_capacity(steps);
    let mut deltas = Vec::with_capacity(steps);
    let mut checkpoints = vec![Checkpoint { t: 0, theta: model.params().to_vec() }];
    let mut stream = cfg.record_stream.then(|| StepStream {
        states: Vec::with_capacity(steps + 1),
        rewards: Vec::with_capacity(steps),
    });
    for k in 1..=cfg.steps {
        let tr = next();
        let alpha = cfg.schedule.alpha(k);
        let info = td_update(&mut model, tr, alpha, cfg.discount, k)?;
        alphas.push(alpha);
        deltas.push(info.delta);
        if let Some(st) = stream.as_mut() {
            if k == 1 {
                st.states.push(tr.0);
            }
            st.rewards.push(tr.1);
            st.states.push(tr.2);
        }
        observe(k, &model, &info)?;
        if grid_iter.peek() == Some(&k) {
            grid_iter.next();
            checkpoints.push(Checkpoint { t: k, theta: model.params().to_vec() });
        }
    }
    Ok(IterateHistory {
        seed,
        kernel_id: kernel.id(),
        config: cfg.clone(),
        model0: model0.clone(),
        alphas,
        deltas,
        checkpoints,
        stream,
    })
}
