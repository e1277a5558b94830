//! Finite Markov reward processes.
//!
//! A [`TransitionKernel`] is a row-stochastic matrix with a deterministic
//! per-state reward. Everything exact in the crate (stationary law, TV
//! distances, lag covariances, conditional TD means) is computed from it.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;

const ROW_SUM_TOL: f64 = 1e-12;
const STATIONARY_TOL: f64 = 1e-10;

/// Row-stochastic transition matrix over `0..n_states` with per-state rewards.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "KernelFile", into = "KernelFile")]
pub struct TransitionKernel {
    n: usize,
    p: Vec<f64>,
    cdf: Vec<f64>,
    rewards: Vec<f64>,
    r_max: f64,
    kind: String,
    params: BTreeMap<String, f64>,
    period: usize,
    pi: OnceLock<Vec<f64>>,
}

/// On-disk JSON layout of a kernel.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelFile {
    pub n_states: usize,
    #[serde(rename = "P")]
    pub p: Vec<f64>,
    pub rewards: Vec<f64>,
    pub r_max: f64,
    pub kind: String,
    pub params: BTreeMap<String, f64>,
}

impl TryFrom<KernelFile> for TransitionKernel {
    type Error = Error;

    fn try_from(f: KernelFile) -> Result<Self> {
        let mut k = TransitionKernel::from_flat(f.n_states, f.p, f.rewards, f.r_max)?;
        k.kind = f.kind;
        k.params = f.params;
        Ok(k)
    }
}

impl From<TransitionKernel> for KernelFile {
    fn from(k: TransitionKernel) -> Self {
        KernelFile {
            n_states: k.n,
            p: k.p,
            rewards: k.rewards,
            r_max: k.r_max,
            kind: k.kind,
            params: k.params,
        }
    }
}

impl TransitionKernel {
    /// Build a kernel from rows of `P`. Rejects non-stochastic rows, rewards
    /// outside `[-r_max, r_max]`, and reducible chains.
    pub fn new(rows: Vec<Vec<f64>>, rewards: Vec<f64>, r_max: f64) -> Result<Self> {
        let n = rows.len();
        let mut p = Vec::with_capacity(n * n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::DimensionMismatch {
                    what: if i == 0 { "kernel row" } else { "kernel row (ragged)" },
                    expected: n,
                    found: row.len(),
                });
            }
            p.extend_from_slice(row);
        }
        Self::from_flat(n, p, rewards, r_max)
    }

    /// Build a kernel from a row-major `n_states * n_states` buffer.
    pub fn from_flat(n: usize, p: Vec<f64>, rewards: Vec<f64>, r_max: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("kernel needs at least one state".into()));
        }
        if p.len() != n * n {
            return Err(Error::DimensionMismatch { what: "kernel matrix", expected: n * n, found: p.len() });
        }
        if rewards.len() != n {
            return Err(Error::DimensionMismatch { what: "rewards", expected: n, found: rewards.len() });
        }
        if !(r_max.is_finite() && r_max > 0.0) {
            return Err(Error::InvalidParameter(format!("r_max must be positive, got {r_max}")));
        }
        for (i, row) in p.chunks_exact(n).enumerate() {
            if let Some(j) = row.iter().position(|&x| !(x.is_finite() && x >= 0.0)) {
                return Err(Error::InvalidParameter(format!("P[{i}][{j}] = {} is not a probability", row[j])));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidParameter(format!("row {i} sums to {s}")));
            }
        }
        if let Some(i) = rewards.iter().position(|r| !(r.is_finite() && r.abs() <= r_max)) {
            return Err(Error::InvalidParameter(format!(
                "reward {} at state {i} exceeds r_max = {r_max}",
                rewards[i]
            )));
        }
        check_irreducible(n, &p)?;
        let period = period(n, &p);
        let cdf = build_cdf(n, &p);
        Ok(Self {
            n,
            p,
            cdf,
            rewards,
            r_max,
            kind: "explicit".into(),
            params: BTreeMap::new(),
            period,
            pi: OnceLock::new(),
        })
    }

    /// Attach a descriptive kind and parameters (used for ids and serialisation).
    pub fn with_label(mut self, kind: &str, params: BTreeMap<String, f64>) -> Self {
        self.kind = kind.to_string();
        self.params = params;
        self
    }

    pub fn n_states(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.p[i * self.n..(i + 1) * self.n]
    }

    #[inline]
    pub fn prob(&self, i: usize, j: usize) -> f64 {
        self.p[i * self.n + j]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn params(&self) -> &BTreeMap<String, f64> {
        &self.params
    }

    pub fn period(&self) -> usize {
        self.period
    }

    pub fn is_aperiodic(&self) -> bool {
        self.period == 1
    }

    /// Identifier built from kind and parameters, e.g. `renewal(kappa=2,n_states=200)`.
    pub fn id(&self) -> String {
        let ps: Vec<String> = self.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
        format!("{}({})", self.kind, ps.join(","))
    }

    /// Cached stationary distribution.
    pub fn stationary(&self) -> Result<&[f64]> {
        if let Some(pi) = self.pi.get() {
            return Ok(pi);
        }
        let pi = solve_stationary(self)?;
        let _ = self.pi.set(pi);
        Ok(self.pi.get().expect("just set"))
    }

    /// Left product `mu P`.
    pub fn push_forward(&self, mu: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (i, &m) in mu.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            for (o, &pij) in out.iter_mut().zip(self.row(i)) {
                *o += m * pij;
            }
        }
        out
    }

    /// Right product `P v` (conditional expectation of `v` one step ahead).
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n).map(|i| self.expect_next(i, v)).collect()
    }

    /// `E[v(x_{t+1}) | x_t = i]`.
    #[inline]
    pub fn expect_next(&self, i: usize, v: &[f64]) -> f64 {
        self.row(i).iter().zip(v).map(|(p, x)| p * x).sum()
    }

    /// Inverse-CDF draw of the successor of `i` from a uniform `u` in `[0, 1)`.
    #[inline]
    pub fn sample_next(&self, i: usize, u: f64) -> usize {
        let cdf = &self.cdf[i * self.n..(i + 1) * self.n];
        cdf.partition_point(|&c| c <= u).min(self.n - 1)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn build_cdf(n: usize, p: &[f64]) -> Vec<f64> {
    let mut cdf = vec![0.0; n * n];
    for i in 0..n {
        let row = &p[i * n..(i + 1) * n];
        let out = &mut cdf[i * n..(i + 1) * n];
        let mut acc = 0.0;
        for (o, &x) in out.iter_mut().zip(row) {
            acc += x;
            *o = acc;
        }
        // pin the last reachable entry to 1 so every u < 1 lands on a
        // positive-probability state
        let last = row.iter().rposition(|&x| x > 0.0).expect("row has mass");
        for o in &mut out[last..] {
            *o = 1.0;
        }
    }
    cdf
}

fn reachable(n: usize, p: &[f64], transpose: bool) -> Vec<bool> {
    let mut seen = vec![false; n];
    let mut stack = vec![0usize];
    seen[0] = true;
    while let Some(u) = stack.pop() {
        for v in 0..n {
            let w = if transpose { p[v * n + u] } else { p[u * n + v] };
            if w > 0.0 && !seen[v] {
                seen[v] = true;
                stack.push(v);
            }
        }
    }
    seen
}

fn check_irreducible(n: usize, p: &[f64]) -> Result<()> {
    let fwd = reachable(n, p, false);
    let bwd = reachable(n, p, true);
    if let Some(j) = (0..n).find(|&j| !fwd[j] || !bwd[j]) {
        return Err(Error::ReducibleChain(format!(
            "state {j} does not communicate with state 0"
        )));
    }
    Ok(())
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Period of an irreducible chain: gcd of `level(u) + 1 - level(v)` over edges.
fn period(n: usize, p: &[f64]) -> usize {
    let mut level = vec![usize::MAX; n];
    level[0] = 0;
    let mut queue = std::collections::VecDeque::from([0usize]);
    while let Some(u) = queue.pop_front() {
        for v in 0..n {
            if p[u * n + v] > 0.0 && level[v] == usize::MAX {
                level[v] = level[u] + 1;
                queue.push_back(v);
            }
        }
    }
    let mut g = 0;
    for u in 0..n {
        for v in 0..n {
            if p[u * n + v] > 0.0 {
                let d = (level[u] + 1) as i64 - level[v] as i64;
                g = gcd(g, d.unsigned_abs() as usize);
            }
        }
    }
    g.max(1)
}

fn stationary_residual(kernel: &TransitionKernel, pi: &[f64]) -> f64 {
    kernel
        .push_forward(pi)
        .iter()
        .zip(pi)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

fn solve_stationary(kernel: &TransitionKernel) -> Result<Vec<f64>> {
    let n = kernel.n;
    // (P^T - I) pi = 0 with the last equation replaced by sum(pi) = 1
    let mut a = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a[(j, i)] = kernel.prob(i, j);
        }
        a[(i, i)] -= 1.0;
    }
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut rhs = DVector::<f64>::zeros(n);
    rhs[n - 1] = 1.0;
    let direct = a.lu().solve(&rhs).map(|v| v.iter().copied().collect::<Vec<f64>>());
    if let Some(pi) = direct.map(normalise) {
        if pi.iter().all(|&x| x > 0.0) && stationary_residual(kernel, &pi) <= STATIONARY_TOL {
            return Ok(pi);
        }
    }
    // lazy power iteration handles periodic kernels too
    let mut pi = vec![1.0 / n as f64; n];
    for _ in 0..1_000_000 {
        let next = kernel.push_forward(&pi);
        pi = normalise(pi.iter().zip(&next).map(|(a, b)| 0.5 * (a + b)).collect());
        if stationary_residual(kernel, &pi) <= STATIONARY_TOL * 0.1 {
            return Ok(pi);
        }
    }
    Err(Error::Numerical("stationary distribution did not converge".into()))
}

fn normalise(v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

/// Unique stationary law `pi` with `pi P = pi`.
pub fn stationary_distribution(kernel: &TransitionKernel) -> Result<Vec<f64>> {
    kernel.stationary().map(<[f64]>::to_vec)
}

/// Exact `1/2 || e_start P^t - pi ||_1`.
pub fn tv_to_stationary(kernel: &TransitionKernel, start: usize, t: usize) -> Result<f64> {
    Ok(*tv_curve(kernel, start, t)?.last().expect("non-empty"))
}

/// `tv_to_stationary` for every `t` in `0..=t_max`.
pub fn tv_curve(kernel: &TransitionKernel, start: usize, t_max: usize) -> Result<Vec<f64>> {
    if start >= kernel.n {
        return Err(Error::InvalidParameter(format!("start state {start} out of range")));
    }
    let pi = kernel.stationary()?;
    let mut mu = vec![0.0; kernel.n];
    mu[start] = 1.0;
    let mut out = Vec::with_capacity(t_max + 1);
    for t in 0..=t_max {
        if t > 0 {
            mu = kernel.push_forward(&mu);
        }
        out.push(half_l1(&mu, pi));
    }
    Ok(out)
}

/// Exact `1/2 || e_x P^t - e_y P^t ||_1` for `t` in `0..=t_max`.
pub fn tv_between_curve(kernel: &TransitionKernel, x: usize, y: usize, t_max: usize) -> Vec<f64> {
    let mut mx = vec![0.0; kernel.n];
    let mut my = vec![0.0; kernel.n];
    mx[x] = 1.0;
    my[y] = 1.0;
    let mut out = Vec::with_capacity(t_max + 1);
    for t in 0..=t_max {
        if t > 0 {
            mx = kernel.push_forward(&mx);
            my = kernel.push_forward(&my);
        }
        out.push(half_l1(&mx, &my));
    }
    out
}

pub(crate) fn half_l1(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// `sum_{k >= n} k^{-s}` for integer `n >= 1`, `s > 1`.
pub(crate) fn zeta_tail(s: f64, n: u64) -> f64 {
    const EXPLICIT: u64 = 64;
    let mut acc = 0.0;
    for k in n..n + EXPLICIT {
        acc += (k as f64).powf(-s);
    }
    // Euler-Maclaurin for the remainder starting at K
    let k = (n + EXPLICIT) as f64;
    acc + k.powf(1.0 - s) / (s - 1.0) + 0.5 * k.powf(-s) + s * k.powf(-s - 1.0) / 12.0
        - s * (s + 1.0) * (s + 2.0) * k.powf(-s - 3.0) / 720.0
}

/// Jump law of the truncated renewal chain: `p_j ∝ (j+1)^{-(kappa+1)}`,
/// with the mass of `j >= n_states - 1` folded into the last state.
pub fn renewal_jump_law(kappa: f64, n_states: usize) -> Vec<f64> {
    let s = kappa + 1.0;
    let z = zeta_tail(s, 1);
    let mut p: Vec<f64> = (0..n_states - 1).map(|j| ((j + 1) as f64).powf(-s) / z).collect();
    p.push(zeta_tail(s, n_states as u64) / z);
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= total);
    p
}

/// Truncated discrete renewal ("house of cards") chain.
///
/// From state 0 the chain jumps to `j` with probability `p_j`; from `j > 0` it
/// steps down to `j - 1`. Return times to 0 have tail `~ t^{-kappa}`, so the
/// chain mixes polynomially with exponent about `kappa - 1` until truncation
/// at `n_states` turns the far tail geometric.
pub fn make_renewal_chain(
    kappa: f64,
    n_states: usize,
    reward_fn: impl Fn(usize) -> f64,
) -> Result<TransitionKernel> {
    if !(kappa.is_finite() && kappa > 1.0) {
        return Err(Error::InvalidParameter(format!("kappa must exceed 1, got {kappa}")));
    }
    if n_states < 3 {
        return Err(Error::InvalidParameter(format!("renewal chain needs n_states >= 3, got {n_states}")));
    }
    let jumps = renewal_jump_law(kappa, n_states);
    let mut p = vec![0.0; n_states * n_states];
    p[..n_states].copy_from_slice(&jumps);
    for j in 1..n_states {
        p[j * n_states + j - 1] = 1.0;
    }
    let rewards: Vec<f64> = (0..n_states).map(reward_fn).collect();
    let r_max = rewards.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    let r_max = if r_max > 0.0 { r_max } else { 1.0 };
    let params = BTreeMap::from([("kappa".to_string(), kappa), ("n_states".to_string(), n_states as f64)]);
    Ok(TransitionKernel::from_flat(n_states, p, rewards, r_max)?.with_label("renewal", params))
}

/// Random dense kernel with rows drawn uniformly from the simplex and rewards
/// uniform in `[0, 1]`. Strictly positive entries keep it irreducible and aperiodic.
pub fn make_random_chain(n_states: usize, seed: u64) -> Result<TransitionKernel> {
    if n_states == 0 {
        return Err(Error::InvalidParameter("random chain needs at least one state".into()));
    }
    let mut rng = seeds::rng(seed);
    let mut p = Vec::with_capacity(n_states * n_states);
    for _ in 0..n_states {
        // exponential spacings give a uniform point on the simplex
        let e: Vec<f64> = (0..n_states).map(|_| -(1.0 - rng.gen::<f64>()).ln() + 1e-3).collect();
        let s: f64 = e.iter().sum();
        let mut row: Vec<f64> = e.iter().map(|x| x / s).collect();
        let drift: f64 = 1.0 - row.iter().sum::<f64>();
        row[0] += drift;
        p.extend(row);
    }
    let rewards: Vec<f64> = (0..n_states).map(|_| rng.gen::<f64>()).collect();
    let params = BTreeMap::from([("n_states".to_string(), n_states as f64), ("seed".to_string(), seed as f64)]);
    Ok(TransitionKernel::from_flat(n_states, p, rewards, 1.0)?.with_label("random", params))
}

/// Chain whose rows are all equal to `row`: successive states are i.i.d.
pub fn make_iid_chain(row: Vec<f64>, rewards: Vec<f64>, r_max: f64) -> Result<TransitionKernel> {
    let n = row.len();
    let rows = vec![row; n];
    Ok(TransitionKernel::new(rows, rewards, r_max)?.with_label("iid", BTreeMap::from([("n_states".to_string(), n as f64)])))
}

/// Where a sampled path starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Start {
    State(usize),
    Stationary,
}

impl Default for Start {
    fn default() -> Self {
        Start::State(0)
    }
}

/// Streaming sampler over one seeded path.
pub struct ChainSampler<'a> {
    kernel: &'a TransitionKernel,
    rng: rand_chacha::ChaCha8Rng,
    state: usize,
}

impl<'a> ChainSampler<'a> {
    pub fn new(kernel: &'a TransitionKernel, start: Start, seed: u64) -> Result<Self> {
        let mut rng = seeds::rng(seed);
        let state = match start {
            Start::State(s) if s < kernel.n => s,
            Start::State(s) => {
                return Err(Error::InvalidParameter(format!("start state {s} out of range")));
            }
            Start::Stationary => {
                let pi = kernel.stationary()?;
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut pick = kernel.n - 1;
                for (i, &x) in pi.iter().enumerate() {
                    acc += x;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                pick
            }
        };
        Ok(Self { kernel, rng, state })
    }

    pub fn state(&self) -> usize {
        self.state
    }

    /// Advance one step; returns `(s_t, r_t, s_{t+1})` with `r_t = rewards[s_t]`.
    #[inline]
    pub fn step(&mut self) -> (usize, f64, usize) {
        let s = self.state;
        let u: f64 = self.rng.gen();
        let next = self.kernel.sample_next(s, u);
        self.state = next;
        (s, self.kernel.rewards[s], next)
    }
}

/// Seeded sample path: `states` has one more entry than `rewards`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub rewards: Vec<f64>,
    pub seed: u64,
    pub kernel_id: String,
}

impl Trajectory {
    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// `(s_t, r_t, s_{t+1})` for every transition in order.
    pub fn transitions(&self) -> impl Iterator<Item = (usize, f64, usize)> + '_ {
        self.rewards
            .iter()
            .enumerate()
            .map(move |(t, &r)| (self.states[t], r, self.states[t + 1]))
    }

    /// CSV with columns `t,state,reward`; the final state has an empty reward.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,state,reward")?;
        for (t, &s) in self.states.iter().enumerate() {
            match self.rewards.get(t) {
                Some(r) => writeln!(w, "{t},{s},{r:?}")?,
                None => writeln!(w, "{t},{s},")?,
            }
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R, seed: u64, kernel_id: &str) -> Result<Self> {
        let mut states = Vec::new();
        let mut rewards = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if i == 0 || line.is_empty() {
                continue;
            }
            let mut cols = line.split(',');
            let bad = || Error::Format(format!("trajectory line {}: {line}", i + 1));
            let _t = cols.next().ok_or_else(bad)?;
            let s: usize = cols.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            states.push(s);
            match cols.next() {
                Some(rs) if !rs.is_empty() => rewards.push(rs.parse().map_err(|_| bad())?),
                _ => {}
            }
        }
        if states.len() != rewards.len() + 1 {
            return Err(Error::Format("trajectory needs exactly one more state than rewards".into()));
        }
        Ok(Self { states, rewards, seed, kernel_id: kernel_id.to_string() })
    }
}

/// Sample `length` transitions. Deterministic in `(kernel, start, length, seed)`.
pub fn sample_trajectory(kernel: &TransitionKernel, start: Start, length: usize, seed: u64) -> Result<Trajectory> {
    if length == 0 {
        return Err(Error::InvalidParameter("trajectory length must be at least 1".into()));
    }
    let mut sampler = ChainSampler::new(kernel, start, seed)?;
    let mut states = Vec::with_capacity(length + 1);
    let mut rewards = Vec::with_capacity(length);
    states.push(sampler.state());
    for _ in 0..length {
        let (_, r, next) = sampler.step();
        rewards.push(r);
        states.push(next);
    }
    Ok(Trajectory { states, rewards, seed, kernel_id: kernel.id() })
}

/// Lyapunov drift certificate `E[V(x') | x] <= V(x) - lambda W(x) + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftCertificate {
    pub v: Vec<f64>,
    pub w: Vec<f64>,
    pub lambda: f64,
    pub b: f64,
    pub holds: Vec<bool>,
}

impl DriftCertificate {
    pub fn new(v: Vec<f64>, w: Vec<f64>, lambda: f64, b: f64) -> Result<Self> {
        if v.len() != w.len() {
            return Err(Error::DimensionMismatch { what: "drift W", expected: v.len(), found: w.len() });
        }
        if let Some(i) = v.iter().position(|&x| !(x >= 1.0)) {
            return Err(Error::InvalidParameter(format!("V[{i}] = {} is below 1", v[i])));
        }
        if let Some(i) = w.iter().position(|&x| !(x >= 0.0)) {
            return Err(Error::InvalidParameter(format!("W[{i}] = {} is negative", w[i])));
        }
        if !(lambda > 0.0) || !(b >= 0.0) {
            return Err(Error::InvalidParameter(format!("need lambda > 0 and b >= 0, got {lambda}, {b}")));
        }
        let holds = vec![false; v.len()];
        Ok(Self { v, w, lambda, b, holds })
    }

    pub fn is_valid(&self) -> bool {
        !self.holds.is_empty() && self.holds.iter().all(|&h| h)
    }
}

/// Evaluate the drift inequality state by state from the exact kernel.
pub fn check_drift(kernel: &TransitionKernel, cert: &DriftCertificate) -> Result<DriftCertificate> {
    let n = kernel.n_states();
    if cert.v.len() != n {
        return Err(Error::DimensionMismatch { what: "drift V", expected: n, found: cert.v.len() });
    }
    if cert.w.len() != n {
        return Err(Error::DimensionMismatch { what: "drift W", expected: n, found: cert.w.len() });
    }
    let pv = kernel.apply(&cert.v);
    let holds = (0..n)
        .map(|i| pv[i] <= cert.v[i] - cert.lambda * cert.w[i] + cert.b + 1e-12)
        .collect();
    Ok(DriftCertificate { holds, ..cert.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn two_state() -> TransitionKernel {
        TransitionKernel::new(vec![vec![0.9, 0.1], vec![0.2, 0.8]], vec![1.0, -1.0], 1.0).unwrap()
    }

    /// Independent oracle: dense matrix powers.
    fn matrix_power_row(k: &TransitionKernel, start: usize, t: usize) -> Vec<f64> {
        let n = k.n_states();
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            m[i * n + i] = 1.0;
        }
        for _ in 0..t {
            let mut next = vec![0.0; n * n];
            for i in 0..n {
                for l in 0..n {
                    for j in 0..n {
                        next[i * n + j] += m[i * n + l] * k.prob(l, j);
                    }
                }
            }
            m = next;
        }
        m[start * n..(start + 1) * n].to_vec()
    }

    #[test]
    fn symmetric_two_state_is_uniform() {
        let k = TransitionKernel::new(vec![vec![0.5, 0.5], vec![0.5, 0.5]], vec![0.0, 0.0], 1.0).unwrap();
        let pi = stationary_distribution(&k).unwrap();
        assert_abs_diff_eq!(pi[0], 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(pi[1], 0.5, epsilon = 1e-14);
    }

    #[test]
    fn two_state_stationary_matches_hand_solution() {
        let pi = stationary_distribution(&two_state()).unwrap();
        assert_abs_diff_eq!(pi[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pi[1], 1.0 / 3.0, epsilon = 1e-12);
        // power-iteration oracle
        let far = matrix_power_row(&two_state(), 1, 200);
        assert_abs_diff_eq!(far[0], 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn identity_kernel_is_reducible() {
        let err = TransitionKernel::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0], 1.0).unwrap_err();
        assert!(matches!(err, Error::ReducibleChain(_)));
    }

    #[test]
    fn rejects_bad_rows_and_rewards() {
        assert!(TransitionKernel::new(vec![vec![0.5, 0.6], vec![0.5, 0.5]], vec![0.0, 0.0], 1.0).is_err());
        assert!(TransitionKernel::new(vec![vec![0.5, 0.5], vec![0.5, 0.5]], vec![2.0, 0.0], 1.0).is_err());
        assert!(TransitionKernel::new(vec![vec![1.5, -0.5], vec![0.5, 0.5]], vec![0.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn periodic_kernel_is_accepted_but_flagged() {
        let k = TransitionKernel::new(vec![vec![0.0, 1.0], vec![1.0, 0.0]], vec![0.0, 0.0], 1.0).unwrap();
        assert_eq!(k.period(), 2);
        let pi = stationary_distribution(&k).unwrap();
        assert_abs_diff_eq!(pi[0], 0.5, epsilon = 1e-12);
        assert!(two_state().is_aperiodic());
    }

    #[test]
    fn tv_at_zero_is_point_mass_distance() {
        let k = two_state();
        assert_abs_diff_eq!(tv_to_stationary(&k, 0, 0).unwrap(), 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(tv_to_stationary(&k, 1, 0).unwrap(), 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn two_state_tv_decays_with_second_eigenvalue() {
        let k = two_state();
        let pi = stationary_distribution(&k).unwrap();
        let curve = tv_curve(&k, 0, 40).unwrap();
        for (t, tv) in curve.iter().enumerate() {
            let closed = (1.0 / 3.0) * 0.7f64.powi(t as i32);
            assert_abs_diff_eq!(*tv, closed, epsilon = 1e-12);
            let oracle = half_l1(&matrix_power_row(&k, 0, t), &pi);
            assert_abs_diff_eq!(*tv, oracle, epsilon = 1e-12);
        }
    }

    #[test]
    fn tv_reaches_numerical_floor() {
        let k = two_state();
        // 0.7^t / 3 < 1e-8 once t > 49
        let tv = tv_to_stationary(&k, 0, 60).unwrap();
        assert!(tv < 1e-8);
    }

    #[test]
    fn renewal_rows_sum_to_one_and_identity_holds() {
        let k = make_renewal_chain(2.0, 50, |j| if j == 0 { 1.0 } else { 0.0 }).unwrap();
        for i in 0..k.n_states() {
            let s: f64 = k.row(i).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
        let p = renewal_jump_law(2.0, 50);
        let pi = stationary_distribution(&k).unwrap();
        let tails: Vec<f64> = (0..50).map(|j| p[j..].iter().sum()).collect();
        let z: f64 = tails.iter().sum();
        for j in 0..50 {
            assert_abs_diff_eq!(pi[j], tails[j] / z, epsilon = 1e-8);
        }
    }

    #[test]
    fn renewal_jump_law_matches_direct_sum() {
        // brute-force zeta(3) and its tail
        let direct: f64 = (1..2_000_000u64).rev().map(|k| (k as f64).powi(-3)).sum::<f64>() + 0.5 / 2e6f64.powi(2);
        assert_abs_diff_eq!(zeta_tail(3.0, 1), direct, epsilon = 1e-12);
        let p = renewal_jump_law(2.0, 3);
        assert_abs_diff_eq!(p[0], 1.0 / direct, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.125 / direct, epsilon = 1e-12);
    }

    #[test]
    fn renewal_parameter_errors() {
        assert!(matches!(make_renewal_chain(1.0, 10, |_| 0.0), Err(Error::InvalidParameter(_))));
        assert!(matches!(make_renewal_chain(2.0, 1, |_| 0.0), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn steep_renewal_concentrates_on_zero() {
        let k = make_renewal_chain(50.0, 3, |_| 0.0).unwrap();
        let pi = stationary_distribution(&k).unwrap();
        assert!(pi[0] > 1.0 - 1e-12);
    }

    #[test]
    fn trajectory_determinism_and_shape() {
        let k = two_state();
        let a = sample_trajectory(&k, Start::State(0), 1, 7).unwrap();
        assert_eq!(a.rewards.len(), 1);
        assert_eq!(a.states.len(), 2);
        let x = sample_trajectory(&k, Start::Stationary, 500, 11).unwrap();
        let y = sample_trajectory(&k, Start::Stationary, 500, 11).unwrap();
        assert_eq!(x, y);
        for (t, &r) in x.rewards.iter().enumerate() {
            assert_eq!(r, k.rewards()[x.states[t]]);
        }
        assert!(sample_trajectory(&k, Start::State(0), 0, 1).is_err());
    }

    #[test]
    fn empirical_frequencies_match_stationary() {
        let k = two_state();
        let n = 1_000_000;
        let tr = sample_trajectory(&k, Start::State(0), n, 2024).unwrap();
        let freq0 = tr.states.iter().filter(|&&s| s == 0).count() as f64 / tr.states.len() as f64;
        // integrated autocorrelation time of the indicator: (1 + 0.7) / (1 - 0.7)
        let sigma = ((2.0 / 9.0) * (1.7 / 0.3) / n as f64).sqrt();
        assert!((freq0 - 2.0 / 3.0).abs() < 3.0 * sigma, "freq {freq0}, sigma {sigma}");
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let k = two_state();
        let tr = sample_trajectory(&k, Start::State(1), 20, 5).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let back = Trajectory::read_csv(&buf[..], 5, &tr.kernel_id).unwrap();
        assert_eq!(back, tr);
    }

    #[test]
    fn kernel_json_round_trip() {
        let k = make_renewal_chain(2.5, 10, |j| j as f64 / 10.0).unwrap();
        let back = TransitionKernel::from_json(&k.to_json().unwrap()).unwrap();
        assert_eq!(back.id(), k.id());
        for i in 0..10 {
            assert_eq!(back.row(i), k.row(i));
        }
        assert_eq!(back.rewards(), k.rewards());
    }

    #[test]
    fn drift_examples() {
        let k = make_renewal_chain(3.0, 40, |_| 0.0).unwrap();
        let n = k.n_states();
        let ok = DriftCertificate::new(vec![1.0; n], vec![0.0; n], 1.0, 0.0).unwrap();
        assert!(check_drift(&k, &ok).unwrap().is_valid());
        let bad = DriftCertificate::new(vec![1.0; n], vec![1.0; n], 1.0, 0.0).unwrap();
        let checked = check_drift(&k, &bad).unwrap();
        assert!(checked.holds.iter().all(|h| !h));
        let short = DriftCertificate::new(vec![1.0; 2], vec![0.0; 2], 1.0, 0.0).unwrap();
        assert!(matches!(check_drift(&k, &short), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn renewal_polynomial_drift_certificate() {
        let kappa = 3.0;
        let k = make_renewal_chain(kappa, 60, |_| 0.0).unwrap();
        let n = k.n_states();
        let v: Vec<f64> = (0..n).map(|j| ((j + 1) as f64).powf(kappa - 0.5)).collect();
        let w: Vec<f64> = v.iter().map(|x| x.powf((kappa - 1.5) / (kappa - 0.5))).collect();
        // pick lambda, b by scanning: states j > 0 need V(j-1) <= V(j) - lambda W(j) + b,
        // state 0 needs (PV)(0) <= V(0) - lambda W(0) + b
        let pv = k.apply(&v);
        let mut found = None;
        'scan: for li in 1..=100 {
            let lambda = li as f64 * 0.05;
            let b_needed = (0..n).map(|i| pv[i] - v[i] + lambda * w[i]).fold(0.0f64, f64::max);
            let cert = DriftCertificate::new(v.clone(), w.clone(), lambda, b_needed).unwrap();
            if check_drift(&k, &cert).unwrap().is_valid() {
                found = Some((lambda, b_needed));
                if lambda >= 1.0 {
                    break 'scan;
                }
            }
        }
        let (lambda, _) = found.expect("some lambda certifies drift");
        assert!(lambda > 0.0);
    }
}
