//! Activation patterns of ReLU value networks and how often TD updates change them.
//!
//! A crossing at step `t` is a (probe, hidden unit) pair whose on/off bit
//! differs between `theta_t` and `theta_{t+1}`. Only endpoints are compared,
//! so a unit that flips and flips back within one step is not counted.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::approx::{ReluNetwork, ValueModel};
use crate::error::{Error, Result};
use crate::seeds::{self, purpose};
use crate::td::IterateHistory;

pub const DEFAULT_PROBES: usize = 64;

/// On/off state of every hidden unit, one bit vector per hidden layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActivationPattern {
    pub layers: Vec<Vec<bool>>,
}

impl ActivationPattern {
    pub fn n_units(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    /// Number of units whose bit differs.
    pub fn flips(&self, other: &Self) -> usize {
        self.layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| a.iter().zip(b).filter(|(x, y)| x != y).count())
            .sum()
    }
}

/// A unit is on iff its pre-activation is strictly positive.
pub fn activation_pattern(net: &ReluNetwork, input: &[f64]) -> ActivationPattern {
    let fwd = net.forward(input);
    let hidden = net.depth() - 1;
    ActivationPattern { layers: fwd.pre[..hidden].iter().map(|z| z.iter().map(|&v| v > 0.0).collect()).collect() }
}

/// For one probe, the smallest `|z_u| / ||d z_u / d theta||` over hidden units `u`.
///
/// A unit sitting exactly on its boundary gives 0; units whose pre-activation
/// does not depend on the parameters at all are skipped.
pub fn probe_boundary_distance(net: &ReluNetwork, input: &[f64]) -> f64 {
    let fwd = net.forward(input);
    let mut best = f64::INFINITY;
    let mut g = vec![0.0; net.params().len()];
    for l in 0..net.depth() - 1 {
        let width = fwd.pre[l].len();
        for i in 0..width {
            let z = fwd.pre[l][i];
            if z == 0.0 {
                return 0.0;
            }
            g.iter_mut().for_each(|x| *x = 0.0);
            let mut up = vec![0.0; width];
            up[i] = 1.0;
            net.backward(&fwd, l, up, &mut g);
            let gn = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            if gn > 0.0 {
                best = best.min(z.abs() / gn);
            }
        }
    }
    best
}

/// Boundary-distance proxy: the minimum of [`probe_boundary_distance`] over probes.
pub fn min_boundary_distance(net: &ReluNetwork, probes: &[Vec<f64>]) -> f64 {
    probes.iter().map(|p| probe_boundary_distance(net, p)).fold(f64::INFINITY, f64::min)
}

/// Distinct state embeddings (evenly thinned to at most `count`), padded with
/// random unit-norm inputs up to `count`.
pub fn default_probes(net: &ReluNetwork, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let emb = net.embedding();
    let n = emb.n_states();
    let mut probes: Vec<Vec<f64>> = Vec::with_capacity(count);
    let take = n.min(count);
    for i in 0..take {
        let s = if n <= count { i } else { i * n / count };
        let x = emb.input(s);
        if !probes.contains(&x) {
            probes.push(x);
        }
    }
    let dim = emb.input_dim();
    let mut rng = seeds::rng(seeds::derive(seed, purpose::PROBES, 0));
    while probes.len() < count {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nv > 1e-3 {
            probes.push(v.iter().map(|x| x / nv).collect());
        }
    }
    probes
}

/// Crossing statistics of one TD step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossingRecord {
    pub t: u64,
    /// (probe, unit) bit flips between `theta_{t-1}` and `theta_t`.
    pub kappa: usize,
    /// Probes whose pattern changed at all.
    pub probes_changed: usize,
    pub alpha: f64,
    pub displacement: f64,
    /// Boundary-distance proxy before the step.
    pub gamma_min: f64,
    /// `sum_p ceil(displacement / gamma_p)` over probes, `gamma_p` measured before the step.
    pub bound: f64,
    pub cum_kappa: u64,
}

impl CrossingRecord {
    pub fn violates_bound(&self) -> bool {
        self.kappa as f64 > self.bound
    }
}

/// Streaming crossing counter; keeps the previous step's patterns only.
pub struct CrossingTracker {
    probes: Vec<Vec<f64>>,
    patterns: Vec<ActivationPattern>,
    distances: Vec<f64>,
    cum: u64,
    records: Vec<CrossingRecord>,
    keep: bool,
    summary: CrossingSummary,
}

/// Running totals that survive even when per-step records are not kept.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CrossingSummary {
    pub steps: u64,
    pub total: u64,
    pub steps_with_crossings: u64,
    pub bound_violations: u64,
    /// Crossings in steps `t > steps_hint / 10`.
    pub last_decade: u64,
    pub steps_hint: u64,
}

impl CrossingSummary {
    /// Share of all crossings that happened in the last decade of steps.
    pub fn last_decade_share(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.last_decade as f64 / self.total as f64
        }
    }

    pub fn violation_rate(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.bound_violations as f64 / self.steps as f64
        }
    }
}

impl CrossingTracker {
    /// `total_steps` marks where the last decade begins; `keep_records`
    /// retains one [`CrossingRecord`] per step.
    pub fn new(net0: &ReluNetwork, probes: Vec<Vec<f64>>, total_steps: u64, keep_records: bool) -> Self {
        let patterns = probes.iter().map(|p| activation_pattern(net0, p)).collect();
        let distances = probes.iter().map(|p| probe_boundary_distance(net0, p)).collect();
        Self {
            probes,
            patterns,
            distances,
            cum: 0,
            records: Vec::new(),
            keep: keep_records,
            summary: CrossingSummary { steps_hint: total_steps, ..CrossingSummary::default() },
        }
    }

    /// Record step `t`, which moved the network to `net` with the given step
    /// size and parameter displacement.
    pub fn observe(&mut self, t: u64, net: &ReluNetwork, alpha: f64, displacement: f64) -> CrossingRecord {
        let mut kappa = 0;
        let mut changed = 0;
        let mut bound = 0.0;
        let gamma_min = self.distances.iter().copied().fold(f64::INFINITY, f64::min);
        for (i, p) in self.probes.iter().enumerate() {
            let pat = activation_pattern(net, p);
            let f = pat.flips(&self.patterns[i]);
            kappa += f;
            changed += usize::from(f > 0);
            if displacement > 0.0 {
                let g = self.distances[i];
                bound += if g > 0.0 { (displacement / g).ceil() } else { f64::INFINITY };
            }
            self.patterns[i] = pat;
            self.distances[i] = probe_boundary_distance(net, p);
        }
        self.cum += kappa as u64;
        let rec = CrossingRecord { t, kappa, probes_changed: changed, alpha, displacement, gamma_min, bound, cum_kappa: self.cum };
        let s = &mut self.summary;
        s.steps += 1;
        s.total += kappa as u64;
        s.steps_with_crossings += u64::from(kappa > 0);
        s.bound_violations += u64::from(rec.violates_bound());
        if t * 10 > s.steps_hint {
            s.last_decade += kappa as u64;
        }
        if self.keep {
            self.records.push(rec);
        }
        rec
    }

    pub fn summary(&self) -> CrossingSummary {
        self.summary
    }

    pub fn records(&self) -> &[CrossingRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<CrossingRecord> {
        self.records
    }
}

fn relu(model: &ValueModel) -> Result<&ReluNetwork> {
    match model {
        ValueModel::Relu(n) => Ok(n),
        ValueModel::Linear(_) => Err(Error::InvalidParameter("crossing diagnostics need a ReLU model".into())),
    }
}

/// Replay a recorded ReLU run and count crossings at every step.
pub fn track_crossings(history: &IterateHistory, probes: &[Vec<f64>]) -> Result<(Vec<CrossingRecord>, CrossingSummary)> {
    history.stream()?;
    let net0 = relu(&history.model0)?;
    let mut tracker = CrossingTracker::new(net0, probes.to_vec(), history.steps(), true);
    history.replay(|k, _, after, info| {
        tracker.observe(k, relu(after)?, history.alphas[(k - 1) as usize], info.displacement);
        Ok(())
    })?;
    let summary = tracker.summary();
    Ok((tracker.into_records(), summary))
}

/// CSV `t,kappa_hat,displacement,alpha,gamma_min_proxy,cum_kappa`.
pub fn write_crossings_csv<W: Write>(mut w: W, records: &[CrossingRecord]) -> Result<()> {
    writeln!(w, "t,kappa_hat,displacement,alpha,gamma_min_proxy,cum_kappa")?;
    for r in records {
        writeln!(w, "{},{},{:?},{:?},{:?},{}", r.t, r.kappa, r.displacement, r.alpha, r.gamma_min, r.cum_kappa)?;
    }
    Ok(())
}

/// Network output at `input` along the segment `theta_a + s (theta_b - theta_a)`.
pub fn segment_values(a: &ReluNetwork, b: &ReluNetwork, input: &[f64], ss: &[f64]) -> Vec<f64> {
    let mut net = a.clone();
    ss.iter()
        .map(|&s| {
            for ((p, x), y) in net.params_mut().iter_mut().zip(a.params()).zip(b.params()) {
                *p = x + s * (y - x);
            }
            net.value_at(input)
        })
        .collect()
}
