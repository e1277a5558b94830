//! Aggregate stage summaries into one PASS/FAIL/NA line per property.

use std::fmt;

use polytd::rates::DecayRegime;
use serde::{Deserialize, Serialize};

use crate::artifacts::Store;
use crate::error::{CliError, CliResult};
use crate::stages::{
    BlocksSummary, CouplingSummary, CrossingsSummary, DecomposeSummary, MixingSummary, RatesSummary, BLOCKS, COUPLING,
    CROSSINGS, DECOMPOSE, MIXING, RATES,
};

pub const MIN_TV_R2: f64 = 0.98;
pub const MAX_RECONSTRUCTION: f64 = 1e-10;
pub const MIN_SHARE_WITHIN: f64 = 0.95;
pub const MAX_LAST_DECADE_SHARE: f64 = 0.05;
pub const MAX_VIOLATION_RATE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Status {
    Pass,
    Fail,
    Na,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Na => "NA",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub property: String,
    pub status: Status,
    pub detail: String,
}

impl fmt::Display for Line {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<4} {}: {}", self.status, self.property, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub lines: Vec<Line>,
}

impl Report {
    pub fn failures(&self) -> usize {
        self.lines.iter().filter(|l| l.status == Status::Fail).count()
    }

    pub fn text(&self) -> String {
        self.lines.iter().map(|l| format!("{l}\n")).collect()
    }
}

fn line(property: &str, status: Status, detail: String) -> Line {
    Line { property: property.to_string(), status, detail }
}

fn na(property: &str, missing: &str) -> Line {
    line(property, Status::Na, format!("{missing} not present"))
}

fn pass_if(ok: bool) -> Status {
    if ok {
        Status::Pass
    } else {
        Status::Fail
    }
}

fn load<T: serde::de::DeserializeOwned>(store: &Store, rel: &str) -> CliResult<Option<T>> {
    if store.exists(rel) {
        store.read_json(rel, "").map(Some)
    } else {
        Ok(None)
    }
}

fn ergodicity(m: &MixingSummary) -> Line {
    const P: &str = "polynomial ergodicity (TV decay fit)";
    let geometric = m.tv_regime.is_some_and(|r| r.regime == DecayRegime::Geometric);
    match (&m.tv_fit, geometric) {
        (_, true) => line(P, Status::Pass, "geometric regime: decays faster than any power law".into()),
        (Some(f), false) => line(
            P,
            pass_if(f.r_squared >= MIN_TV_R2 && f.exponent > 0.0),
            format!("exponent {:.3}, R^2 {:.4} over [{}, {}] (need R^2 >= {MIN_TV_R2})", f.exponent, f.r_squared, m.window.0, m.window.1),
        ),
        (None, false) => line(P, Status::Fail, format!("no fit: {}", m.tv_note.as_deref().unwrap_or("unknown"))),
    }
}

fn blocks(b: &BlocksSummary) -> Line {
    const P: &str = "covariance between blocks (envelope domination)";
    let r = &b.report;
    let decay = r.fit.map(|f| f.exponent);
    line(
        P,
        pass_if(r.domination && decay.is_some_and(|e| e > 0.0)),
        format!(
            "b = {}, |Cov| decay exponent {}, C = {:.4} with beta {:.3}, held-out half {}",
            r.block_size,
            decay.map_or("n/a".into(), |e| format!("{e:.3}")),
            r.c_fitted,
            b.beta_nominal,
            if r.domination { "dominated" } else { "not dominated" }
        ),
    )
}

fn decomposition(d: &DecomposeSummary) -> [Line; 2] {
    let recon = line(
        "error decomposition (reconstruction)",
        pass_if(d.reconstruction_error <= MAX_RECONSTRUCTION),
        format!("max |theta_0 - theta* + M_t + R_t - e_t| = {:.2e} over {} runs", d.reconstruction_error, d.n_seeds),
    );
    const P: &str = "TD error as martingale difference (binned means)";
    let mds = if d.bins_tested == 0 {
        line(P, Status::Na, "no cell reached the minimum count".into())
    } else {
        let share = d.bins_within as f64 / d.bins_tested as f64;
        line(
            P,
            pass_if(share >= MIN_SHARE_WITHIN),
            format!("{}/{} cells within {} SE ({:.1}%, need {}%)", d.bins_within, d.bins_tested, d.z, 100.0 * share, 100.0 * MIN_SHARE_WITHIN),
        )
    };
    [recon, mds]
}

fn coupling(c: &CouplingSummary) -> Line {
    const P: &str = "coupling under polynomial ergodicity";
    let ok = c.curve.worst_violation_se <= c.z;
    let exps = match (c.coupling_fit, c.tv_fit) {
        (Some(a), Some(b)) => format!("; decay exponent {:.3} vs TV {:.3}", a.exponent, b.exponent),
        _ => String::new(),
    };
    line(P, pass_if(ok), format!("worst shortfall below the TV bound {:.2} SE (limit {}){exps}", c.curve.worst_violation_se.max(0.0), c.z))
}

fn crossings(c: &CrossingsSummary) -> Line {
    line(
        "finite region crossings",
        pass_if(c.last_decade_share < MAX_LAST_DECADE_SHARE && c.violation_rate < MAX_VIOLATION_RATE),
        format!(
            "{} crossings, last decade share {:.2}% (limit {}%), bound violations {:.3}%",
            c.total,
            100.0 * c.last_decade_share,
            100.0 * MAX_LAST_DECADE_SHARE,
            100.0 * c.violation_rate
        ),
    )
}

fn rates(r: &RatesSummary) -> Vec<Line> {
    let c = &r.reports[r.chosen];
    let gap = line(
        "high-probability error bound (exponent gap)",
        pass_if(c.exponent_gap.abs() <= r.tolerance),
        format!(
            "fitted {:.3} vs predicted {:.3} [{}], gap {:+.3} (tolerance {})",
            c.quantile_exponent,
            c.predicted_exponent,
            c.variant.name(),
            c.exponent_gap,
            r.tolerance
        ),
    );
    let dom = line(
        "high-probability error bound (held-out domination)",
        pass_if(c.domination),
        format!("envelope calibrated on the first half, min relative slack {:.3} on the second", c.slack_min),
    );
    vec![gap, dom]
}

/// Build the report from whatever summaries exist; at least one must.
pub fn build(store: &Store) -> CliResult<Report> {
    let mixing: Option<MixingSummary> = load(store, MIXING)?;
    let blocks_s: Option<BlocksSummary> = load(store, BLOCKS)?;
    let decomp: Option<DecomposeSummary> = load(store, DECOMPOSE)?;
    let coup: Option<CouplingSummary> = load(store, COUPLING)?;
    let cross: Option<CrossingsSummary> = load(store, CROSSINGS)?;
    let rate: Option<RatesSummary> = load(store, RATES)?;
    if mixing.is_none() && blocks_s.is_none() && decomp.is_none() && coup.is_none() && cross.is_none() && rate.is_none() {
        return Err(CliError::MissingArtifact {
            path: store.path(MIXING),
            hint: "no stage summaries found; run a stage such as `mixing` first".into(),
        });
    }
    let mut lines = vec![
        mixing.as_ref().map_or_else(|| na("polynomial ergodicity (TV decay fit)", MIXING), ergodicity),
        blocks_s.as_ref().map_or_else(|| na("covariance between blocks (envelope domination)", BLOCKS), blocks),
    ];
    match &decomp {
        Some(d) => lines.extend(decomposition(d)),
        None => {
            lines.push(na("error decomposition (reconstruction)", DECOMPOSE));
            lines.push(na("TD error as martingale difference (binned means)", DECOMPOSE));
        }
    }
    lines.push(coup.as_ref().map_or_else(|| na("coupling under polynomial ergodicity", COUPLING), coupling));
    lines.push(cross.as_ref().map_or_else(|| na("finite region crossings", CROSSINGS), crossings));
    match &rate {
        Some(r) => lines.extend(rates(r)),
        None => lines.push(na("high-probability error bound (exponent gap)", RATES)),
    }
    Ok(Report { lines })
}

/// Write `report.txt` and `report.json`.
pub fn write(store: &Store, report: &Report) -> CliResult<()> {
    store.write("report.txt", report.text().as_bytes())?;
    store.write_json("report.json", report)
}
