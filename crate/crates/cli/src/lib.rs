//! Config-driven experiment runner: stages, artifact store and report.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod report;
pub mod stages;

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use artifacts::{Manifest, Store, CONFIG};
use config::{ExperimentConfig, Overrides, Windows};
use error::{CliError, CliResult, StageContext};

pub const DEFAULT_OUT: &str = "polytd-out";

/// What a command was asked to do.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Train,
    Decompose,
    Mixing { kernel: Option<PathBuf> },
    Couple,
    Blocks,
    Crossings,
    Rates,
    Report,
    /// The whole pipeline, optionally stopping after a named stage.
    Run { stage: Option<String> },
}

#[derive(Debug, Clone, Default)]
pub struct Invocation {
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub overrides: Overrides,
}

fn load_config(inv: &Invocation, store: Option<&Store>) -> CliResult<ExperimentConfig> {
    let mut cfg = match (&inv.config, store) {
        (Some(p), _) => ExperimentConfig::load(p)?,
        (None, Some(s)) => ExperimentConfig::from_json(&s.read(CONFIG, "simulate or --config")?)?,
        (None, None) => return Err(CliError::config("<file>", "--config is required")),
    };
    cfg.apply(&inv.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(inv: &Invocation, cfg: Option<&ExperimentConfig>) -> PathBuf {
    inv.out
        .clone()
        .or_else(|| cfg.and_then(|c| c.out_dir.clone()))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn config_hash(store: &Store) -> Option<String> {
    std::fs::read(store.path(CONFIG)).ok().map(|b| hex::encode(Sha256::digest(&b)))
}

/// Run one stage against an existing store.
fn stage(name: &str, cfg: &ExperimentConfig, store: &Store) -> CliResult<()> {
    eprintln!("[polytd] {name}");
    match name {
        "simulate" => stages::simulate(cfg, store),
        "train" => stages::train(cfg, store),
        "decompose" => stages::decompose_stage(cfg, store),
        "mixing" => {
            let k = stages::load_kernel(store)?;
            stages::mixing(&k, cfg.windows.mixing, store).map(|_| ())
        }
        "blocks" => stages::blocks(cfg, store),
        "couple" => stages::couple(cfg, store),
        "crossings" => stages::crossings(cfg, store),
        "rates" => stages::rates(cfg, store),
        other => unreachable!("unknown stage {other}"),
    }
}

fn enabled(name: &str, cfg: &ExperimentConfig) -> bool {
    let d = &cfg.diagnostics;
    match name {
        "simulate" | "train" | "report" => true,
        "decompose" => d.decompose,
        "mixing" => d.mixing,
        "blocks" => d.blocks.is_some(),
        "couple" => d.coupling.is_some(),
        "crossings" => d.crossings && cfg.is_relu(),
        "rates" => d.rates.is_some(),
        _ => false,
    }
}

/// Outcome of a command: the manifest and, when a report was built, the report.
#[derive(Debug)]
pub struct Completed {
    pub out: PathBuf,
    pub manifest: Manifest,
    pub report: Option<report::Report>,
}

fn finish_report(store: &Store) -> CliResult<report::Report> {
    eprintln!("[polytd] report");
    let r = report::build(store)?;
    report::write(store, &r)?;
    Ok(r)
}

/// Execute a command. A report with failing lines is returned, not raised;
/// see [`Completed::report`].
pub fn execute(cmd: &Command, inv: &Invocation) -> CliResult<Completed> {
    let (store, report) = match cmd {
        Command::Report => {
            let store = Store::new(&out_dir(inv, None))?;
            let r = finish_report(&store)?;
            (store, Some(r))
        }
        Command::Mixing { kernel } => {
            let cfg = match &inv.config {
                Some(_) => Some(load_config(inv, None)?),
                None => None,
            };
            let store = Store::new(&out_dir(inv, cfg.as_ref()))?;
            let k = match (kernel, &cfg) {
                (Some(p), _) => read_kernel_file(p)?,
                (None, _) if store.exists(artifacts::KERNEL) => stages::load_kernel(&store)?,
                (None, Some(c)) => c.build_kernel()?,
                (None, None) => stages::load_kernel(&store)?,
            };
            let windows = cfg.as_ref().map_or_else(Windows::default, |c| c.windows.clone());
            eprintln!("[polytd] mixing");
            stages::mixing(&k, windows.mixing, &store)?;
            (store, None)
        }
        Command::Simulate => {
            let cfg = load_config(inv, None)?;
            let store = Store::new(&out_dir(inv, Some(&cfg)))?;
            stage("simulate", &cfg, &store)?;
            (store, None)
        }
        Command::Run { stage: stop } => {
            if let Some(s) = stop {
                if !stages::STAGES.contains(&s.as_str()) {
                    return Err(CliError::config("--stage", format!("unknown stage `{s}`; expected one of {:?}", stages::STAGES)));
                }
            }
            let cfg = load_config(inv, None)?;
            let store = Store::new(&out_dir(inv, Some(&cfg)))?;
            let mut report = None;
            for name in stages::STAGES {
                if enabled(name, &cfg) {
                    if name == "report" {
                        report = Some(finish_report(&store)?);
                    } else {
                        stage(name, &cfg, &store)?;
                    }
                }
                if stop.as_deref() == Some(name) {
                    break;
                }
            }
            (store, report)
        }
        other => {
            let name = match other {
                Command::Train => "train",
                Command::Decompose => "decompose",
                Command::Couple => "couple",
                Command::Blocks => "blocks",
                Command::Crossings => "crossings",
                Command::Rates => "rates",
                _ => unreachable!(),
            };
            let provisional = match &inv.config {
                Some(_) => Some(load_config(inv, None)?),
                None => None,
            };
            let store = Store::new(&out_dir(inv, provisional.as_ref()))?;
            let cfg = match provisional {
                Some(c) => c,
                None => load_config(inv, Some(&store))?,
            };
            stage(name, &cfg, &store)?;
            (store, None)
        }
    };
    let manifest = store.write_manifest(config_hash(&store))?;
    Ok(Completed { out: store.root().to_path_buf(), manifest, report })
}

fn read_kernel_file(p: &Path) -> CliResult<polytd::chain::TransitionKernel> {
    if !p.is_file() {
        return Err(CliError::MissingArtifact { path: p.to_path_buf(), hint: "kernel file given with --kernel".into() });
    }
    let text = std::fs::read_to_string(p).map_err(|source| CliError::Io { context: format!("reading {}", p.display()), source })?;
    polytd::chain::TransitionKernel::from_json(&text).stage("read kernel")
}
