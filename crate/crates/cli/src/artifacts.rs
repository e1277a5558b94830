//! Artifact directory: typed reads and writes plus the checksum manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config.json";
pub const KERNEL: &str = "kernel.json";
pub const SEEDS: &str = "seeds.json";
pub const FIXED_POINT: &str = "fixed_point.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_sha256: Option<String>,
    pub library_version: String,
    /// Relative path (with `/` separators) to SHA-256.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

fn io(context: String) -> impl FnOnce(std::io::Error) -> CliError {
    move |source| CliError::Io { context, source }
}

impl Store {
    pub fn new(root: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(root).map_err(io(format!("creating {}", root.display())))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn exists(&self, rel: &str) -> bool {
        self.path(rel).is_file()
    }

    pub fn write(&self, rel: &str, bytes: &[u8]) -> CliResult<()> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(io(format!("creating {}", dir.display())))?;
        }
        std::fs::write(&p, bytes).map_err(io(format!("writing {}", p.display())))
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> CliResult<()> {
        let mut s = serde_json::to_string_pretty(value).expect("artifact serialises");
        s.push('\n');
        self.write(rel, s.as_bytes())
    }

    /// Read a required input; a missing file names the stage that produces it.
    pub fn read(&self, rel: &str, producer: &str) -> CliResult<String> {
        let p = self.path(rel);
        if !p.is_file() {
            return Err(CliError::MissingArtifact { path: p, hint: format!("produced by `{producer}`") });
        }
        std::fs::read_to_string(&p).map_err(io(format!("reading {}", p.display())))
    }

    pub fn read_json<T: DeserializeOwned>(&self, rel: &str, producer: &str) -> CliResult<T> {
        let text = self.read(rel, producer)?;
        serde_json::from_str(&text).map_err(|e| CliError::Stage { stage: "read", source: polytd::Error::Format(format!("{rel}: {e}")) })
    }

    /// Rewrite the manifest over every file currently in the directory.
    pub fn write_manifest(&self, config_sha256: Option<String>) -> CliResult<Manifest> {
        let mut files = BTreeMap::new();
        for entry in walkdir::WalkDir::new(&self.root).sort_by_file_name() {
            let entry = entry.map_err(|e| CliError::Io {
                context: format!("listing {}", self.root.display()),
                source: e.into(),
            })?;
            if !entry.file_type().is_file() {
                continue;
            }
            let rel = entry.path().strip_prefix(&self.root).expect("walk stays under root");
            let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            if key == MANIFEST {
                continue;
            }
            let bytes = std::fs::read(entry.path()).map_err(io(format!("reading {}", entry.path().display())))?;
            files.insert(key, hex::encode(Sha256::digest(&bytes)));
        }
        let m = Manifest { config_sha256, library_version: env!("CARGO_PKG_VERSION").to_string(), files };
        self.write_json(MANIFEST, &m)?;
        Ok(m)
    }
}

/// `histories/seed_0003.json` and friends.
pub fn seed_file(dir: &str, index: usize, ext: &str) -> String {
    format!("{dir}/seed_{index:04}.{ext}")
}
