//! Run directory layout: resolved config, manifest, metrics and snapshots.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sspcm_core::{Method, TrainConfig};

use crate::config::{parse_config, render_config};

pub const CONFIG_FILE: &str = "config.txt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const BATCH_FILE: &str = "batch_losses.csv";
pub const REPORT_FILE: &str = "report.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub method: Method,
    pub config_sha256: String,
    pub version: String,
    pub data_dir: PathBuf,
    pub dataset_index_sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug)]
pub struct RunDirectory {
    path: PathBuf,
}

impl RunDirectory {
    /// Creates a fresh run directory. An existing non-empty directory is
    /// refused unless `force`, in which case it is emptied first.
    pub fn create(path: &Path, force: bool) -> Result<Self> {
        if path.exists() {
            let occupied = path.is_file() || fs::read_dir(path)?.next().is_some();
            if occupied && !force {
                bail!("run directory {} already exists (pass --force to replace it)", path.display());
            }
            if occupied {
                fs::remove_dir_all(path).with_context(|| format!("clearing {}", path.display()))?;
            }
        }
        fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self { path: path.to_path_buf() })
    }

    pub fn open(path: &Path) -> Result<Self> {
        if !path.join(MANIFEST_FILE).is_file() {
            bail!("{} is not a run directory (no {MANIFEST_FILE})", path.display());
        }
        Ok(Self { path: path.to_path_buf() })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Writes the resolved config and a manifest pinned to its hash.
    pub fn write_preamble(&self, cfg: &TrainConfig, data_dir: &Path, dataset_index_sha256: &str) -> Result<Manifest> {
        let text = render_config(cfg);
        write(&self.file(CONFIG_FILE), text.as_bytes())?;
        let manifest = Manifest {
            seed: cfg.seed,
            method: cfg.method,
            config_sha256: sha256_hex(text.as_bytes()),
            version: env!("CARGO_PKG_VERSION").to_string(),
            data_dir: data_dir.canonicalize().unwrap_or_else(|_| data_dir.to_path_buf()),
            dataset_index_sha256: dataset_index_sha256.to_string(),
        };
        write(&self.file(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)?;
        Ok(manifest)
    }

    pub fn manifest(&self) -> Result<Manifest> {
        let p = self.file(MANIFEST_FILE);
        let bytes = fs::read(&p).with_context(|| format!("reading {}", p.display()))?;
        serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", p.display()))
    }

    /// Loads the resolved config, checking it against the manifest hash.
    pub fn config(&self) -> Result<TrainConfig> {
        let p = self.file(CONFIG_FILE);
        let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        if sha256_hex(text.as_bytes()) != self.manifest()?.config_sha256 {
            bail!("{} does not match the hash in {MANIFEST_FILE}", p.display());
        }
        parse_config(&text).with_context(|| format!("parsing {}", p.display()))
    }
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}
