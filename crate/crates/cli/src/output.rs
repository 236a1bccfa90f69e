//! Output plumbing: atomic writes, run manifests and artifact files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use gaintune::config::ExperimentConfig;
use gaintune::gains::{GainVec, GAIN_DIM};
use gaintune::gradients::{GainMode, GainTrajectory};

/// Writes through a sibling temporary file so readers never observe a
/// partial file and reruns replace rather than append.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let name = path
        .file_name()
        .context("output path has no file name")?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("renaming onto {}", path.display()))?;
    Ok(())
}

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let digest = Sha256::digest(cfg.to_toml().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// `git describe` of the working tree, or the crate version outside a
/// checkout.
pub fn revision() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--abbrev=12"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")))
}

#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub command: &'a str,
    pub config_hash: String,
    pub seed: u64,
    pub revision: String,
    pub wall_time_s: f64,
    pub outputs: Vec<String>,
    pub effective_config: String,
}

pub fn write_manifest(
    out: &Path,
    command: &str,
    cfg: &ExperimentConfig,
    wall_time_s: f64,
    outputs: &[PathBuf],
) -> Result<()> {
    let m = Manifest {
        command,
        config_hash: config_hash(cfg),
        seed: cfg.seed,
        revision: revision(),
        wall_time_s,
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        effective_config: cfg.to_toml(),
    };
    write_atomic(
        &out.join(format!("{command}.manifest.json")),
        serde_json::to_string_pretty(&m)?.as_bytes(),
    )
}

pub const GAINS_FORMAT: &str = "gain-schedule-v1";

/// A tuned gain schedule on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainsFile {
    pub format: String,
    pub method: String,
    pub adaptive: bool,
    pub stride: usize,
    pub horizon: usize,
    pub blocks: Vec<Vec<f64>>,
}

impl GainsFile {
    pub fn from_trajectory(method: &str, g: &GainTrajectory) -> Self {
        Self {
            format: GAINS_FORMAT.into(),
            method: method.into(),
            adaptive: g.mode == GainMode::Adaptive,
            stride: g.stride,
            horizon: g.horizon,
            blocks: g.blocks.iter().map(|b| b.iter().copied().collect()).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let f: Self = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if f.format != GAINS_FORMAT || f.blocks.is_empty() || f.blocks.iter().any(|b| b.len() != GAIN_DIM) {
            anyhow::bail!("{} is not a {GAINS_FORMAT} file", path.display());
        }
        Ok(f)
    }

    /// Fixed gains: the single block, or the time average of a schedule.
    pub fn fixed_gains(&self) -> GainVec {
        let sum = self
            .blocks
            .iter()
            .fold(GainVec::zeros(), |a, b| a + GainVec::from_column_slice(b));
        sum / self.blocks.len() as f64
    }
}

pub fn csv<R>(header: &str, rows: impl IntoIterator<Item = R>, line: impl Fn(&R) -> String) -> String {
    let mut s = String::from(header);
    s.push('\n');
    for r in rows {
        s.push_str(&line(&r));
        s.push('\n');
    }
    s
}
