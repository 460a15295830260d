//! On-disk formats: manifests, JSON checkpoints, CSV tables and two-column
//! curve files.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use cfharm_core::eval::{Cdf, StateRow};
use cfharm_core::scm::InitRegime;
use cfharm_core::shield::ShieldMode;
use cfharm_core::trainer::{Checkpoint, UpdateMetrics, CHECKPOINT_VERSION};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config.toml";
pub const METRICS: &str = "metrics.csv";
pub const REPORT: &str = "report.csv";
pub const SUMMARY: &str = "summary.json";
pub const BASELINE: &str = "baseline.json";
pub const CDF_HARM: &str = "cdf_harm.txt";
pub const CDF_VIOLATION: &str = "cdf_violation.txt";
pub const CDF_DEFAULT_VIOLATION: &str = "cdf_default_violation.txt";
pub const SELECTION: &str = "selection.json";
pub const CHECKPOINTS: &str = "checkpoints";

/// Which critics bootstrap shield branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShieldValues {
    /// Fall back to a noise-free default rollout after the branch.
    #[default]
    Rollout,
    /// The checkpoint's constraint critics.
    Critic,
}

/// What produced a directory, with enough arguments to redo it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Invocation {
    Train,
    Eval {
        checkpoint: Option<PathBuf>,
        n_states: usize,
        seed: u64,
        regime: InitRegime,
        deterministic: bool,
        shield: Option<ShieldMode>,
        #[serde(default)]
        shield_values: ShieldValues,
    },
    Baseline {
        n_states: usize,
        seed: u64,
        regime: InitRegime,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub invocation: Invocation,
    pub env: String,
    pub formulation: Option<String>,
    pub seed: u64,
    /// Resolved configuration, TOML.
    pub config: String,
    pub outputs: Vec<String>,
    pub status: String,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let f = File::open(path).map_err(|e| CliError::Usage(format!("cannot open {}: {e}", path.display())))?;
    serde_json::from_reader(BufReader::new(f))
        .map_err(|e| CliError::Usage(format!("malformed {}: {e}", path.display())))
}

pub fn write_manifest(dir: &Path, m: &RunManifest) -> CliResult<()> {
    write_json(&dir.join(MANIFEST), m)
}

pub fn read_manifest(path: &Path) -> CliResult<RunManifest> {
    read_json(path)
}

pub fn checkpoint_name(update: usize) -> String {
    format!("update_{update:06}.json")
}

pub fn save_checkpoint(path: &Path, c: &Checkpoint) -> CliResult<()> {
    write_json(path, c)
}

pub fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    let c: Checkpoint = read_json(path)?;
    if c.version != CHECKPOINT_VERSION {
        return Err(CliError::Usage(format!(
            "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
            c.version
        )));
    }
    c.model
        .check_params(&c.params)
        .map_err(|e| CliError::Usage(format!("corrupt checkpoint {}: {e}", path.display())))?;
    Ok(c)
}

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub update: usize,
    pub violation_probability: Option<f64>,
    pub success_rate: Option<f64>,
    pub episodes: usize,
    pub violations: usize,
    pub successes: usize,
    pub mean_reward: f64,
    pub mean_episode_return: Option<f64>,
    pub mean_target: f64,
    pub threshold: f64,
    pub mean_harm: f64,
    pub w: f64,
    pub lagrange_lr: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
}

impl From<&UpdateMetrics> for MetricsRow {
    fn from(m: &UpdateMetrics) -> Self {
        Self {
            update: m.update,
            violation_probability: m.violation_probability(),
            success_rate: m.success_rate(),
            episodes: m.episodes,
            violations: m.violations,
            successes: m.successes,
            mean_reward: m.mean_reward,
            mean_episode_return: m.mean_episode_return,
            mean_target: m.mean_target,
            threshold: m.threshold,
            mean_harm: m.mean_harm,
            w: m.w,
            lagrange_lr: m.lagrange_lr,
            policy_loss: m.policy_loss,
            value_loss: m.value_loss,
            entropy: m.entropy,
            approx_kl: m.approx_kl,
            clip_fraction: m.clip_fraction,
            grad_norm: m.grad_norm,
        }
    }
}

pub fn metrics_writer(path: &Path) -> CliResult<csv::Writer<File>> {
    Ok(csv::Writer::from_path(path)?)
}

pub fn read_metrics(path: &Path) -> CliResult<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows: Result<Vec<MetricsRow>, _> = r.deserialize().collect();
    Ok(rows?)
}

pub fn write_report(path: &Path, rows: &[StateRow]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report(path: &Path) -> CliResult<Vec<StateRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows: Result<Vec<StateRow>, _> = r.deserialize().collect();
    Ok(rows?)
}

/// Two columns, value and cumulative fraction, one step per line.
pub fn write_cdf(path: &Path, c: &Cdf) -> CliResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# value cumulative_fraction")?;
    for (v, f) in c.values.iter().zip(&c.fractions) {
        writeln!(w, "{v} {f}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_cdf(path: &Path) -> CliResult<Cdf> {
    let f = BufReader::new(File::open(path)?);
    let mut c = Cdf {
        values: Vec::new(),
        fractions: Vec::new(),
    };
    for line in f.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace().map(str::parse::<f64>);
        match (it.next(), it.next()) {
            (Some(Ok(v)), Some(Ok(p))) => {
                c.values.push(v);
                c.fractions.push(p);
            }
            _ => {
                return Err(CliError::Runtime(format!(
                    "malformed curve line `{line}` in {}",
                    path.display()
                )))
            }
        }
    }
    Ok(c)
}

/// Default-policy statistics under an initial-state regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineStats {
    pub env: String,
    pub regime: InitRegime,
    pub n_states: usize,
    pub seed: u64,
    pub violation_probability: f64,
}

/// Files in `dir`, sorted, relative to it.
pub fn list_outputs(dir: &Path) -> CliResult<Vec<String>> {
    let mut out = Vec::new();
    collect(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<String>) -> CliResult<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect(root, &p, out)?;
        } else if let Ok(rel) = p.strip_prefix(root) {
            let rel = rel.to_string_lossy().replace('\\', "/");
            if rel != MANIFEST {
                out.push(rel);
            }
        }
    }
    Ok(())
}
