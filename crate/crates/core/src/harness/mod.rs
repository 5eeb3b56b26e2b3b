//! Drivers behind the command-line front end: multi-seed runs, parameter
//! sweeps and the invariant suite.
//!
//! Output layout under an output root:
//!
//! ```text
//! <root>/<name>/seed_<s>/trace.csv
//! <root>/<name>/summary.json
//! <root>/<name>/<key>=<value>/...        (one run directory per swept value)
//! <root>/<name>/sweep_<key>.csv          (value,mean,std of final test accuracy)
//! ```

mod verify;

pub use verify::{verify, PropertyResult, VerifyOptions};

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, SWEEPABLE};
use crate::error::{Error, Result};
use crate::experiment;
use crate::metrics::{self, RoundMetrics};

/// Environment variable that overrides the config's `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "DFCA_OUTPUT_DIR";

/// Output root: `$DFCA_OUTPUT_DIR` if set, else the config's `output_dir`.
pub fn output_root(cfg: &ExperimentConfig) -> PathBuf {
    std::env::var_os(OUTPUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| cfg.output_dir.clone())
}

/// Final-round numbers of one seed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedFinal {
    pub seed: u64,
    pub test_accuracy: f64,
    pub test_accuracy_client_mean: f64,
    pub clustering_accuracy: f64,
    pub f_global: f64,
    /// First round after which no assignment changed; `null` if the last
    /// round still changed assignments.
    pub stabilization_round: Option<usize>,
}

impl SeedFinal {
    fn from_trace(seed: u64, trace: &[RoundMetrics]) -> Self {
        let last = trace.last();
        Self {
            seed,
            test_accuracy: last.map_or(0.0, |m| m.test_accuracy),
            test_accuracy_client_mean: last.map_or(0.0, |m| m.test_accuracy_client_mean),
            clustering_accuracy: last.map_or(0.0, |m| m.clustering_accuracy),
            f_global: last.map_or(0.0, |m| m.f_global),
            stabilization_round: metrics::stabilization_round(trace),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub name: String,
    pub algorithm: String,
    pub n_seeds: usize,
    pub rounds: usize,
    pub test_accuracy: MeanStd,
    pub test_accuracy_client_mean: MeanStd,
    pub clustering_accuracy: MeanStd,
    pub f_global: MeanStd,
    pub seeds: Vec<SeedFinal>,
}

impl Summary {
    pub fn from_finals(cfg: &ExperimentConfig, seeds: Vec<SeedFinal>) -> Self {
        let col = |f: fn(&SeedFinal) -> f64| MeanStd::of(&seeds.iter().map(f).collect::<Vec<_>>());
        Self {
            name: cfg.name.clone(),
            algorithm: cfg.algorithm.to_string(),
            n_seeds: seeds.len(),
            rounds: cfg.rounds,
            test_accuracy: col(|s| s.test_accuracy),
            test_accuracy_client_mean: col(|s| s.test_accuracy_client_mean),
            clustering_accuracy: col(|s| s.clustering_accuracy),
            f_global: col(|s| s.f_global),
            seeds,
        }
    }
}

/// Result of one multi-seed run: every trace plus the summary.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub traces: Vec<Vec<RoundMetrics>>,
    pub summary: Summary,
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Runs seeds `seed .. seed + n_seeds` and writes traces and the summary to
/// `dir`. Seeds run in parallel; every file has exactly one writer.
pub fn run_seeds(cfg: &ExperimentConfig, dir: &Path) -> Result<RunOutput> {
    cfg.validate()?;
    let k = cfg.model_count();
    let traces: Vec<Vec<RoundMetrics>> = (0..cfg.n_seeds as u64)
        .into_par_iter()
        .map(|s| -> Result<Vec<RoundMetrics>> {
            let mut seeded = cfg.clone();
            seeded.seed = cfg.seed + s;
            let trace = experiment::run_experiment(&seeded)?;
            write(
                &dir.join(format!("seed_{s}")).join("trace.csv"),
                &metrics::trace_csv(&trace, k),
            )?;
            Ok(trace)
        })
        .collect::<Result<_>>()?;
    let finals = traces
        .iter()
        .enumerate()
        .map(|(s, t)| SeedFinal::from_trace(cfg.seed + s as u64, t))
        .collect();
    let summary = Summary::from_finals(cfg, finals);
    write(&dir.join("summary.json"), &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    Ok(RunOutput {
        dir: dir.to_path_buf(),
        traces,
        summary,
    })
}

/// `run`: all seeds of one config under `<root>/<name>`.
pub fn cmd_run(cfg: &ExperimentConfig, root: &Path) -> Result<RunOutput> {
    run_seeds(cfg, &root.join(&cfg.name))
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub csv_path: PathBuf,
    pub runs: Vec<(String, RunOutput)>,
}

/// `sweep`: one multi-seed run per value of `key`, plus a combined
/// `value,mean,std` CSV of final test accuracy.
pub fn cmd_sweep<S: AsRef<str>>(
    cfg: &ExperimentConfig,
    root: &Path,
    key: &str,
    values: &[S],
) -> Result<SweepOutput> {
    if !SWEEPABLE.contains(&key) {
        return Err(Error::invalid(key, "is not a sweepable numeric key"));
    }
    if values.is_empty() {
        return Err(Error::invalid(key, "sweep needs at least one value"));
    }
    let base = root.join(&cfg.name);
    let mut runs = Vec::with_capacity(values.len());
    let mut csv = String::from("value,mean,std\n");
    for v in values {
        let v = v.as_ref().trim();
        let mut c = cfg.clone();
        c.set(key, v)?;
        c.validate()?;
        let out = run_seeds(&c, &base.join(format!("{key}={v}")))?;
        csv.push_str(&format!(
            "{v},{},{}\n",
            out.summary.test_accuracy.mean, out.summary.test_accuracy.std
        ));
        runs.push((v.to_string(), out));
    }
    let csv_path = base.join(format!("sweep_{key}.csv"));
    write(&csv_path, &csv)?;
    Ok(SweepOutput { csv_path, runs })
}
