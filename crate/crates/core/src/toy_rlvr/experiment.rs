//! Multi-run driver: one CSV per (method, seed) plus a JSON summary.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toy_rlvr::trainer::{train_step, Method, StepMetrics, TrainConfig, TrainState};

/// Writes `bytes` to a temporary file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Metrics of one finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: Method,
    pub seed: u64,
    pub metrics: Vec<StepMetrics>,
}

impl RunResult {
    pub fn csv(&self) -> String {
        let mut out = StepMetrics::csv_header(self.method);
        out.push('\n');
        for m in &self.metrics {
            out.push_str(&m.csv_row());
            out.push('\n');
        }
        out
    }

    fn window(&self, len: usize) -> &[StepMetrics] {
        &self.metrics[self.metrics.len().saturating_sub(len)..]
    }

    fn window_mean(&self, len: usize, f: impl Fn(&StepMetrics) -> f64) -> f64 {
        let w = self.window(len);
        if w.is_empty() {
            return 0.0;
        }
        w.iter().map(f).sum::<f64>() / w.len() as f64
    }

    pub fn final_success(&self, window: usize) -> f64 {
        self.window_mean(window, |m| m.success_rate)
    }

    pub fn final_entropy(&self, window: usize) -> f64 {
        self.window_mean(window, |m| m.entropy_mean)
    }

    pub fn mean_intervention(&self) -> f64 {
        self.window_mean(self.metrics.len(), |m| m.intervention_fraction)
    }
}

/// Runs `config.steps` updates from a fresh state.
pub fn run_training(config: &TrainConfig, method: Method, seed: u64) -> Result<RunResult> {
    let mut state = TrainState::new(config, seed)?;
    let metrics = (0..config.steps)
        .map(|_| train_step(&mut state, config, method))
        .collect::<Result<Vec<_>>>()?;
    Ok(RunResult { method, seed, metrics })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub final_success: f64,
    pub final_entropy: f64,
    pub mean_intervention_fraction: f64,
    pub aborted_steps: usize,
    pub entropy_trajectory: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub intervention_metric: String,
    pub final_success_mean: f64,
    /// Population standard deviation across seeds.
    pub final_success_std: f64,
    pub final_entropy_mean: f64,
    pub mean_intervention_fraction: f64,
    pub runs: Vec<SeedSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub method: Method,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub config: TrainConfig,
    pub final_window: usize,
    pub methods: BTreeMap<String, MethodSummary>,
    pub failures: Vec<RunFailure>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

pub fn csv_name(method: Method, seed: u64) -> String {
    format!("{}_seed{}.csv", method.name(), seed)
}

/// Aggregates finished runs into the summary.
pub fn summarize(config: &TrainConfig, runs: &[RunResult], failures: Vec<RunFailure>) -> ExperimentSummary {
    let window = config.final_window;
    let mut methods = BTreeMap::new();
    let mut seen: Vec<Method> = Vec::new();
    for r in runs {
        if !seen.contains(&r.method) {
            seen.push(r.method);
        }
    }
    for method in seen {
        let per: Vec<SeedSummary> = runs
            .iter()
            .filter(|r| r.method == method)
            .map(|r| SeedSummary {
                seed: r.seed,
                final_success: r.final_success(window),
                final_entropy: r.final_entropy(window),
                mean_intervention_fraction: r.mean_intervention(),
                aborted_steps: r.metrics.iter().filter(|m| m.aborted).count(),
                entropy_trajectory: r.metrics.iter().map(|m| m.entropy_mean).collect(),
            })
            .collect();
        let successes: Vec<f64> = per.iter().map(|s| s.final_success).collect();
        let (final_success_mean, final_success_std) = mean_std(&successes);
        let entropies: Vec<f64> = per.iter().map(|s| s.final_entropy).collect();
        let interventions: Vec<f64> = per.iter().map(|s| s.mean_intervention_fraction).collect();
        methods.insert(
            method.name().to_string(),
            MethodSummary {
                intervention_metric: method.intervention_column().to_string(),
                final_success_mean,
                final_success_std,
                final_entropy_mean: mean_std(&entropies).0,
                mean_intervention_fraction: mean_std(&interventions).0,
                runs: per,
            },
        );
    }
    ExperimentSummary {
        config: config.clone(),
        final_window: window,
        methods,
        failures,
    }
}

/// Runs every (method, seed) pair, writes `<method>_seed<seed>.csv` files and
/// `summary.json` into `out_dir`. A failing run is recorded and skipped.
pub fn run_experiment(
    config: &TrainConfig,
    methods: &[Method],
    seeds: &[u64],
    out_dir: &Path,
) -> Result<(ExperimentSummary, Vec<PathBuf>)> {
    config.validate()?;
    if seeds.is_empty() || methods.is_empty() {
        return Err(Error::Validation("need at least one method and one seed".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let jobs: Vec<(Method, u64)> = methods
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
        .collect();
    let results: Vec<Result<RunResult>> = jobs
        .par_iter()
        .map(|&(m, s)| run_training(config, m, s))
        .collect();

    let mut runs = Vec::new();
    let mut failures = Vec::new();
    let mut written = Vec::new();
    for ((method, seed), result) in jobs.into_iter().zip(results) {
        match result {
            Ok(run) => {
                let path = out_dir.join(csv_name(method, seed));
                write_atomic(&path, run.csv().as_bytes())?;
                written.push(path);
                runs.push(run);
            }
            Err(e) => failures.push(RunFailure {
                method,
                seed,
                error: e.to_string(),
            }),
        }
    }
    let summary = summarize(config, &runs, failures);
    let path = out_dir.join("summary.json");
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Serde(e.to_string()))?;
    write_atomic(&path, json.as_bytes())?;
    written.push(path);
    Ok((summary, written))
}
