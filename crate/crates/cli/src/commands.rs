//! Subcommand implementations.

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use troll_core::gradcheck::{check_gradient, GradCheckConfig};
use troll_core::projection::{project as project_one, project_vjp};
use troll_core::sparse_dist::{kl_bound_from_constants, sparsify_with_info, SparsifyInfo};
use troll_core::synthetic::random_violated_pair;
use troll_core::toy_rlvr::experiment::{run_experiment, write_atomic};
use troll_core::toy_rlvr::{Method, TrainConfig};
use troll_core::{DenseLogits, SparseDist, SparseGradient, SparsifyParams, TrustRegionConfig};

use crate::{invalid, runtime, CliError, CliResult};

const DEFAULT_SEED: u64 = 42;

/// Reads non-empty lines from a file or stdin (`-`).
fn read_lines(input: &Path) -> CliResult<Vec<(usize, String)>> {
    let reader: Box<dyn Read> = if input == Path::new("-") {
        Box::new(std::io::stdin())
    } else {
        Box::new(File::open(input).map_err(|e| invalid(format!("{}: {e}", input.display())))?)
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

/// Writes to `output` atomically, or to stdout when absent.
fn emit(output: Option<&Path>, text: &str) -> CliResult<()> {
    match output {
        Some(path) => write_atomic(path, text.as_bytes())?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
        }
    }
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> CliResult<String> {
    serde_json::to_string(value).map_err(runtime)
}

fn parse_line<T: for<'de> Deserialize<'de>>(lineno: usize, line: &str) -> CliResult<T> {
    serde_json::from_str(line).map_err(|e| invalid(format!("line {lineno}: {e}")))
}

fn line_error(lineno: usize, e: troll_core::Error) -> CliError {
    let validation = e.is_validation();
    let err = anyhow::anyhow!("line {lineno}: {e}");
    if validation {
        CliError::Invalid(err)
    } else {
        CliError::Runtime(err)
    }
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    /// JSONL file of {"target": SparseDist, "reference": SparseDist}; `-` for stdin.
    #[arg(long, short, default_value = "-")]
    input: PathBuf,
    /// Output JSONL file (stdout if omitted).
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    epsilon: f64,
}

#[derive(Debug, Deserialize)]
struct ProjectLine {
    target: SparseDist,
    reference: SparseDist,
}

pub fn project(args: ProjectArgs) -> CliResult<()> {
    let config = TrustRegionConfig::with_epsilon(args.epsilon);
    config.validate()?;
    let lines = read_lines(&args.input)?;
    let pairs = lines
        .iter()
        .map(|(n, l)| parse_line::<ProjectLine>(*n, l))
        .collect::<CliResult<Vec<_>>>()?;
    let outcomes: Vec<_> = pairs
        .par_iter()
        .zip(&lines)
        .map(|(p, (n, _))| project_one(&p.target, &p.reference, &config).map_err(|e| line_error(*n, e)))
        .collect::<CliResult<_>>()?;
    let mut text = String::new();
    for o in &outcomes {
        text.push_str(&to_json(o)?);
        text.push('\n');
    }
    emit(args.output.as_deref(), &text)?;
    let projected: Vec<f64> = outcomes.iter().filter(|o| o.was_projected).map(|o| o.eta_star).collect();
    let mean_eta = if projected.is_empty() {
        0.0
    } else {
        projected.iter().sum::<f64>() / projected.len() as f64
    };
    eprintln!(
        "projected {} of {} positions, mean eta* {mean_eta}",
        projected.len(),
        outcomes.len()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct CheckGradArgs {
    /// Projected instances to test.
    #[arg(long, default_value_t = 500)]
    trials: usize,
    /// In-region instances whose VJP must equal the upstream exactly.
    #[arg(long, default_value_t = 100)]
    in_region_trials: usize,
    #[arg(long, default_value_t = 1e-6)]
    h: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 3)]
    vocab_min: usize,
    #[arg(long, default_value_t = 64)]
    vocab_max: usize,
    /// Comma-separated trust-region radii to sample from.
    #[arg(long, value_delimiter = ',', default_values_t = [0.01, 0.05, 0.25])]
    epsilons: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
}

pub fn check_grad(args: CheckGradArgs) -> CliResult<()> {
    let config = GradCheckConfig {
        trials: args.trials,
        in_region_trials: args.in_region_trials,
        vocab_min: args.vocab_min,
        vocab_max: args.vocab_max,
        epsilons: args.epsilons,
        h: args.h,
        tolerance: args.tolerance,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let report = check_gradient(&config, &mut rng)?;
    println!("{}", serde_json::to_string_pretty(&report).map_err(runtime)?);
    if report.passed() {
        Ok(())
    } else {
        Err(runtime(format!(
            "{} of {} instances exceeded tolerance {} (max relative error {})",
            report.failures.len(),
            config.trials + config.in_region_trials,
            config.tolerance,
            report.max_rel_error
        )))
    }
}

#[derive(Debug, Args)]
pub struct SparsifyArgs {
    /// JSONL file of {"log_probs": [...], "forced_id": optional}; `-` for stdin.
    #[arg(long, short, default_value = "-")]
    input: PathBuf,
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    top_k: usize,
    #[arg(long, default_value_t = 1e-5)]
    delta: f64,
    #[arg(long, default_value_t = 1e-12)]
    p_default: f64,
    /// Lines processed per parallel chunk.
    #[arg(long, default_value_t = 1024)]
    chunk_size: usize,
    /// Treat input vectors as unnormalized logits.
    #[arg(long)]
    from_logits: bool,
}

#[derive(Debug, Deserialize)]
struct SparsifyLine {
    log_probs: Vec<f64>,
    #[serde(default)]
    forced_id: Option<usize>,
}

#[derive(Debug, Serialize)]
struct SparsifyRecord {
    dist: SparseDist,
    #[serde(flatten)]
    info: SparsifyInfo,
}

pub fn sparsify(args: SparsifyArgs) -> CliResult<()> {
    if args.chunk_size == 0 {
        return Err(invalid("--chunk-size must be >= 1"));
    }
    let base = SparsifyParams {
        top_k: args.top_k,
        delta: args.delta,
        p_default: args.p_default,
        forced_id: None,
    };
    let lines = read_lines(&args.input)?;
    let mut text = String::new();
    for chunk in lines.chunks(args.chunk_size) {
        let records = chunk
            .par_iter()
            .map(|(n, l)| {
                let parsed: SparsifyLine = parse_line(*n, l)?;
                let dense = if args.from_logits {
                    DenseLogits::from_logits(&parsed.log_probs)
                } else {
                    DenseLogits::new(parsed.log_probs)
                }
                .map_err(|e| line_error(*n, e))?;
                let (dist, info) = sparsify_with_info(&dense, &base.with_forced(parsed.forced_id))
                    .map_err(|e| line_error(*n, e))?;
                Ok(SparsifyRecord { dist, info })
            })
            .collect::<CliResult<Vec<_>>>()?;
        for r in &records {
            text.push_str(&to_json(r)?);
            text.push('\n');
        }
    }
    emit(args.output.as_deref(), &text)
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Positions per batch.
    #[arg(long, default_value_t = 4096)]
    batch: usize,
    /// Kept tokens per position.
    #[arg(long = "vocab-kept", default_value_t = 64)]
    vocab_kept: usize,
    #[arg(long, default_value_t = 0.05)]
    epsilon: f64,
    #[arg(long, default_value_t = 3)]
    repeat: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Emit JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Serialize)]
struct BenchRow {
    repeat: String,
    forward_p50_us: f64,
    forward_p95_us: f64,
    backward_p50_us: f64,
    backward_p95_us: f64,
    forward_tokens_per_s: f64,
    forward_backward_tokens_per_s: f64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

/// `wall_*` are batch wall-clock seconds; throughput reflects the thread pool.
fn bench_row(label: String, forward: &mut [f64], backward: &mut [f64], wall_fwd: f64, wall_bwd: f64) -> BenchRow {
    forward.sort_by(f64::total_cmp);
    backward.sort_by(f64::total_cmp);
    let n = forward.len() as f64;
    BenchRow {
        repeat: label,
        forward_p50_us: percentile(forward, 0.5),
        forward_p95_us: percentile(forward, 0.95),
        backward_p50_us: percentile(backward, 0.5),
        backward_p95_us: percentile(backward, 0.95),
        forward_tokens_per_s: n / wall_fwd,
        forward_backward_tokens_per_s: n / (wall_fwd + wall_bwd),
    }
}

pub fn bench(args: BenchArgs) -> CliResult<()> {
    if args.batch == 0 || args.repeat == 0 {
        return Err(invalid("--batch and --repeat must be >= 1"));
    }
    if args.vocab_kept < 2 {
        return Err(invalid("--vocab-kept must be >= 2"));
    }
    let config = TrustRegionConfig::with_epsilon(args.epsilon);
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let instances: Vec<_> = (0..args.batch)
        .map(|_| random_violated_pair(&mut rng, args.vocab_kept, args.epsilon))
        .collect();
    let upstreams: Vec<SparseGradient> = instances
        .iter()
        .map(|(t, _)| SparseGradient {
            kept: (0..t.num_kept()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            default: 0.0,
        })
        .collect();

    let mut rows = Vec::new();
    let (mut all_fwd, mut all_bwd) = (Vec::new(), Vec::new());
    let (mut total_fwd, mut total_bwd) = (0.0, 0.0);
    for r in 0..args.repeat {
        let start = Instant::now();
        let forward: Vec<(_, f64)> = instances
            .par_iter()
            .map(|(t, reference)| {
                let s = Instant::now();
                let out = project_one(t, reference, &config)?;
                Ok((out, s.elapsed().as_secs_f64() * 1e6))
            })
            .collect::<troll_core::Result<_>>()?;
        let wall_fwd = start.elapsed().as_secs_f64();
        let start = Instant::now();
        let mut bwd: Vec<f64> = forward
            .par_iter()
            .zip(&instances)
            .zip(&upstreams)
            .map(|(((out, _), (t, reference)), up)| {
                let s = Instant::now();
                std::hint::black_box(project_vjp(out, t, reference, up)?);
                Ok(s.elapsed().as_secs_f64() * 1e6)
            })
            .collect::<troll_core::Result<_>>()?;
        let wall_bwd = start.elapsed().as_secs_f64();
        let mut fwd: Vec<f64> = forward.iter().map(|(_, us)| *us).collect();
        all_fwd.extend_from_slice(&fwd);
        all_bwd.extend_from_slice(&bwd);
        total_fwd += wall_fwd;
        total_bwd += wall_bwd;
        rows.push(bench_row(r.to_string(), &mut fwd, &mut bwd, wall_fwd, wall_bwd));
    }
    rows.push(bench_row("all".into(), &mut all_fwd, &mut all_bwd, total_fwd, total_bwd));

    if args.json {
        println!("{}", serde_json::to_string_pretty(&rows).map_err(runtime)?);
    } else {
        println!(
            "{:>6} {:>12} {:>12} {:>12} {:>12} {:>14} {:>14}",
            "repeat", "fwd_p50_us", "fwd_p95_us", "bwd_p50_us", "bwd_p95_us", "fwd_tok/s", "fwd+bwd_tok/s"
        );
        for r in &rows {
            println!(
                "{:>6} {:>12.3} {:>12.3} {:>12.3} {:>12.3} {:>14.0} {:>14.0}",
                r.repeat,
                r.forward_p50_us,
                r.forward_p95_us,
                r.backward_p50_us,
                r.backward_p95_us,
                r.forward_tokens_per_s,
                r.forward_backward_tokens_per_s
            );
        }
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML config; unspecified keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated methods (troll, clip).
    #[arg(long, value_delimiter = ',', default_value = "troll")]
    method: Vec<String>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_values_t = [DEFAULT_SEED])]
    seed: Vec<u64>,
    /// Overrides the config's step count.
    #[arg(long)]
    steps: Option<usize>,
    /// Directory for the CSV files and summary.json.
    #[arg(long)]
    out_dir: PathBuf,
    /// Record per-step wall-clock time (CSV no longer byte-reproducible).
    #[arg(long)]
    wall_time: bool,
}

pub fn train(args: TrainArgs) -> CliResult<()> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
            TrainConfig::from_toml(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Some(steps) = args.steps {
        config.steps = steps;
    }
    config.wall_time |= args.wall_time;
    config.validate()?;
    let methods = args
        .method
        .iter()
        .map(|m| m.parse::<Method>())
        .collect::<troll_core::Result<Vec<_>>>()?;
    let (summary, files) = run_experiment(&config, &methods, &args.seed, &args.out_dir)?;
    for f in &files {
        eprintln!("wrote {}", f.display());
    }
    for (name, m) in &summary.methods {
        println!(
            "{name}: final success {:.4} ± {:.4}, final entropy {:.4}, {} {:.5}",
            m.final_success_mean,
            m.final_success_std,
            m.final_entropy_mean,
            m.intervention_metric,
            m.mean_intervention_fraction
        );
    }
    if !summary.failures.is_empty() {
        for f in &summary.failures {
            eprintln!("run {} seed {} failed: {}", f.method.name(), f.seed, f.error);
        }
        return Err(runtime(format!("{} run(s) failed", summary.failures.len())));
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct BoundArgs {
    /// Kept tokens k.
    #[arg(long, default_value_t = 256)]
    kept: usize,
    #[arg(long, default_value_t = 151_936)]
    vocab: usize,
    #[arg(long, default_value_t = 1e-5)]
    delta: f64,
    #[arg(long, default_value_t = 1e-12)]
    p_default: f64,
    /// Lower bound on the reference probabilities.
    #[arg(long, default_value_t = 1.17549e-38)]
    q_min: f64,
    #[arg(long, default_value_t = 0.05)]
    sparse_kl: f64,
    #[arg(long)]
    json: bool,
}

pub fn bound(args: BoundArgs) -> CliResult<()> {
    let b = kl_bound_from_constants(
        args.kept,
        args.vocab,
        args.delta,
        args.p_default,
        args.q_min,
        args.sparse_kl,
    )?;
    if args.json {
        println!("{}", to_json(&b)?);
    } else {
        println!("inverse_gamma = {}", b.inverse_gamma);
        println!("slack = {}", b.slack);
        println!("sparse_kl = {}", b.sparse_kl);
        println!("bound = {}", b.bound);
    }
    Ok(())
}
