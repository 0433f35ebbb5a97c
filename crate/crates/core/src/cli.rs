//! The `ddnn` command-line tool.
//!
//! Exit codes: 0 success (training converged), 2 usage, config or input
//! errors, 3 training finished without converging, 4 runtime failures.
//! Every failure prints exactly one line starting with `error:` to stderr.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{ArgGroup, Args, Parser, Subcommand};

use crate::config::{DataSource, Method, RunConfig};
use crate::data::{generate_2d_field, generate_3d_parametric, CylinderGrid, Dataset, MaterialDistribution};
use crate::ddm::{train, DdmModel, RunReport, TrainOptions, CHECKPOINT_FILE};
use crate::decomposition::Split;
use crate::error::Error;
use crate::metrics;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

/// Environment variable that overrides the configured output directory.
pub const OUT_ENV: &str = "DDNN_OUT";

pub const SWEEP_SUMMARY_FILE: &str = "sweep_summary.csv";

#[derive(Debug, Parser)]
#[command(name = "ddnn", version, about = "Domain-decomposed neural-network surrogate training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset to CSV.
    Generate(GenerateArgs),
    /// Train a decomposed model.
    Train(TrainArgs),
    /// Evaluate a checkpoint against datasets.
    Evaluate(EvaluateArgs),
    /// Train several splits (and methods) one after another.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("kind").required(true).args(["two_d", "three_d"])))]
struct GenerateArgs {
    /// 2D manufactured field on an nx × nz grid.
    #[arg(long = "2d", requires_all = ["nx", "nz"])]
    two_d: bool,
    /// 3D parametric cylinder with lognormal material samples.
    #[arg(long = "3d", requires = "samples")]
    three_d: bool,
    #[arg(long)]
    nx: Option<usize>,
    #[arg(long)]
    nz: Option<usize>,
    #[arg(long, default_value_t = crate::data::DEFAULT_BOUNDARY_LAYER)]
    boundary_layer: f64,
    #[arg(long)]
    samples: Option<usize>,
    /// Node grid preset: coarse or fine.
    #[arg(long, default_value = "coarse")]
    grid: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path.
    #[arg(long, short)]
    output: PathBuf,
}

/// Options shared by `train` and `sweep`.
#[derive(Debug, Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training data CSV (overrides the config's data source).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Worker threads for the subdomain solves.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    gap_rows: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    split: Option<Split>,
    #[command(flatten)]
    run: RunArgs,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Checkpoint file, or the directory holding it.
    #[arg(long)]
    model: PathBuf,
    /// Dataset to evaluate (typically the training data).
    #[arg(long)]
    data: PathBuf,
    /// Held-out dataset; its statistics are written alongside.
    #[arg(long)]
    test_data: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Comma-separated splits, e.g. 2x1,3x1.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    splits: Vec<Split>,
    /// Comma-separated methods; defaults to the config's.
    #[arg(long, value_delimiter = ',')]
    methods: Vec<Method>,
    #[command(flatten)]
    run: RunArgs,
}

/// A failed command: exit code and one-line message.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    /// Errors while reading configs, checkpoints or data.
    fn input(e: Error) -> Self {
        Self::usage(e.to_string())
    }

    fn classify(e: Error) -> Self {
        Self { code: exit_code(&e), message: e.to_string() }
    }
}

/// Exit code for an error raised during a run.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::Parse { .. }
        | Error::InvalidArchitecture(_)
        | Error::InvalidPartition(_)
        | Error::InvalidCount(_)
        | Error::InvalidNormal(_)
        | Error::InvalidInterface(_)
        | Error::OutOfDomain { .. }
        | Error::EmptyData
        | Error::EmptySubdomain(_)
        | Error::Shape { .. } => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn one_line(text: &str) -> String {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with("Usage:") && !l.starts_with("For more information"))
        .map(|l| l.strip_prefix("error:").unwrap_or(l).trim())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Run the tool with the given arguments (including the program name) and
/// return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return EXIT_OK;
        }
        Err(e) => {
            eprintln!("error: {}", one_line(&e.render().to_string()));
            return EXIT_USAGE;
        }
    };
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", one_line(&f.message));
            f.code
        }
    }
}

fn cmd_generate(a: GenerateArgs) -> Result<i32, Failure> {
    let ds = if a.two_d {
        generate_2d_field(a.nx.unwrap_or(0), a.nz.unwrap_or(0), a.boundary_layer).map_err(Failure::input)?
    } else {
        let grid = CylinderGrid::preset(&a.grid).map_err(Failure::input)?;
        generate_3d_parametric(a.samples.unwrap_or(0), &MaterialDistribution::default(), &grid, a.seed)
            .map_err(Failure::input)?
    };
    if let Some(parent) = a.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Failure::classify(Error::io(parent, e)))?;
    }
    ds.save_csv(&a.output).map_err(Failure::classify)?;
    println!("wrote {} rows to {}", ds.len(), a.output.display());
    Ok(EXIT_OK)
}

/// Output directory: flag, then `DDNN_OUT`, then the config, then `out`.
fn resolve_out_dir(flag: Option<&Path>, cfg: Option<&RunConfig>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(env) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(env);
    }
    cfg.and_then(|c| c.out_dir.clone()).unwrap_or_else(|| PathBuf::from("out"))
}

fn load_config(
    path: Option<&Path>,
    method: Option<Method>,
    split: Option<Split>,
    run: &RunArgs,
) -> Result<RunConfig, Failure> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p).map_err(Failure::input)?,
        None => {
            let method = method.ok_or_else(|| Failure::usage("--method is required without --config"))?;
            let split = split.clone().ok_or_else(|| Failure::usage("--split is required without --config"))?;
            RunConfig::new(method, split)
        }
    };
    if let Some(m) = method {
        cfg.method = m;
    }
    if let Some(s) = split {
        cfg.split = s;
    }
    if let Some(d) = &run.data {
        cfg.data = Some(DataSource::Csv { path: d.clone() });
    }
    if run.workers.is_some() {
        cfg.workers = run.workers;
    }
    if let Some(s) = run.seed {
        cfg.seed = s;
    }
    if let Some(k) = run.k_max {
        cfg.k_max = k;
    }
    if let Some(g) = run.gap_rows {
        cfg.gap_rows = g;
    }
    cfg.validate().map_err(Failure::input)?;
    Ok(cfg)
}

fn load_data(cfg: &RunConfig) -> Result<Dataset, Failure> {
    cfg.data
        .as_ref()
        .ok_or_else(|| Failure::usage("no training data: pass --data or set \"data\" in the config"))?
        .load()
        .map_err(Failure::input)
}

/// Train once and write every artifact into `out_dir`.
fn train_and_emit(cfg: &RunConfig, ds: &Dataset, out_dir: &Path, resume: bool) -> Result<(DdmModel, RunReport), Failure> {
    let opts = TrainOptions {
        out_dir: Some(out_dir.to_path_buf()),
        resume,
    };
    let (model, report) = train(cfg, ds, &opts).map_err(Failure::classify)?;
    let normalized = model.normalization.apply(ds).map_err(Failure::classify)?;
    let field = metrics::error_field(&model, &normalized).map_err(Failure::classify)?;
    metrics::emit_report(&report, Some((&field, &model.normalization)), out_dir).map_err(Failure::classify)?;
    if ds.schema.param_dim > 0 {
        let stats = metrics::statistics_field(&model, &normalized).map_err(Failure::classify)?;
        metrics::write_statistics(out_dir.join(metrics::statistics_file_name("train")), &stats, &model.normalization)
            .map_err(Failure::classify)?;
        metrics::write_interface_samples(out_dir.join(metrics::INTERFACE_SAMPLES_FILE), &model)
            .map_err(Failure::classify)?;
    }
    Ok((model, report))
}

fn max_e_rel(report: &RunReport) -> f64 {
    report.final_metrics.as_ref().map(|f| f.max_e_rel).unwrap_or(f64::NAN)
}

fn cmd_train(a: TrainArgs) -> Result<i32, Failure> {
    let mut cfg = load_config(a.run.config.as_deref(), a.method, a.split, &a.run)?;
    let out_dir = resolve_out_dir(a.run.out_dir.as_deref(), Some(&cfg));
    cfg.out_dir = Some(out_dir.clone());
    let ds = load_data(&cfg)?;
    let (_, report) = train_and_emit(&cfg, &ds, &out_dir, a.resume)?;
    let verdict = if report.converged() { "converged" } else { "not converged" };
    println!(
        "{verdict} after {} outer iterations; max e_rel {:.6e}; artifacts in {}",
        report.outer_iterations,
        max_e_rel(&report),
        out_dir.display()
    );
    Ok(if report.converged() { EXIT_OK } else { EXIT_NOT_CONVERGED })
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<i32, Failure> {
    let path = if a.model.is_dir() { a.model.join(CHECKPOINT_FILE) } else { a.model.clone() };
    let (model, _) = DdmModel::load(&path).map_err(Failure::input)?;
    let out_dir = resolve_out_dir(a.out_dir.as_deref(), None);
    std::fs::create_dir_all(&out_dir).map_err(|e| Failure::classify(Error::io(&out_dir, e)))?;
    let mut summary = serde_json::Map::new();
    let sets = std::iter::once(("train", &a.data)).chain(a.test_data.as_ref().map(|p| ("test", p)));
    for (label, data_path) in sets {
        let raw = Dataset::load_csv(data_path, Some(model.normalization.schema)).map_err(Failure::input)?;
        let normalized = model.normalization.apply(&raw).map_err(Failure::input)?;
        let field = metrics::error_field(&model, &normalized).map_err(Failure::input)?;
        if label == "train" {
            metrics::write_error_grid(out_dir.join(metrics::ERROR_GRID_FILE), &field, &model.normalization)
                .map_err(Failure::classify)?;
        } else {
            metrics::write_error_grid(out_dir.join(format!("error_grid_{label}.csv")), &field, &model.normalization)
                .map_err(Failure::classify)?;
        }
        let mut entry = serde_json::json!({
            "rows": raw.len(),
            "max_e_rel": field.max,
            "argmax_row": field.argmax,
            "mean_e_rel": field.mean,
        });
        if raw.schema.param_dim > 0 {
            let stats = metrics::statistics_field(&model, &normalized).map_err(Failure::classify)?;
            metrics::write_statistics(out_dir.join(metrics::statistics_file_name(label)), &stats, &model.normalization)
                .map_err(Failure::classify)?;
            entry["max_e_rel_mean"] = stats.max_e_mean().into();
            entry["max_e_rel_std"] = stats.max_e_std().into();
        }
        println!("{label}: max e_rel {:.6e} over {} rows", field.max, raw.len());
        summary.insert(label.to_string(), entry);
    }
    metrics::write_interface_samples(out_dir.join(metrics::INTERFACE_SAMPLES_FILE), &model)
        .map_err(Failure::classify)?;
    let path = out_dir.join("evaluation.json");
    let mut text = serde_json::to_string_pretty(&summary).map_err(|e| Failure::classify(e.into()))?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Failure::classify(Error::io(&path, e)))?;
    Ok(EXIT_OK)
}

fn cmd_sweep(a: SweepArgs) -> Result<i32, Failure> {
    if a.splits.is_empty() {
        return Err(Failure::usage("--splits needs at least one split"));
    }
    let base = load_config(a.run.config.as_deref(), a.methods.first().copied(), Some(a.splits[0].clone()), &a.run)?;
    let methods = if a.methods.is_empty() { vec![base.method] } else { a.methods.clone() };
    let out_dir = resolve_out_dir(a.run.out_dir.as_deref(), Some(&base));
    std::fs::create_dir_all(&out_dir).map_err(|e| Failure::classify(Error::io(&out_dir, e)))?;
    let ds = load_data(&base)?;
    let mut lines = vec!["split,method,outer_iterations,wall_s,s_per_iteration,max_e_rel,converged,error".to_string()];
    for split in &a.splits {
        for &method in &methods {
            let mut cfg = base.clone();
            cfg.split = split.clone();
            cfg.method = method;
            let run_dir = out_dir.join(format!("{split}_{method}"));
            cfg.out_dir = Some(run_dir.clone());
            let start = Instant::now();
            let outcome = train_and_emit(&cfg, &ds, &run_dir, false);
            let wall = start.elapsed().as_secs_f64();
            let line = match outcome {
                Ok((_, r)) => format!(
                    "{split},{method},{},{wall:.3},{:.3},{:.6e},{},",
                    r.outer_iterations,
                    wall / r.outer_iterations.max(1) as f64,
                    max_e_rel(&r),
                    r.converged()
                ),
                Err(f) => format!("{split},{method},0,{wall:.3},,,false,\"{}\"", one_line(&f.message).replace('"', "'")),
            };
            println!("{line}");
            lines.push(line);
        }
    }
    let path = out_dir.join(SWEEP_SUMMARY_FILE);
    std::fs::write(&path, lines.join("\n") + "\n").map_err(|e| Failure::classify(Error::io(&path, e)))?;
    Ok(EXIT_OK)
}
