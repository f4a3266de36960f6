//! Command-line front end. [`run`] returns the process exit code:
//! 0 success, 1 search finished outside its constraints, 2 usage or
//! configuration error, 3 I/O error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::constrainer::parse_constraints;
use crate::error::{Error, Result};
use crate::explorer::{
    autotune, nas_then_hw, run_seeds, sweep_csv, sweep_lambda, write_run, Control, RunOutput, SearchConfig,
    SearchMode, Solution, SOLUTION_FILE,
};
use crate::hwmodel::{read_dataset, sample_pairs, write_dataset, DatasetSummary, LayerShape, MetricId};
use crate::supernet::gen_synthetic_dataset;
use crate::surrogate::{pretrain_estimator, EstimatorModel, PretrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INFEASIBLE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

/// Top-level run configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub search: SearchConfig,
    pub dataset_seed: u64,
    pub dataset_size: usize,
    pub dataset: Option<PathBuf>,
    pub estimator: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            search: SearchConfig::default(),
            dataset_seed: 0,
            dataset_size: 50_000,
            dataset: None,
            estimator: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.search.validate()?;
        Ok(cfg)
    }

    fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}

#[derive(Debug, Parser)]
#[command(name = "hdx", version, about = "Constrained co-exploration of networks and accelerators")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample architecture/accelerator pairs labelled by the oracle.
    Sample(SampleArgs),
    /// Train the metric estimator on a sampled dataset.
    Pretrain(PretrainArgs),
    /// Run one or more searches.
    Search(SearchArgs),
    /// Unconstrained runs over a grid of lambda_cost values.
    Sweep(SweepArgs),
    /// Tune a penalty weight until a constraint lands in its window.
    Autotune(AutotuneArgs),
    /// Summarize a directory of search outputs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Hdx,
    Soft,
    Unconstrained,
    NasThenHw,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub estimator: Option<PathBuf>,
    /// Comma-separated upper bounds, e.g. `latency_ms<=0.2,area_mm2<=3`.
    #[arg(long)]
    pub constraints: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of consecutive seeds starting at `--seed`.
    #[arg(long, default_value_t = 1)]
    pub runs: u64,
    #[arg(long, value_enum, default_value_t = ModeArg::Hdx)]
    pub mode: ModeArg,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub estimator: Option<PathBuf>,
    /// `start:stop:step` or a comma-separated list.
    #[arg(long)]
    pub lambda: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seeds per lambda value.
    #[arg(long, default_value_t = 1)]
    pub runs: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ControlArg {
    SoftLambda,
    LambdaCost,
}

#[derive(Debug, Args)]
pub struct AutotuneArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub estimator: Option<PathBuf>,
    #[arg(long)]
    pub constraints: Option<String>,
    #[arg(long, value_enum, default_value_t = ControlArg::SoftLambda)]
    pub control: ControlArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory scanned recursively for solution files.
    #[arg(long)]
    pub runs: PathBuf,
    /// Optional CSV with one row per run.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

/// Worker threads: `--jobs` (default 1), capped by `HDX_THREADS` when set.
pub fn resolve_jobs(flag: Option<usize>) -> usize {
    let cap = std::env::var("HDX_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0);
    let want = flag.unwrap_or(1).max(1);
    cap.map_or(want, |c| want.min(c))
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) => EXIT_IO,
        _ => EXIT_USAGE,
    }
}

/// Parses `args` (including the program name) and executes the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Sample(a) => cmd_sample(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Search(a) => cmd_search(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Autotune(a) => cmd_autotune(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn cmd_sample(a: SampleArgs) -> Result<i32> {
    let cfg = RunConfig::load_or_default(a.config.as_deref())?;
    let n = a.n.unwrap_or(cfg.dataset_size);
    let seed = a.seed.unwrap_or(cfg.dataset_seed);
    let records = sample_pairs(n, seed, cfg.search.layers, LayerShape::default_stem())?;
    write_dataset(&a.out, &records)?;
    let summary = DatasetSummary::of(&records);
    println!("{}", serde_json::to_string(&summary)?);
    Ok(EXIT_OK)
}

fn cmd_pretrain(a: PretrainArgs) -> Result<i32> {
    let records = read_dataset(&a.dataset)?;
    let cfg = PretrainConfig {
        epochs: a.epochs,
        batch: a.batch,
        lr: a.lr,
        seed: a.seed,
    };
    let (model, report) = pretrain_estimator(&records, &cfg)?;
    model.save(&a.out)?;
    let within: serde_json::Map<String, serde_json::Value> = MetricId::ALL
        .iter()
        .map(|m| (m.key().to_string(), json!(report.within_tol[m.index()])))
        .collect();
    let out = json!({
        "train_records": report.train_records,
        "holdout_records": report.holdout_records,
        "within_10pct": within,
        "holdout_mse": report.holdout_mse,
        "baseline_mse": report.baseline_mse,
        "final_train_mse": report.final_train_mse,
        "refs": model.refs(),
    });
    println!("{out}");
    Ok(EXIT_OK)
}

fn load_estimator(flag: Option<&Path>, cfg: &RunConfig) -> Result<EstimatorModel> {
    let path = flag
        .or(cfg.estimator.as_deref())
        .ok_or_else(|| Error::Config("no estimator given (--estimator or config `estimator`)".into()))?;
    EstimatorModel::load(path)
}

fn cmd_search(a: SearchArgs) -> Result<i32> {
    let mut cfg = RunConfig::load_or_default(a.config.as_deref())?;
    if let Some(text) = &a.constraints {
        if a.mode == ModeArg::Unconstrained {
            return Err(Error::Config("--constraints contradicts --mode unconstrained".into()));
        }
        cfg.search.constraints = parse_constraints(text)?;
    }
    if a.mode == ModeArg::Unconstrained {
        cfg.search.constraints.clear();
    }
    if a.runs == 0 {
        return Err(Error::Config("--runs must be at least 1".into()));
    }
    cfg.search.validate()?;
    let est = load_estimator(a.estimator.as_deref(), &cfg)?;
    let task = gen_synthetic_dataset(cfg.search.task_seed);
    let seeds: Vec<u64> = (a.seed..a.seed + a.runs).collect();
    let jobs = resolve_jobs(a.jobs);

    let outputs: Vec<RunOutput> = match a.mode {
        ModeArg::NasThenHw => crate::explorer::with_pool(jobs, || {
            use rayon::prelude::*;
            seeds
                .par_iter()
                .map(|&s| nas_then_hw(&cfg.search, &est, &task, s))
                .collect::<Vec<Result<RunOutput>>>()
        })?
        .into_iter()
        .collect::<Result<_>>()?,
        mode => {
            let m = match mode {
                ModeArg::Hdx => SearchMode::Hdx,
                ModeArg::Soft => SearchMode::Soft,
                _ => SearchMode::Unconstrained,
            };
            run_seeds(&cfg.search, m, &est, &task, &seeds, jobs)?
        }
    };

    let mut all_ok = true;
    for out in &outputs {
        let dir = if outputs.len() == 1 {
            a.out.clone()
        } else {
            a.out.join(format!("seed-{}", out.solution.seed))
        };
        write_run(&dir, out)?;
        println!("seed {}: {}", out.solution.seed, out.solution.verdict());
        all_ok &= out.solution.feasible;
    }
    Ok(if all_ok { EXIT_OK } else { EXIT_INFEASIBLE })
}

/// Expands `start:stop:step` or `a,b,c` into a list of values.
pub fn parse_lambda_grid(text: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("bad lambda grid `{text}`"));
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
    let values: Vec<f64> = if text.contains(':') {
        let parts: Vec<&str> = text.split(':').collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        let (start, stop, step) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
        if step.is_nan() || step <= 0.0 || stop < start {
            return Err(bad());
        }
        let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
        // Rounded to 12 significant digits so grid values print cleanly.
        (0..n).map(|i| format!("{:.12e}", start + i as f64 * step).parse().expect("formatted float")).collect()
    } else {
        text.split(',').map(num).collect::<Result<_>>()?
    };
    if values.is_empty() || values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(bad());
    }
    Ok(values)
}

fn cmd_sweep(a: SweepArgs) -> Result<i32> {
    let cfg = RunConfig::load_or_default(a.config.as_deref())?;
    let lambdas = parse_lambda_grid(&a.lambda)?;
    if a.runs == 0 {
        return Err(Error::Config("--runs must be at least 1".into()));
    }
    let est = load_estimator(a.estimator.as_deref(), &cfg)?;
    let task = gen_synthetic_dataset(cfg.search.task_seed);
    let seeds: Vec<u64> = (a.seed..a.seed + a.runs).collect();
    let rows = sweep_lambda(&cfg.search, &lambdas, &seeds, &est, &task, resolve_jobs(a.jobs))?;
    fs::write(&a.out, sweep_csv(&rows))?;
    println!("{} rows written to {}", rows.len(), a.out.display());
    Ok(EXIT_OK)
}

fn cmd_autotune(a: AutotuneArgs) -> Result<i32> {
    let mut cfg = RunConfig::load_or_default(a.config.as_deref())?;
    if let Some(text) = &a.constraints {
        cfg.search.constraints = parse_constraints(text)?;
    }
    cfg.search.validate()?;
    let est = load_estimator(a.estimator.as_deref(), &cfg)?;
    let task = gen_synthetic_dataset(cfg.search.task_seed);
    let control = match a.control {
        ControlArg::SoftLambda => Control::SoftLambda,
        ControlArg::LambdaCost => Control::LambdaCost,
    };
    let report = autotune(&cfg.search, control, &est, &task, a.seed)?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    fs::write(&a.out, &text)?;
    println!(
        "search_count={} success={} values={:?}",
        report.search_count,
        report.success,
        report.steps.iter().map(|s| s.value).collect::<Vec<_>>()
    );
    Ok(if report.success { EXIT_OK } else { EXIT_INFEASIBLE })
}

fn collect_solutions(dir: &Path, out: &mut Vec<(PathBuf, Solution)>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_solutions(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == SOLUTION_FILE) {
            let s: Solution = serde_json::from_str(&fs::read_to_string(&p)?)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            out.push((p, s));
        }
    }
    Ok(())
}

/// Markdown summary of a set of solutions.
pub fn summarize(solutions: &[Solution]) -> String {
    let mut md = String::from("| quantity | mean | min | max |\n|---|---|---|---|\n");
    let stats = |f: &dyn Fn(&Solution) -> f64| {
        let v: Vec<f64> = solutions.iter().map(f).collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (mean, min, max)
    };
    type Column<'a> = (&'a str, &'a dyn Fn(&Solution) -> f64);
    let rows: [Column; 5] = [
        ("latency_ms", &|s| s.oracle.latency_ms),
        ("energy_mJ", &|s| s.oracle.energy_mj),
        ("area_mm2", &|s| s.oracle.area_mm2),
        ("val_error", &|s| s.val_error),
        ("loss", &|s| s.loss),
    ];
    for (name, f) in rows {
        let (mean, min, max) = stats(f);
        writeln!(md, "| {name} | {mean:.6} | {min:.6} | {max:.6} |").expect("string write");
    }
    let sat = solutions.iter().filter(|s| s.feasible).count();
    writeln!(
        md,
        "\nruns: {}, in-constraint: {sat}, satisfaction_rate: {:.3}",
        solutions.len(),
        sat as f64 / solutions.len() as f64
    )
    .expect("string write");
    md
}

fn cmd_report(a: ReportArgs) -> Result<i32> {
    let mut found = Vec::new();
    collect_solutions(&a.runs, &mut found)?;
    if found.is_empty() {
        return Err(Error::Config(format!("no {SOLUTION_FILE} under {}", a.runs.display())));
    }
    let solutions: Vec<Solution> = found.iter().map(|(_, s)| s.clone()).collect();
    print!("{}", summarize(&solutions));
    if let Some(path) = &a.csv {
        let mut csv = String::from("path,seed,mode,latency_ms,energy_mJ,area_mm2,val_error,loss,feasible\n");
        for (p, s) in &found {
            writeln!(
                csv,
                "{},{},{},{},{},{},{},{},{}",
                p.display(),
                s.seed,
                s.mode,
                s.oracle.latency_ms,
                s.oracle.energy_mj,
                s.oracle.area_mm2,
                s.val_error,
                s.loss,
                u8::from(s.feasible)
            )
            .expect("string write");
        }
        fs::write(path, csv)?;
    }
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_grid_parsing() {
        let g = parse_lambda_grid("0.001:0.010:0.001").unwrap();
        assert_eq!(g.len(), 10);
        assert_eq!(g[0], 0.001);
        assert_eq!(g[9], 0.01);
        assert_eq!(parse_lambda_grid("0.5,1,2").unwrap(), vec![0.5, 1.0, 2.0]);
        assert!(parse_lambda_grid("1:0:0.1").is_err());
        assert!(parse_lambda_grid("a,b").is_err());
        assert!(parse_lambda_grid("0:1").is_err());
    }

    #[test]
    fn run_config_rejects_unknown_keys() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"search": {}, "bogus": 1}"#).is_err());
        let cfg: RunConfig = serde_json::from_str(r#"{"search": {"epochs": 2}, "dataset_size": 10}"#).unwrap();
        assert_eq!(cfg.search.epochs, 2);
        assert_eq!(cfg.dataset_size, 10);
    }

    #[test]
    fn jobs_respect_cap() {
        // Only the flag path; the environment variable is exercised end to end.
        if std::env::var("HDX_THREADS").is_err() {
            assert_eq!(resolve_jobs(None), 1);
            assert_eq!(resolve_jobs(Some(3)), 3);
            assert_eq!(resolve_jobs(Some(0)), 1);
        }
    }
}
