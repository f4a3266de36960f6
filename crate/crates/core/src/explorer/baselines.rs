use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use super::config::{SearchConfig, SearchMode};
use super::search::{check_constraints, run_search, RunOutput};
use crate::error::{Error, Result};
use crate::hwmodel::{cost_hw, expand_indices, min_cost_design, LayerShape, MetricId};
use crate::supernet::{one_hot_encoding, TaskDataset};
use crate::surrogate::{EstimatorModel, HwEncoding};

pub const AUTOTUNE_CAP: usize = 12;

/// Plain architecture search (no hardware term) followed by an exhaustive
/// oracle grid search for the cheapest hardware meeting the constraints.
pub fn nas_then_hw(cfg: &SearchConfig, est: &EstimatorModel, task: &TaskDataset, seed: u64) -> Result<RunOutput> {
    let mut nas_cfg = cfg.clone();
    nas_cfg.lambda_cost = 0.0;
    nas_cfg.constraints.clear();
    let mut out = run_search(&nas_cfg, SearchMode::Unconstrained, est, task, seed)?;

    let cost = cfg.cost.with_references(est.refs());
    let layers = expand_indices(&out.solution.arch, LayerShape::default_stem())?;
    let feasible_pick = min_cost_design(&layers, &cost, |m| check_constraints(m, &cfg.constraints).1)?;
    let (hw, oracle) = match feasible_pick {
        Some(p) => p,
        None => min_cost_design(&layers, &cost, |_| true)?.expect("grid is nonempty"),
    };
    let (in_constraint, feasible) = check_constraints(&oracle, &cfg.constraints);
    let s = &mut out.solution;
    s.estimator = est.predict(&one_hot_encoding(&s.arch), &HwEncoding::encode(&hw))?;
    s.hw = hw;
    s.oracle = oracle;
    s.loss = out.trajectory.final_loss_nas() + cfg.lambda_cost * cost_hw(&oracle, &cost);
    s.lambda_cost = cfg.lambda_cost;
    s.mode = "nas-then-hw".to_string();
    s.constraints = cfg.constraints.clone();
    s.in_constraint = in_constraint;
    s.feasible = feasible;
    Ok(out)
}

/// Search with the weighted penalty `soft_lambda * max(t/T - 1, 0)` and no
/// gradient correction.
pub fn soft_search(cfg: &SearchConfig, est: &EstimatorModel, task: &TaskDataset, seed: u64) -> Result<RunOutput> {
    run_search(cfg, SearchMode::Soft, est, task, seed)
}

/// Knob adjusted by [`autotune`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Control {
    SoftLambda,
    LambdaCost,
}

#[derive(Debug, Clone, Serialize)]
pub struct AutotuneStep {
    pub value: f64,
    /// Oracle value of the tuned metric.
    pub metric: f64,
    pub in_window: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct AutotuneReport {
    pub control: Control,
    pub metric: MetricId,
    pub target: f64,
    pub search_count: usize,
    pub success: bool,
    pub steps: Vec<AutotuneStep>,
    #[serde(skip)]
    pub last: Option<RunOutput>,
}

/// Manual tuning procedure for penalty-based baselines: start from the
/// configured value, double it until the metric meets the target, then
/// bisect toward the window `[0.5 T, T]` if it overshoots. The first
/// constraint of `cfg` is the tuned one; at most [`AUTOTUNE_CAP`] searches.
pub fn autotune(
    cfg: &SearchConfig,
    control: Control,
    est: &EstimatorModel,
    task: &TaskDataset,
    seed: u64,
) -> Result<AutotuneReport> {
    let first = *cfg
        .constraints
        .first()
        .ok_or_else(|| Error::Config("autotune needs at least one constraint".into()))?;
    let (mode, start) = match control {
        Control::SoftLambda => (SearchMode::Soft, cfg.soft_lambda),
        Control::LambdaCost => (SearchMode::Unconstrained, cfg.lambda_cost),
    };
    if !(start.is_finite() && start > 0.0) {
        return Err(Error::Config("autotune needs a positive starting value".into()));
    }
    let target = first.target;
    let mut value = start;
    let mut weak: Option<f64> = None;
    let mut strong: Option<f64> = None;
    let mut report = AutotuneReport {
        control,
        metric: first.metric,
        target,
        search_count: 0,
        success: false,
        steps: Vec::new(),
        last: None,
    };
    while report.search_count < AUTOTUNE_CAP {
        let mut run_cfg = cfg.clone();
        match control {
            Control::SoftLambda => run_cfg.soft_lambda = value,
            Control::LambdaCost => run_cfg.lambda_cost = value,
        }
        let out = run_search(&run_cfg, mode, est, task, seed)?;
        report.search_count += 1;
        let m = out.solution.oracle.get(first.metric);
        let in_window = m <= target && m >= 0.5 * target;
        report.steps.push(AutotuneStep {
            value,
            metric: m,
            in_window,
        });
        report.last = Some(out);
        if in_window {
            report.success = true;
            break;
        }
        if m > target {
            weak = Some(value);
            value = strong.map_or(2.0 * value, |s| 0.5 * (value + s));
        } else {
            strong = Some(value);
            value = weak.map_or(0.5 * value, |w| 0.5 * (value + w));
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub seed: u64,
    pub val_error: f64,
    pub latency_ms: f64,
    pub energy_mj: f64,
    pub cost: f64,
}

/// One unconstrained run per `(lambda, seed)`; oracle metrics of each result.
pub fn sweep_lambda(
    cfg: &SearchConfig,
    lambdas: &[f64],
    seeds: &[u64],
    est: &EstimatorModel,
    task: &TaskDataset,
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    if lambdas.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one lambda and one seed".into()));
    }
    let cost = cfg.cost.with_references(est.refs());
    let jobs_list: Vec<(f64, u64)> = lambdas.iter().flat_map(|&l| seeds.iter().map(move |&s| (l, s))).collect();
    let results = with_pool(jobs, || {
        jobs_list
            .par_iter()
            .map(|&(lambda, seed)| {
                let mut c = cfg.clone();
                c.lambda_cost = lambda;
                c.constraints.clear();
                let out = run_search(&c, SearchMode::Unconstrained, est, task, seed)?;
                let s = &out.solution;
                Ok(SweepRow {
                    lambda,
                    seed,
                    val_error: s.val_error,
                    latency_ms: s.oracle.latency_ms,
                    energy_mj: s.oracle.energy_mj,
                    cost: cost_hw(&s.oracle, &cost),
                })
            })
            .collect::<Vec<Result<SweepRow>>>()
    })?;
    results.into_iter().collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("lambda,seed,val_error,latency_ms,energy_mJ,cost_hw\n");
    for r in rows {
        writeln!(out, "{},{},{},{},{},{}", r.lambda, r.seed, r.val_error, r.latency_ms, r.energy_mj, r.cost).expect("string write");
    }
    out
}

/// Runs `f` on a dedicated pool of `jobs` threads.
pub fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Independent runs over `seeds`, in seed order regardless of `jobs`.
pub fn run_seeds(
    cfg: &SearchConfig,
    mode: SearchMode,
    est: &EstimatorModel,
    task: &TaskDataset,
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<RunOutput>> {
    with_pool(jobs, || {
        seeds
            .par_iter()
            .map(|&s| run_search(cfg, mode, est, task, s))
            .collect::<Vec<Result<RunOutput>>>()
    })?
    .into_iter()
    .collect()
}
