//! Co-exploration of architecture and accelerator, plus the comparison
//! procedures used to judge it.

mod baselines;
mod config;
mod search;

use std::fs;
use std::path::Path;

use crate::error::Result;

pub use baselines::{
    autotune, nas_then_hw, run_seeds, soft_search, sweep_csv, sweep_lambda, with_pool, AutotuneReport, AutotuneStep,
    Control, SweepRow, AUTOTUNE_CAP,
};
pub use config::{ArchEncoding, SearchConfig, SearchMode};
pub use search::{
    check_constraints, describe_arch, extract_solution, run_search, Extracted, RunOutput, SearchState, Solution,
    StepOutcome, Trajectory, TrajectoryRow,
};

pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const SOLUTION_FILE: &str = "solution.json";

/// Writes `trajectory.csv` and `solution.json` into `dir`, creating it.
pub fn write_run(dir: &Path, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(TRAJECTORY_FILE), out.trajectory.to_csv())?;
    let mut solution = out.solution.clone();
    solution.trajectory_path = Some(TRAJECTORY_FILE.to_string());
    fs::write(dir.join(SOLUTION_FILE), solution.to_json() + "\n")?;
    Ok(())
}
