//! Library entry points behind `run`, `solve` and `sweep`.

use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{run_dynamics, Trajectory};
use crate::game::geometric_mixture;
use crate::solvers::{
    exploitability, solve_ipo_md_fixed_point, solve_regularised_nash, verify_modified_tau, SolverOptions,
};

use super::config::{ExperimentConfig, SweepSpec};
use super::output::{fmt_f64, write_run};
use super::{CliError, ARTIFACT_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub artifact_version: String,
    pub algorithm: String,
    pub final_policy: Vec<f64>,
    /// Total-variation distance from the final policy to the matched fixed point.
    pub final_residual: f64,
    pub final_loss: f64,
    pub final_grad_norm: f64,
    pub final_kl_to_ref: f64,
    pub steps_completed: usize,
    pub converged: bool,
    pub diverged: bool,
    pub matched_fixed_point: Vec<f64>,
    pub wall_time_s: f64,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub trajectory: Trajectory,
    pub summary: RunSummary,
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutcome, CliError> {
    let dynamics = config.dynamics()?;
    let start = Instant::now();
    let trajectory = run_dynamics(&dynamics)?;
    let wall_time_s = start.elapsed().as_secs_f64();
    let last = trajectory.last();
    let summary = RunSummary {
        artifact_version: ARTIFACT_VERSION.to_string(),
        algorithm: dynamics.algorithm.name().to_string(),
        final_policy: last.policy.probs().to_vec(),
        final_residual: last.nash_residual,
        final_loss: last.population_loss,
        final_grad_norm: last.grad_norm,
        final_kl_to_ref: last.kl_to_ref,
        steps_completed: last.step,
        converged: !trajectory.diverged && last.nash_residual <= config.run.tolerance,
        diverged: trajectory.diverged,
        matched_fixed_point: trajectory.matched_fixed_point.probs().to_vec(),
        wall_time_s,
        config: config.clone(),
    };
    info!(
        "{}: {} steps, residual {:e}, {:.3}s",
        summary.algorithm, summary.steps_completed, summary.final_residual, wall_time_s
    );
    Ok(RunOutcome { trajectory, summary })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSolve {
    pub beta: f64,
    pub policy: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `mixture(π*_β, π_ref, β)`.
    pub mixture: Vec<f64>,
    /// Fixed-point defect of the mixture in the game with `τ/(1 − β)`; absent for `β = 1`.
    pub modified_tau_defect: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub artifact_version: String,
    pub tau: f64,
    pub nash_policy: Vec<f64>,
    pub residual: f64,
    pub exploitability: f64,
    pub iterations: usize,
    pub converged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mixture_fixed_point: Option<MixtureSolve>,
}

/// Regularised Nash equilibrium of the configured game, plus the mixture
/// fixed point when `algo.beta` is set. `tolerance` overrides the solver's.
pub fn solve(config: &ExperimentConfig, tolerance: Option<f64>) -> Result<SolveReport, CliError> {
    let spec = config.game_spec()?;
    let mut opts = SolverOptions::default();
    if let Some(t) = tolerance {
        opts = opts.with_tol(t);
    }
    let nash = solve_regularised_nash(&spec, &opts)?;
    let mixture_fixed_point = match config.algo.beta {
        None => None,
        Some(beta) => {
            let fp = solve_ipo_md_fixed_point(&spec, beta, &opts)?;
            let mixture = geometric_mixture(&fp.policy, &spec.ref_policy, beta)?;
            let modified_tau_defect = if beta < 1.0 {
                Some(verify_modified_tau(&spec, beta, &fp.policy)?)
            } else {
                None
            };
            Some(MixtureSolve {
                beta,
                policy: fp.policy.probs().to_vec(),
                residual: fp.residual,
                iterations: fp.iterations,
                converged: fp.converged,
                mixture: mixture.probs().to_vec(),
                modified_tau_defect,
            })
        }
    };
    Ok(SolveReport {
        artifact_version: ARTIFACT_VERSION.to_string(),
        tau: spec.tau,
        exploitability: exploitability(&spec, &nash.policy)?,
        nash_policy: nash.policy.probs().to_vec(),
        residual: nash.residual,
        iterations: nash.iterations,
        converged: nash.converged,
        mixture_fixed_point,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell: usize,
    pub tau: f64,
    pub beta: Option<f64>,
    pub learning_rate: f64,
    pub seed: u64,
    /// `ok`, `diverged`, or `error: <message>`.
    pub status: String,
    /// Norm of the expected update at the final policy.
    pub final_residual: f64,
    pub final_loss: f64,
    pub converged: bool,
    pub tv_to_matched_fixed_point: f64,
}

pub const AGGREGATE_HEADER: [&str; 10] = [
    "cell",
    "tau",
    "beta",
    "learning_rate",
    "seed",
    "status",
    "final_residual",
    "final_loss",
    "converged",
    "tv_to_matched_fixed_point",
];

fn run_cell(index: usize, config: &ExperimentConfig, dir: &Path) -> SweepRow {
    let mut row = SweepRow {
        cell: index,
        tau: config.game.tau,
        beta: config.algo.beta,
        learning_rate: config.algo.learning_rate,
        seed: config.run.seed,
        status: String::new(),
        final_residual: f64::NAN,
        final_loss: f64::NAN,
        converged: false,
        tv_to_matched_fixed_point: f64::NAN,
    };
    let outcome = config
        .validate()
        .and_then(|_| run_experiment(config))
        .and_then(|o| write_run(dir, &config.output.formats, &o).map(|_| o));
    match outcome {
        Ok(o) => {
            let s = &o.summary;
            row.status = if s.diverged { "diverged" } else { "ok" }.to_string();
            row.final_residual = s.final_grad_norm;
            row.final_loss = s.final_loss;
            row.converged = s.converged;
            row.tv_to_matched_fixed_point = s.final_residual;
        }
        Err(e) => {
            warn!("sweep cell {index} failed: {e}");
            row.status = format!("error: {e}");
        }
    }
    row
}

/// Runs every cell on a pool of `workers` threads (default: all cores).
/// Cell `i` writes into `out/cell_<i>`; `out/aggregate.csv` lists the cells
/// in index order. Failed cells are recorded, not fatal.
pub fn run_sweep(spec: &SweepSpec, out: &Path, workers: Option<usize>) -> Result<Vec<SweepRow>, CliError> {
    if workers == Some(0) {
        return Err(CliError::Invalid {
            field: "workers".into(),
            message: "must be at least 1".into(),
        });
    }
    std::fs::create_dir_all(out)?;
    let cells = spec.cells();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Output(e.to_string()))?;
    let rows: Vec<SweepRow> = pool.install(|| {
        cells
            .par_iter()
            .enumerate()
            .map(|(i, cell)| {
                let mut config = spec.cell_config(cell);
                let dir = out.join(format!("cell_{i:05}"));
                config.output.dir = dir.clone();
                run_cell(i, &config, &dir)
            })
            .collect()
    });
    write_aggregate(&out.join("aggregate.csv"), &rows)?;
    Ok(rows)
}

pub fn write_aggregate(path: &Path, rows: &[SweepRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(AGGREGATE_HEADER)?;
    for r in rows {
        w.write_record([
            r.cell.to_string(),
            fmt_f64(r.tau),
            r.beta.map(fmt_f64).unwrap_or_default(),
            fmt_f64(r.learning_rate),
            r.seed.to_string(),
            r.status.clone(),
            fmt_f64(r.final_residual),
            fmt_f64(r.final_loss),
            r.converged.to_string(),
            fmt_f64(r.tv_to_matched_fixed_point),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_action(p: &str, extra: &str) -> ExperimentConfig {
        ExperimentConfig::from_toml_str(&format!(
            "[game]\npreference_matrix = [[0.5, {p}], [{q}, 0.5]]\ntau = 1.0\n[algo]\n{extra}learning_rate = 0.5\n[run]\nsteps = 4000\nrecord_every = 1000\n",
            q = 1.0 - p.parse::<f64>().unwrap()
        ))
        .unwrap()
    }

    #[test]
    fn solve_two_action_closed_form() {
        let c = two_action("0.9", "name = \"online_ipo\"\n");
        let r = solve(&c, None).unwrap();
        assert!((r.nash_policy[0] - 0.598687660112452).abs() <= 1e-9);
        assert!(r.converged && r.exploitability <= 1e-10);
        assert!(r.mixture_fixed_point.is_none());
        let c = two_action("0.9", "name = \"ipo_md\"\nbeta = 0.5\n");
        let m = solve(&c, None).unwrap().mixture_fixed_point.unwrap();
        assert!(m.converged && m.modified_tau_defect.unwrap() <= 1e-8);
    }

    #[test]
    fn flat_preferences_stay_at_reference() {
        let c = two_action("0.5", "name = \"online_ipo\"\n");
        let o = run_experiment(&c).unwrap();
        for r in &o.trajectory.records {
            assert_eq!(r.policy.probs(), &[0.5, 0.5]);
        }
        assert!(o.summary.converged);
    }

    #[test]
    fn summary_config_round_trips() {
        let c = two_action("0.7", "name = \"nash_md_pg\"\nbeta = 0.25\n");
        let o = run_experiment(&c).unwrap();
        let json = serde_json::to_string(&o.summary).unwrap();
        let back: RunSummary = serde_json::from_str(&json).unwrap();
        assert_eq!(back.config, c);
        assert!(o.summary.converged, "{}", o.summary.final_residual);
    }
}
