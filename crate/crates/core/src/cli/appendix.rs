//! Trajectories of the IPO family and Nash-MD-PG on the printed three-action
//! cyclic game (`τ = 0.1`, uniform reference) with solver fixed points for
//! overlay.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{run_dynamics, AlgorithmId, DynamicsConfig};
use crate::game::{GameSpec, Policy};
use crate::games::three_action_example;
use crate::solvers::{best_response, fixed_point_defect, solve_ipo_md_fixed_point, SolverOptions};

use super::output::{fmt_f64, write_json, write_trajectory_csv};
use super::{CliError, ARTIFACT_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppendixDOptions {
    pub betas: Vec<f64>,
    pub steps: usize,
    pub learning_rate: f64,
    pub record_every: usize,
    /// TV distance to the matched fixed point counted as converged.
    pub tolerance: f64,
    #[serde(skip)]
    pub workers: Option<usize>,
}

impl Default for AppendixDOptions {
    fn default() -> Self {
        Self {
            betas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            steps: 100_000,
            learning_rate: 0.1,
            record_every: 100,
            tolerance: 1e-4,
            workers: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppendixDRun {
    pub name: String,
    pub algorithm: String,
    pub beta: Option<f64>,
    pub file: String,
    pub endpoint: Vec<f64>,
    pub matched_fixed_point: Vec<f64>,
    pub tv_to_matched: f64,
    /// Fixed-point defect of the endpoint under the printed matrix.
    pub defect_printed: f64,
    /// Fixed-point defect under the game the algorithm responds to.
    pub defect_effective: f64,
    pub steps_completed: usize,
    pub converged: bool,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointRow {
    pub beta: f64,
    /// `printed` (the matrix as given) or `exchangeable` (its `(P + 1 − Pᵀ)/2` part).
    pub game: String,
    pub policy: Vec<f64>,
    pub residual: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppendixDReport {
    pub artifact_version: String,
    pub options: AppendixDOptions,
    /// Best response to the uniform policy under the printed matrix.
    pub best_response_to_uniform: Vec<f64>,
    pub fixed_points: Vec<FixedPointRow>,
    pub runs: Vec<AppendixDRun>,
}

fn algorithms(betas: &[f64]) -> Vec<(String, AlgorithmId)> {
    let mut out = vec![
        ("offline_ipo".to_string(), AlgorithmId::OfflineIpo(Policy::uniform(3))),
        ("online_ipo".to_string(), AlgorithmId::OnlineIpo),
    ];
    for &b in betas {
        out.push((format!("ipo_md_beta{b}"), AlgorithmId::IpoMd(b)));
    }
    for &b in betas {
        out.push((format!("nash_md_pg_beta{b}"), AlgorithmId::NashMdPg(b)));
    }
    out
}

/// The game an algorithm's dynamics actually respond to.
fn effective_game(algorithm: &AlgorithmId, spec: &GameSpec) -> GameSpec {
    match algorithm {
        AlgorithmId::NashMdPg(_) | AlgorithmId::SelfPlay | AlgorithmId::RlhfPg(_) => spec.clone(),
        _ => spec.exchangeable(),
    }
}

fn one_run(
    name: &str,
    algorithm: &AlgorithmId,
    opts: &AppendixDOptions,
    out: Option<&Path>,
) -> Result<AppendixDRun, CliError> {
    let spec = three_action_example();
    let config = DynamicsConfig {
        record_every: opts.record_every,
        ..DynamicsConfig::new(algorithm.clone(), spec.clone(), opts.learning_rate, opts.steps)
    };
    let trajectory = run_dynamics(&config)?;
    let file = format!("{name}.csv");
    if let Some(dir) = out {
        write_trajectory_csv(&dir.join(&file), &trajectory.records)?;
    }
    let last = trajectory.last();
    let beta = algorithm.beta().unwrap_or(0.0);
    let (defect_printed, defect_effective) = match algorithm {
        AlgorithmId::OfflineIpo(mu) => {
            let gap = |g: &GameSpec| -> Result<f64, CliError> {
                let br = best_response(g, mu)?;
                Ok(crate::math::sup_norm(&crate::math::sub(
                    last.policy.probs(),
                    br.probs(),
                )))
            };
            (gap(&spec)?, gap(&spec.exchangeable())?)
        }
        _ => (
            fixed_point_defect(&spec, beta, &last.policy)?,
            fixed_point_defect(&effective_game(algorithm, &spec), beta, &last.policy)?,
        ),
    };
    Ok(AppendixDRun {
        name: name.to_string(),
        algorithm: algorithm.name().to_string(),
        beta: algorithm.beta(),
        file,
        endpoint: last.policy.probs().to_vec(),
        matched_fixed_point: trajectory.matched_fixed_point.probs().to_vec(),
        tv_to_matched: last.nash_residual,
        defect_printed,
        defect_effective,
        steps_completed: last.step,
        converged: !trajectory.diverged && last.nash_residual <= opts.tolerance,
        diverged: trajectory.diverged,
    })
}

/// Runs offline IPO (uniform sampler), online IPO, IPO-MD(β) and
/// Nash-MD-PG(β) for each β in `opts.betas`. With `out`, writes one
/// trajectory CSV per run, `fixed_points.csv` and `summary.json`.
pub fn reproduce_appendix_d(opts: &AppendixDOptions, out: Option<&Path>) -> Result<AppendixDReport, CliError> {
    if let Some(b) = opts.betas.iter().find(|b| !(0.0..=1.0).contains(*b)) {
        return Err(CliError::Invalid {
            field: "betas".into(),
            message: format!("must lie in [0, 1], got {b}"),
        });
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
    }
    let spec = three_action_example();
    let solver = SolverOptions::default();
    let mut fixed_points = Vec::new();
    for &beta in &opts.betas {
        for (label, game) in [("printed", spec.clone()), ("exchangeable", spec.exchangeable())] {
            let fp = solve_ipo_md_fixed_point(&game, beta, &solver)?;
            fixed_points.push(FixedPointRow {
                beta,
                game: label.to_string(),
                policy: fp.policy.probs().to_vec(),
                residual: fp.residual,
                converged: fp.converged,
            });
        }
    }
    let runs_spec = algorithms(&opts.betas);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Output(e.to_string()))?;
    let runs: Result<Vec<AppendixDRun>, CliError> = pool.install(|| {
        runs_spec
            .par_iter()
            .map(|(name, alg)| one_run(name, alg, opts, out))
            .collect()
    });
    let report = AppendixDReport {
        artifact_version: ARTIFACT_VERSION.to_string(),
        options: opts.clone(),
        best_response_to_uniform: best_response(&spec, &Policy::uniform(3))?.probs().to_vec(),
        fixed_points,
        runs: runs?,
    };
    if let Some(dir) = out {
        let mut w = csv::Writer::from_path(dir.join("fixed_points.csv"))?;
        w.write_record(["beta", "game", "pi_0", "pi_1", "pi_2", "residual", "converged"])?;
        for row in &report.fixed_points {
            let mut rec = vec![fmt_f64(row.beta), row.game.clone()];
            rec.extend(row.policy.iter().map(|p| fmt_f64(*p)));
            rec.push(fmt_f64(row.residual));
            rec.push(row.converged.to_string());
            w.write_record(rec)?;
        }
        w.flush()?;
        write_json(&dir.join("summary.json"), &report)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_bundle_writes_files() {
        let dir = tempfile::tempdir().unwrap();
        let opts = AppendixDOptions {
            betas: vec![0.0, 1.0],
            steps: 200,
            record_every: 50,
            ..AppendixDOptions::default()
        };
        let r = reproduce_appendix_d(&opts, Some(dir.path())).unwrap();
        assert_eq!(r.runs.len(), 6);
        assert_eq!(r.fixed_points.len(), 4);
        for run in &r.runs {
            assert!(dir.path().join(&run.file).exists());
            assert!(!run.diverged);
        }
        assert!(dir.path().join("fixed_points.csv").exists());
        let br = &r.best_response_to_uniform;
        assert!((br[0] - 0.2945).abs() < 1e-3 && (br[2] - 0.4110).abs() < 1e-3);
        assert!(reproduce_appendix_d(
            &AppendixDOptions {
                betas: vec![1.5],
                ..opts
            },
            None
        )
        .is_err());
    }
}
