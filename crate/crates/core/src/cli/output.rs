//! CSV and JSON writers. Floats are written as `{:.16e}` (17 significant
//! digits) so identical runs produce identical bytes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::dynamics::Record;

use super::config::Format;
use super::run::RunOutcome;
use super::CliError;

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn trajectory_header(n: usize) -> Vec<String> {
    let mut h = vec!["step".to_string()];
    h.extend((0..n).map(|i| format!("pi_{i}")));
    h.extend(["population_loss", "nash_residual", "kl_to_ref", "grad_norm"].map(String::from));
    h
}

pub fn write_trajectory_csv(path: &Path, records: &[Record]) -> Result<(), CliError> {
    let n = records.first().map_or(0, |r| r.policy.len());
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(trajectory_header(n))?;
    for r in records {
        let mut row = vec![r.step.to_string()];
        row.extend(r.policy.probs().iter().map(|p| fmt_f64(*p)));
        row.extend([r.population_loss, r.nash_residual, r.kl_to_ref, r.grad_norm].map(fmt_f64));
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Writes `trajectory.csv` and/or `summary.json` into `dir`.
pub fn write_run(dir: &Path, formats: &[Format], outcome: &RunOutcome) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    if formats.contains(&Format::Csv) {
        write_trajectory_csv(&dir.join("trajectory.csv"), &outcome.trajectory.records)?;
    }
    if formats.contains(&Format::Json) {
        write_json(&dir.join("summary.json"), &outcome.summary)?;
    }
    Ok(())
}
