//! Validation history as CSV.
//!
//! One row per validation with the columns of [`HEADER`]. Values that do not
//! apply to the objective (γ and `R_max` of a Lagrangian run) are written as
//! `NaN`.

use std::path::Path;

use mechnet::training::ValidationRow;

use crate::CliError;

pub const HEADER: [&str; 7] = ["iteration", "revenue", "regret_mean", "ratio", "gamma", "r_max", "wall_ms"];

pub fn write_metrics(path: &Path, history: &[ValidationRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::csv(path, e))?;
    w.write_record(HEADER).map_err(|e| CliError::csv(path, e))?;
    for r in history {
        let record = [
            r.iteration.to_string(),
            r.revenue.to_string(),
            r.regret_mean.to_string(),
            r.ratio.to_string(),
            r.gamma.to_string(),
            r.r_max.to_string(),
            r.wall_ms.to_string(),
        ];
        w.write_record(&record).map_err(|e| CliError::csv(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Reads a metrics file, rejecting any deviation from the schema.
pub fn read_metrics(path: &Path) -> Result<Vec<ValidationRow>, CliError> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(|e| CliError::csv(path, e))?;
    let header = r.headers().map_err(|e| CliError::csv(path, e))?.clone();
    if header.iter().ne(HEADER) {
        return Err(CliError::Format(format!("{}: unexpected header {:?}", path.display(), header)));
    }
    let bad = |line: usize, col: &str| CliError::Format(format!("{}: row {line}: bad {col}", path.display()));
    let mut rows = Vec::new();
    for (k, record) in r.records().enumerate() {
        let record = record.map_err(|e| CliError::csv(path, e))?;
        let float = |c: usize| record[c].parse::<f64>().map_err(|_| bad(k + 1, HEADER[c]));
        rows.push(ValidationRow {
            iteration: record[0].parse().map_err(|_| bad(k + 1, HEADER[0]))?,
            revenue: float(1)?,
            regret_mean: float(2)?,
            ratio: float(3)?,
            gamma: float(4)?,
            r_max: float(5)?,
            wall_ms: record[6].parse().map_err(|_| bad(k + 1, HEADER[6]))?,
        });
    }
    Ok(rows)
}
