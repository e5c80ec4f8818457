//! CSV ingestion and output helpers.

use crate::config::ColumnRoles;
use crate::CliError;
use copiv_core::data::Dataset;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::path::Path;

/// Read a comma-separated file with a header row into a dataset.
/// Empty or `NA` cells and unparsable numbers are rejected with their
/// line number.
pub fn read_dataset(path: &Path, roles: &ColumnRoles) -> Result<Dataset, CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| CliError::Input(format!("cannot open {}: {e}", path.display())))?;
    let headers = rdr.headers().map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?.clone();
    let find = |name: &str| -> Result<usize, CliError> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| CliError::Input(format!("column '{name}' not found in {}", path.display())))
    };
    let yi = find(&roles.y)?;
    let di = find(&roles.d)?;
    let zi = find(&roles.z)?;
    let xi: Vec<usize> = roles.covariates.iter().map(|c| find(c)).collect::<Result<_, _>>()?;
    let (mut y, mut d, mut z) = (vec![], vec![], vec![]);
    let mut x = vec![vec![]; xi.len()];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            CliError::Input(format!("{} line {line}: {e}", path.display()))
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let cell = |j: usize, name: &str| -> Result<f64, CliError> {
            let raw = rec.get(j).unwrap_or("").trim();
            if raw.is_empty() || raw.eq_ignore_ascii_case("na") || raw.eq_ignore_ascii_case("nan") {
                return Err(CliError::Input(format!("line {line}: missing value in column '{name}'")));
            }
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| CliError::Input(format!("line {line}: cannot parse '{raw}' in column '{name}'")))
        };
        y.push(cell(yi, &roles.y)?);
        d.push(cell(di, &roles.d)?);
        let zv = cell(zi, &roles.z)?;
        if zv != 0.0 && zv != 1.0 {
            return Err(CliError::Config(format!(
                "line {line}: instrument '{}' must be binary (0/1); found {zv}",
                roles.z
            )));
        }
        z.push(zv);
        for (k, &j) in xi.iter().enumerate() {
            x[k].push(cell(j, &roles.covariates[k])?);
        }
    }
    if y.is_empty() {
        return Err(CliError::Input(format!("{} has no data rows", path.display())));
    }
    Ok(Dataset::with_names(y, d, z, x, roles.covariates.clone())?)
}

/// Write a dataset with columns `y, d, z` and its covariates.
pub fn write_dataset(path: &Path, data: &Dataset) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["y".to_string(), "d".into(), "z".into()];
    header.extend(data.x_names.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..data.n() {
        let mut row = vec![data.y[i].to_string(), data.d[i].to_string(), data.z[i].to_string()];
        row.extend(data.x.iter().map(|c| c[i].to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Write serializable rows as CSV with a header.
pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Output(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Output(e.to_string())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String, CliError> {
    Ok(sha256_hex(&std::fs::read(path)?))
}
