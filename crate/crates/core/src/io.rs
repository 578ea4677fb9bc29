//! File formats: CSV tables with a header row, JSON sidecars, content digests.
//!
//! Floats are written in Rust's shortest round-trip form, so every CSV
//! round-trip is bit-exact.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::calibrate::CalibStep;
use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// Hex SHA-256 of a file's bytes.
pub fn digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Creates `path`, refusing to replace an existing file.
fn create_new(path: &Path) -> Result<std::fs::File> {
    OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(path)
        .map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::ManifestMismatch(format!("refusing to overwrite {}", path.display()))
            } else {
                e.into()
            }
        })
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut f = create_new(path)?;
    f.write_all(serde_json::to_string_pretty(value)?.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::ManifestMismatch(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Appends one JSON object as a line.
pub fn append_json_line(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(serde_json::to_string(value)?.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Writes `data` with one named column per matrix column.
pub fn write_matrix_csv(path: &Path, headers: &[String], data: &DMatrix<f64>) -> Result<()> {
    if headers.len() != data.ncols() {
        return Err(Error::dim("CSV header", data.ncols(), headers.len()));
    }
    let mut w = csv::Writer::from_writer(create_new(path)?);
    w.write_record(headers)?;
    for i in 0..data.nrows() {
        w.write_record(data.row(i).iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a numeric table; returns the header and the values.
pub fn read_matrix_csv(path: &Path) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut r = csv::Reader::from_path(path)?;
    let headers: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    let mut values = Vec::new();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec?;
        for field in rec.iter() {
            values.push(field.trim().parse::<f64>().map_err(|e| {
                Error::Config(format!(
                    "{}: row {}: `{field}`: {e}",
                    path.display(),
                    rows + 1
                ))
            })?);
        }
        rows += 1;
    }
    Ok((
        headers.clone(),
        DMatrix::from_row_slice(rows, headers.len(), &values),
    ))
}

const FLAG_COLUMN: &str = "contaminated";

/// Observations plus a 0/1 contamination column.
pub fn write_dataset_csv(path: &Path, headers: &[String], data: &Dataset) -> Result<()> {
    let mut cols = headers.to_vec();
    cols.push(FLAG_COLUMN.into());
    let flags = DMatrix::from_fn(data.len(), 1, |i, _| {
        f64::from(u8::from(data.contaminated[i]))
    });
    let mut table = data.values.clone().resize_horizontally(data.dim() + 1, 0.0);
    table.set_column(data.dim(), &flags.column(0));
    write_matrix_csv(path, &cols, &table)
}

/// Inverse of [`write_dataset_csv`]; a file without the flag column reads as clean.
pub fn read_dataset_csv(path: &Path) -> Result<(Vec<String>, Dataset)> {
    let (mut headers, table) = read_matrix_csv(path)?;
    if headers.last().map(String::as_str) == Some(FLAG_COLUMN) {
        headers.pop();
        let d = headers.len();
        let flags = table.column(d).iter().map(|v| *v != 0.0).collect();
        let values = table.columns(0, d).into_owned();
        Ok((headers, Dataset::with_flags(values, flags, None)?))
    } else {
        Ok((headers, Dataset::new(table)))
    }
}

/// Calibration trace as `t, beta, coverage, ess, refreshed`; missing ESS is empty.
pub fn write_trace_csv(path: &Path, trace: &[CalibStep]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create_new(path)?);
    w.write_record(["t", "beta", "coverage", "ess", "refreshed"])?;
    for s in trace {
        w.write_record([
            s.t.to_string(),
            s.beta.to_string(),
            s.coverage.to_string(),
            s.ess.map_or_else(String::new, |e| e.to_string()),
            s.refreshed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One-row table of named scalars.
pub fn write_scalars_csv(path: &Path, fields: &[(String, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create_new(path)?);
    w.write_record(fields.iter().map(|(k, _)| k.as_str()))?;
    w.write_record(fields.iter().map(|(_, v)| v.to_string()))?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn matrix_csv_round_trip_is_bit_exact(rows in 0usize..6, cols in 1usize..4, vals in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO, 24)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.csv");
            let m = DMatrix::from_fn(rows, cols, |i, j| vals[i * cols + j]);
            let headers: Vec<String> = (0..cols).map(|j| format!("c{j}")).collect();
            write_matrix_csv(&path, &headers, &m).unwrap();
            let (h, back) = read_matrix_csv(&path).unwrap();
            prop_assert_eq!(h, headers);
            prop_assert_eq!(back.shape(), m.shape());
            for (a, b) in back.iter().zip(m.iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn dataset_flags_survive() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let data = Dataset::with_flags(
            DMatrix::from_row_slice(3, 1, &[1.5, -2.0, 1e300]),
            vec![false, true, false],
            None,
        )
        .unwrap();
        write_dataset_csv(&path, &["x".into()], &data).unwrap();
        let (h, back) = read_dataset_csv(&path).unwrap();
        assert_eq!(h, vec!["x".to_string()]);
        assert_eq!(back, data);
    }

    #[test]
    fn refuses_to_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        write_json(&path, &1).unwrap();
        assert!(matches!(
            write_json(&path, &2),
            Err(Error::ManifestMismatch(_))
        ));
        assert_eq!(read_json::<i32>(&path).unwrap(), 1);
    }
}
