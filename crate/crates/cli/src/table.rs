//! Numeric CSV tables with a mandatory header row.

use std::path::Path;

use moe_core::{Dataset, Response, ResponseKind};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn read(path: &Path) -> CliResult<Table> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
        let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record?;
            let row = record
                .iter()
                .zip(&header)
                .map(|(field, name)| {
                    field
                        .parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| {
                            CliError::usage(format!(
                                "{}: row {}, column '{name}': '{field}' is not a finite number",
                                path.display(),
                                i + 1
                            ))
                        })
                })
                .collect::<CliResult<Vec<f64>>>()?;
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(CliError::usage(format!(
                "{} has no data rows",
                path.display()
            )));
        }
        Ok(Table { header, rows })
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Columns other than the response and the latent label, in file order.
    pub fn default_covariates(&self, response: &str) -> Vec<String> {
        self.header
            .iter()
            .filter(|h| *h != response && *h != "z_true")
            .cloned()
            .collect()
    }

    /// Column indices for `names`, reporting every missing name against the header.
    pub fn indices(&self, names: &[String]) -> CliResult<Vec<usize>> {
        let missing: Vec<&String> = names
            .iter()
            .filter(|n| self.column_index(n).is_none())
            .collect();
        if !missing.is_empty() {
            let list = missing
                .iter()
                .map(|n| format!("'{n}'"))
                .collect::<Vec<_>>()
                .join(", ");
            return Err(CliError::usage(format!(
                "missing column {list}\n  expected: {}\n  found:    {}",
                names.join(","),
                self.header.join(",")
            )));
        }
        Ok(names
            .iter()
            .map(|n| self.column_index(n).unwrap())
            .collect())
    }

    pub fn covariate_rows(&self, covariates: &[String]) -> CliResult<Vec<Vec<f64>>> {
        let idx = self.indices(covariates)?;
        Ok(self
            .rows
            .iter()
            .map(|r| idx.iter().map(|&j| r[j]).collect())
            .collect())
    }

    pub fn responses(&self, response: &str, kind: ResponseKind) -> CliResult<Vec<Response>> {
        let j = self.indices(&[response.to_string()])?[0];
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                Response::from_value(kind, r[j]).map_err(|e| {
                    CliError::usage(format!("row {}, column '{response}': {e}", i + 1))
                })
            })
            .collect()
    }

    pub fn dataset(
        &self,
        response: &str,
        covariates: &[String],
        kind: ResponseKind,
    ) -> CliResult<Dataset> {
        let x = self.covariate_rows(covariates)?;
        let y = self.responses(response, kind)?;
        Ok(Dataset::new(kind, x, y)?)
    }
}

/// Writes a header and string rows as CSV.
pub fn write_csv(
    path: &Path,
    header: &[String],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> CliResult<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))?;
    writer.write_record(header)?;
    for row in rows {
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Shortest representation that parses back to the same value.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn fmt_response(y: &Response) -> String {
    match *y {
        Response::Real(v) => fmt_f64(v),
        Response::Binary(b) => b.to_string(),
        Response::Count(c) => c.to_string(),
        Response::Category(l) => l.to_string(),
    }
}

/// Writes a dataset with header `x1..xp, y[, z_true]`.
pub fn write_dataset(path: &Path, data: &Dataset, z: Option<&[usize]>) -> CliResult<()> {
    let mut header: Vec<String> = (1..=data.p()).map(|j| format!("x{j}")).collect();
    header.push("y".into());
    if z.is_some() {
        header.push("z_true".into());
    }
    let rows = (0..data.n()).map(|i| {
        let mut row: Vec<String> = data.x(i).iter().map(|&v| fmt_f64(v)).collect();
        row.push(fmt_response(data.y(i)));
        if let Some(z) = z {
            row.push(z[i].to_string());
        }
        row
    });
    write_csv(path, &header, rows)
}
