//! Comma-separated datasets: a `timestamp` column, an optional target `y`
//! and one `m:<label>` column per member.

use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use thiserror::Error;

pub const MEMBER_PREFIX: &str = "m:";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: line {line}: {message}")]
    Csv { path: PathBuf, line: u64, message: String },
    #[error("{path}: file is empty or has no header")]
    NoHeader { path: PathBuf },
    #[error("{path}: missing required column {column:?}")]
    MissingColumn { path: PathBuf, column: String },
    #[error("{path}: unexpected column {column:?} (expected timestamp, y and m:<label> columns)")]
    UnknownColumn { path: PathBuf, column: String },
    #[error("{path}: column {column:?} appears twice")]
    DuplicateColumn { path: PathBuf, column: String },
    #[error("{path}: no member columns (m:<label>)")]
    NoMembers { path: PathBuf },
    #[error("{path}: no data rows")]
    NoRows { path: PathBuf },
    #[error("{path}: line {line}, column {column:?}: {message}")]
    Cell {
        path: PathBuf,
        line: u64,
        column: String,
        message: String,
    },
    #[error("{path}: line {line}: timestamp {next:?} does not follow {prev:?}; rows must be strictly increasing")]
    Unordered {
        path: PathBuf,
        line: u64,
        prev: String,
        next: String,
    },
}

/// Whether the `y` column must be present.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Required,
    Optional,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub timestamps: Vec<String>,
    pub targets: Option<Vec<f64>>,
    pub members: Vec<String>,
    /// row-major `rows x members`
    pub predictions: Vec<f64>,
}

impl Dataset {
    pub fn rows(&self) -> usize {
        self.timestamps.len()
    }

    pub fn prediction_row(&self, t: usize) -> &[f64] {
        let k = self.members.len();
        &self.predictions[t * k..(t + 1) * k]
    }
}

/// Dates, local date-times and RFC 3339 date-times.
pub fn is_iso8601(s: &str) -> bool {
    DateTime::parse_from_rfc3339(s).is_ok()
        || NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S%.f").is_ok()
        || NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M").is_ok()
        || NaiveDate::parse_from_str(s, "%Y-%m-%d").is_ok()
}

fn reader(path: &Path) -> Result<csv::Reader<File>, DatasetError> {
    let file = File::open(path).map_err(|source| DatasetError::Io {
        path: path.to_owned(),
        source,
    })?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn csv_error(path: &Path, err: csv::Error) -> DatasetError {
    let line = err.position().map(|p| p.line()).unwrap_or(0);
    let message = err.to_string();
    match err.into_kind() {
        csv::ErrorKind::Io(source) => DatasetError::Io {
            path: path.to_owned(),
            source,
        },
        _ => DatasetError::Csv {
            path: path.to_owned(),
            line,
            message,
        },
    }
}

fn parse_number(path: &Path, line: u64, column: &str, raw: &str) -> Result<f64, DatasetError> {
    let cell = |message: String| DatasetError::Cell {
        path: path.to_owned(),
        line,
        column: column.to_owned(),
        message,
    };
    if raw.is_empty() {
        return Err(cell("missing value".into()));
    }
    match raw.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(_) => Err(cell(format!("{raw:?} is not a finite number"))),
        Err(_) => Err(cell(format!("{raw:?} is not a number"))),
    }
}

/// Reads and validates a dataset. Line numbers in errors count the header
/// as line 1.
pub fn read_dataset(path: &Path, target: Target) -> Result<Dataset, DatasetError> {
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.is_empty() || header.iter().all(str::is_empty) {
        return Err(DatasetError::NoHeader { path: path.to_owned() });
    }
    let mut ts_col = None;
    let mut y_col = None;
    let mut member_cols = Vec::new();
    let mut members = Vec::new();
    for (i, name) in header.iter().enumerate() {
        if header.iter().take(i).any(|prev| prev == name) {
            return Err(DatasetError::DuplicateColumn {
                path: path.to_owned(),
                column: name.to_owned(),
            });
        }
        match name {
            "timestamp" => ts_col = Some(i),
            "y" => y_col = Some(i),
            _ => match name.strip_prefix(MEMBER_PREFIX) {
                Some(label) if !label.is_empty() => {
                    member_cols.push(i);
                    members.push(label.to_owned());
                }
                _ => {
                    return Err(DatasetError::UnknownColumn {
                        path: path.to_owned(),
                        column: name.to_owned(),
                    })
                }
            },
        }
    }
    let missing = |column: &str| DatasetError::MissingColumn {
        path: path.to_owned(),
        column: column.to_owned(),
    };
    let ts_col = ts_col.ok_or_else(|| missing("timestamp"))?;
    if target == Target::Required && y_col.is_none() {
        return Err(missing("y"));
    }
    if members.is_empty() {
        return Err(DatasetError::NoMembers { path: path.to_owned() });
    }

    let mut data = Dataset {
        timestamps: Vec::new(),
        targets: y_col.map(|_| Vec::new()),
        members,
        predictions: Vec::new(),
    };
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let ts = &record[ts_col];
        if !is_iso8601(ts) {
            return Err(DatasetError::Cell {
                path: path.to_owned(),
                line,
                column: "timestamp".into(),
                message: format!("{ts:?} is not an ISO-8601 date or date-time"),
            });
        }
        if let Some(prev) = data.timestamps.last() {
            if ts <= prev.as_str() {
                return Err(DatasetError::Unordered {
                    path: path.to_owned(),
                    line,
                    prev: prev.clone(),
                    next: ts.to_owned(),
                });
            }
        }
        data.timestamps.push(ts.to_owned());
        if let (Some(col), Some(ys)) = (y_col, data.targets.as_mut()) {
            ys.push(parse_number(path, line, "y", &record[col])?);
        }
        for (&col, label) in member_cols.iter().zip(&data.members) {
            let name = format!("{MEMBER_PREFIX}{label}");
            data.predictions.push(parse_number(path, line, &name, &record[col])?);
        }
    }
    if data.timestamps.is_empty() {
        return Err(DatasetError::NoRows { path: path.to_owned() });
    }
    Ok(data)
}

/// A `timestamp` column and the named numeric columns of any CSV file.
pub fn read_columns(path: &Path, columns: &[&str]) -> Result<(Vec<String>, Vec<Vec<f64>>), DatasetError> {
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let find = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| DatasetError::MissingColumn {
            path: path.to_owned(),
            column: name.to_owned(),
        })
    };
    let ts_col = find("timestamp")?;
    let idx = columns.iter().map(|c| find(c)).collect::<Result<Vec<_>, _>>()?;
    let mut timestamps = Vec::new();
    let mut values = vec![Vec::new(); columns.len()];
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        timestamps.push(record[ts_col].to_owned());
        for ((&col, name), out) in idx.iter().zip(columns).zip(values.iter_mut()) {
            out.push(parse_number(path, line, name, &record[col])?);
        }
    }
    if timestamps.is_empty() {
        return Err(DatasetError::NoRows { path: path.to_owned() });
    }
    Ok((timestamps, values))
}

/// Writes a dataset with `y` and member columns, values in shortest
/// round-trip form.
pub fn write_dataset<W: Write>(
    out: W,
    timestamps: &[String],
    targets: &[f64],
    members: &[String],
    predictions: &[f64],
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["timestamp".to_owned(), "y".to_owned()];
    header.extend(members.iter().map(|m| format!("{MEMBER_PREFIX}{m}")));
    w.write_record(&header)?;
    let k = members.len();
    for (t, ts) in timestamps.iter().enumerate() {
        let mut row = vec![ts.clone(), targets[t].to_string()];
        row.extend(predictions[t * k..(t + 1) * k].iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
