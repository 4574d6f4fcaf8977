//! Artifact writers. Tabular data goes out as CSV or JSON depending on the
//! run's format flag; every float is rounded to nine significant digits
//! before serialization so reruns produce byte-identical files.

use serde::Serialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use adrsim_core::model::round_sig9;

use crate::RunError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone)]
pub enum Cell {
    UInt(u64),
    Num(f64),
    Text(String),
    Bool(bool),
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::UInt(v) => v.to_string(),
            Cell::Num(v) => format!("{}", round_sig9(*v)),
            Cell::Text(v) => v.clone(),
            Cell::Bool(v) => v.to_string(),
        }
    }

    fn json(&self) -> serde_json::Value {
        match self {
            Cell::UInt(v) => serde_json::Value::from(*v),
            Cell::Num(v) => serde_json::Value::from(round_sig9(*v)),
            Cell::Text(v) => serde_json::Value::from(v.clone()),
            Cell::Bool(v) => serde_json::Value::from(*v),
        }
    }
}

/// A rectangular result table, written as `<name>.csv` or `<name>.json`.
#[derive(Debug, Clone)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn write(&self, out_dir: &Path, format: OutputFormat) -> Result<PathBuf, RunError> {
        match format {
            OutputFormat::Csv => {
                let path = out_dir.join(format!("{}.csv", self.name));
                let mut text = String::new();
                writeln!(text, "{}", self.columns.join(",")).expect("string write");
                for row in &self.rows {
                    let cells: Vec<String> = row.iter().map(Cell::csv).collect();
                    writeln!(text, "{}", cells.join(",")).expect("string write");
                }
                write_file(&path, text.as_bytes())?;
                Ok(path)
            }
            OutputFormat::Json => {
                let path = out_dir.join(format!("{}.json", self.name));
                let doc = serde_json::json!({
                    "columns": self.columns,
                    "rows": self.rows.iter()
                        .map(|row| row.iter().map(Cell::json).collect::<Vec<_>>())
                        .collect::<Vec<_>>(),
                });
                write_json(&path, &doc)?;
                Ok(path)
            }
        }
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    std::fs::write(path, bytes)
        .map_err(|e| RunError::Runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| RunError::Runtime(format!("serialization failed: {e}")))?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

/// Rounds every float in a JSON value to nine significant digits.
pub fn round_json(value: serde_json::Value) -> serde_json::Value {
    match value {
        serde_json::Value::Number(n) => {
            if let Some(f) = n.as_f64() {
                if n.is_f64() {
                    return serde_json::Value::from(round_sig9(f));
                }
            }
            serde_json::Value::Number(n)
        }
        serde_json::Value::Array(items) => {
            serde_json::Value::Array(items.into_iter().map(round_json).collect())
        }
        serde_json::Value::Object(map) => serde_json::Value::Object(
            map.into_iter().map(|(k, v)| (k, round_json(v))).collect(),
        ),
        other => other,
    }
}
