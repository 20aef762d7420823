//! CSV series and the per-run JSON manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Column {
    pub name: String,
    /// Units and axis meaning.
    pub meaning: String,
}

/// One named table, written as one CSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub description: String,
    pub columns: Vec<Column>,
    pub rows: Vec<Vec<String>>,
}

impl Series {
    pub fn new(name: impl Into<String>, description: impl Into<String>, columns: &[(&str, &str)]) -> Self {
        Self {
            name: name.into(),
            description: description.into(),
            columns: columns.iter().map(|(n, m)| Column { name: n.to_string(), meaning: m.to_string() }).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn file_name(&self) -> String {
        format!("{}.csv", self.name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.iter().map(|c| c.name.as_str()).collect::<Vec<_>>().join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Cell text for a number: the shortest form that parses back exactly,
/// switching to exponent notation for very small or large magnitudes.
pub fn num(x: f64) -> String {
    format!("{x:?}")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesEntry {
    pub name: String,
    pub file: String,
    pub description: String,
    pub rows: usize,
    pub columns: Vec<Column>,
}

/// Manifest written next to the series of one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRecord {
    pub experiment: String,
    pub version: String,
    pub timestamp: String,
    pub config: BTreeMap<String, String>,
    pub series: Vec<SeriesEntry>,
}

/// A finished run held in memory before writing.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub config: ExperimentConfig,
    pub series: Vec<Series>,
}

impl RunOutput {
    pub fn record(&self) -> ResultRecord {
        ResultRecord {
            experiment: self.config.experiment.name().to_string(),
            version: biaslab_version().to_string(),
            timestamp: chrono::Utc::now().to_rfc3339(),
            config: self.config.to_map(),
            series: self
                .series
                .iter()
                .map(|s| SeriesEntry {
                    name: s.name.clone(),
                    file: s.file_name(),
                    description: s.description.clone(),
                    rows: s.rows.len(),
                    columns: s.columns.clone(),
                })
                .collect(),
        }
    }

    /// Writes every series, `config.txt` and `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<ResultRecord, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        for s in &self.series {
            write_file(&dir.join(s.file_name()), &s.to_csv())?;
        }
        write_file(&dir.join("config.txt"), &self.config.to_text())?;
        let record = self.record();
        let json = serde_json::to_string_pretty(&record).expect("manifest serializes");
        write_file(&dir.join("manifest.json"), &(json + "\n"))?;
        Ok(record)
    }
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

pub fn biaslab_version() -> &'static str {
    biaslab::VERSION
}

/// Subdirectory name for one entry of a learning-rate sweep.
pub fn eta_dir(root: &Path, eta: f64) -> PathBuf {
    root.join(format!("eta_{eta}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_header_and_rows() {
        let mut s = Series::new("x", "demo", &[("a", "first"), ("b", "second")]);
        s.push(vec![num(0.1), num(2.0)]);
        assert_eq!(s.to_csv(), "a,b\n0.1,2.0\n");
        assert_eq!(num(3.2e-10), "3.2e-10");
        assert_eq!(s.file_name(), "x.csv");
    }

    #[test]
    fn numbers_round_trip() {
        for x in [0.1 + 0.2, 1.0 / 3.0, 1e-300, -2.5e17] {
            assert_eq!(num(x).parse::<f64>().unwrap(), x);
        }
    }
}
