use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::CliError;

/// One CSV cell. Floats are written with 17 significant digits.
#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
    Bool(bool),
}

impl Cell {
    pub fn render(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) => format!("{v:.16e}"),
            Cell::Text(s) => s.clone(),
            Cell::Bool(b) => b.to_string(),
        }
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
    /// Columns that hold wall-clock measurements.
    pub timing_columns: Vec<String>,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Table {
            name: name.to_string(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
            timing_columns: Vec::new(),
        }
    }

    pub fn timing(mut self, cols: &[&str]) -> Self {
        self.timing_columns = cols.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>, CliError> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::render))?;
        }
        w.into_inner().map_err(|e| CliError::Io(e.into_error()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Assertion {
    pub name: String,
    pub pass: bool,
    pub value: f64,
    pub threshold: f64,
    /// Derived from wall-clock measurements, so not reproducible bit for bit.
    pub timing: bool,
}

impl Assertion {
    /// Passes when `value ≤ threshold` (NaN fails).
    pub fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Assertion {
            name: name.into(),
            pass: value <= threshold,
            value,
            threshold,
            timing: false,
        }
    }

    /// Passes when `value` lies in `[lo, hi]`; `threshold` records `hi`.
    pub fn within(name: impl Into<String>, value: f64, lo: f64, hi: f64) -> Self {
        Assertion {
            name: name.into(),
            pass: value >= lo && value <= hi,
            value,
            threshold: hi,
            timing: false,
        }
    }

    pub fn holds(name: impl Into<String>, pass: bool) -> Self {
        Assertion {
            name: name.into(),
            pass,
            value: if pass { 1.0 } else { 0.0 },
            threshold: 1.0,
            timing: false,
        }
    }

    pub fn timed(mut self) -> Self {
        self.timing = true;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub command: String,
    pub tables: Vec<Table>,
    pub assertions: Vec<Assertion>,
    /// Resolved configuration, echoed into the summary.
    pub config: serde_json::Value,
}

#[derive(Serialize)]
struct Summary<'a> {
    command: &'a str,
    pass: bool,
    assertions: Vec<&'a Assertion>,
    files: Vec<String>,
    /// Per file, the columns holding wall-clock measurements.
    timing_columns: BTreeMap<String, Vec<String>>,
    config: &'a serde_json::Value,
}

#[derive(Serialize)]
struct TimingSummary<'a> {
    command: &'a str,
    pass: bool,
    assertions: Vec<&'a Assertion>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.pass)
    }

    pub fn assertion(&self, name: &str) -> Option<&Assertion> {
        self.assertions.iter().find(|a| a.name == name)
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    /// Failing assertions whose name starts with `prefix`.
    pub fn failures(&self, prefix: &str) -> Vec<&Assertion> {
        self.assertions
            .iter()
            .filter(|a| a.name.starts_with(prefix) && !a.pass)
            .collect()
    }

    fn split(&self, timing: bool) -> Vec<&Assertion> {
        self.assertions.iter().filter(|a| a.timing == timing).collect()
    }

    /// Summary of the reproducible assertions.
    pub fn summary_json(&self) -> Result<String, CliError> {
        let assertions = self.split(false);
        let summary = Summary {
            command: &self.command,
            pass: assertions.iter().all(|a| a.pass),
            assertions,
            files: self.tables.iter().map(|t| format!("{}.csv", t.name)).collect(),
            timing_columns: self
                .tables
                .iter()
                .filter(|t| !t.timing_columns.is_empty())
                .map(|t| (format!("{}.csv", t.name), t.timing_columns.clone()))
                .collect(),
            config: &self.config,
        };
        Ok(serde_json::to_string_pretty(&summary)? + "\n")
    }

    /// Summary of the wall-clock assertions.
    pub fn timing_json(&self) -> Result<String, CliError> {
        let assertions = self.split(true);
        let summary = TimingSummary {
            command: &self.command,
            pass: assertions.iter().all(|a| a.pass),
            assertions,
        };
        Ok(serde_json::to_string_pretty(&summary)? + "\n")
    }

    /// Writes every table as `<name>.csv` plus `summary.json` and
    /// `timing.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir)?;
        for t in &self.tables {
            fs::write(dir.join(format!("{}.csv", t.name)), t.to_csv()?)?;
        }
        fs::write(dir.join("summary.json"), self.summary_json()?)?;
        fs::write(dir.join("timing.json"), self.timing_json()?)?;
        Ok(())
    }
}

/// Every reproducible output under `dir`, keyed by relative path: CSV files
/// with their timing columns removed, `summary.json`, and any other file
/// except `timing.json` byte for byte.
pub fn reproducible_outputs(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, CliError> {
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("summary.json"))?)?;
    let timing: BTreeMap<String, Vec<String>> = summary
        .get("timing_columns")
        .cloned()
        .map(serde_json::from_value)
        .transpose()?
        .unwrap_or_default();
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path
                .strip_prefix(dir)
                .map_err(|e| CliError::Config(e.to_string()))?
                .to_string_lossy()
                .replace('\\', "/");
            if rel == "timing.json" {
                continue;
            }
            let bytes = fs::read(&path)?;
            let bytes = match timing.get(&rel) {
                Some(cols) => drop_columns(&bytes, cols)?,
                None => bytes,
            };
            out.insert(rel, bytes);
        }
    }
    Ok(out)
}

fn drop_columns(csv_bytes: &[u8], cols: &[String]) -> Result<Vec<u8>, CliError> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(csv_bytes);
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let mut keep: Option<Vec<bool>> = None;
    for rec in r.records() {
        let rec = rec?;
        let k = keep.get_or_insert_with(|| rec.iter().map(|h| !cols.iter().any(|c| c == h)).collect());
        w.write_record(rec.iter().zip(k.iter()).filter(|(_, &k)| k).map(|(f, _)| f))?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.into_error()))
}
