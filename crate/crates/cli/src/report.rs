//! CSV and JSON writers.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use matchcal::Warning;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize)]
pub struct Metadata<'a> {
    pub schema_version: u32,
    pub tool: &'static str,
    pub tool_version: &'static str,
    pub command: &'a str,
    /// The resolved configuration, defaults included.
    pub config: &'a RunConfig,
    /// CSV files written alongside this JSON, all sharing `schema_version`.
    pub files: Vec<String>,
    pub warnings: &'a [Warning],
}

#[derive(Serialize)]
struct Document<'a, T: Serialize> {
    metadata: Metadata<'a>,
    result: &'a T,
}

/// Collects the files of one command under the output directory.
pub struct Sink {
    dir: PathBuf,
    written: Vec<String>,
}

impl Sink {
    pub fn new(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&mut self, name: &str) -> PathBuf {
        self.written.push(name.to_string());
        self.dir.join(name)
    }

    pub fn csv(&mut self, name: &str, table: &Table) -> Result<(), CliError> {
        let path = self.path(name);
        let io_err = |e: csv::Error| CliError::io(format!("cannot write {}: {e}", path.display()));
        let mut w = csv::Writer::from_path(&path).map_err(io_err)?;
        w.write_record(&table.header).map_err(io_err)?;
        for row in &table.rows {
            w.write_record(row).map_err(io_err)?;
        }
        w.flush().map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))
    }

    /// Writes `{metadata, result}` and returns every file name written.
    pub fn finish<T: Serialize>(
        mut self,
        name: &str,
        command: &str,
        config: &RunConfig,
        warnings: &[Warning],
        result: &T,
    ) -> Result<Vec<String>, CliError> {
        let files = self.written.clone();
        let path = self.path(name);
        let doc = Document {
            metadata: Metadata {
                schema_version: SCHEMA_VERSION,
                tool: "matchcal",
                tool_version: env!("CARGO_PKG_VERSION"),
                command,
                config,
                files,
                warnings,
            },
            result,
        };
        let io_err = |e: std::io::Error| CliError::io(format!("cannot write {}: {e}", path.display()));
        let mut w = BufWriter::new(File::create(&path).map_err(io_err)?);
        serde_json::to_writer_pretty(&mut w, &doc).map_err(|e| CliError::io(e.to_string()))?;
        w.write_all(b"\n").and_then(|_| w.flush()).map_err(io_err)?;
        Ok(self.written)
    }
}

pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }
}

/// Shortest representation that parses back to the same `f64`.
pub fn num(x: f64) -> String {
    x.to_string()
}

pub fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

pub fn emit_warnings(warnings: &[Warning]) {
    let mut err = std::io::stderr().lock();
    for w in warnings {
        let line = serde_json::json!({ "warning": w });
        let _ = writeln!(err, "{line}");
    }
}
