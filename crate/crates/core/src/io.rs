//! Artifact files: a `#`-prefixed manifest block followed by a CSV table.

use crate::error::{Error, Result};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "KINFILT_OUT";

/// Header block echoed at the top of every artifact.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub command: String,
    /// Resolved configuration, echoed verbatim.
    pub config: String,
    /// SHA-256 of the resolved configuration and any extra inputs.
    pub input_hash: String,
}

impl Manifest {
    pub fn new(command: &str, config: &str, extra_inputs: &[&[u8]]) -> Self {
        let mut h = Sha256::new();
        h.update(config.as_bytes());
        for x in extra_inputs {
            h.update(x);
        }
        Self { command: command.to_string(), config: config.to_string(), input_hash: hex::encode(h.finalize()) }
    }

    pub fn render(&self) -> String {
        let mut s = format!("# kinfilt {}\n# command: {}\n# input-sha256: {}\n# config:\n", env!("CARGO_PKG_VERSION"), self.command, self.input_hash);
        for line in self.config.lines() {
            if line.is_empty() {
                s.push_str("#\n");
            } else {
                s.push_str("#   ");
                s.push_str(line);
                s.push('\n');
            }
        }
        s
    }
}

/// Formats a float for CSV output: shortest round-trip digits, exponent form for extremes.
pub fn fmt_f64(x: f64) -> String {
    if x == 0.0 || !x.is_finite() || (1e-4..1e15).contains(&x.abs()) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

/// Header plus rows of already formatted cells.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(&self.header).map_err(|e| Error::Io(e.to_string()))?;
        for r in &self.rows {
            w.write_record(r).map_err(|e| Error::Io(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
    }
}

/// Manifest block followed by the table.
pub fn render_artifact(manifest: &Manifest, table: &Table) -> Result<String> {
    Ok(manifest.render() + &table.to_csv()?)
}

pub fn write_artifact(path: &Path, manifest: &Manifest, table: &Table) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(render_artifact(manifest, table)?.as_bytes())?;
    Ok(())
}

/// Reads an artifact back, skipping the manifest block.
pub fn read_table(path: &Path) -> Result<Table> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).map_err(|e| Error::Io(e.to_string()))?;
    let header = r.headers().map_err(|e| Error::Io(e.to_string()))?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(String::from).collect()).map_err(|e| Error::Io(e.to_string())))
        .collect::<Result<_>>()?;
    Ok(Table { header, rows })
}
