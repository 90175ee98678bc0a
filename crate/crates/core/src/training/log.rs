//! Tab-separated training log: one row per step with the learning rate and loss terms.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub values: Vec<f64>,
}

/// Rows are kept in memory and, when file-backed, appended and flushed as they arrive.
pub struct MetricsLog {
    columns: Vec<String>,
    rows: Vec<LogRow>,
    sink: Option<(PathBuf, BufWriter<File>)>,
}

impl MetricsLog {
    pub fn in_memory(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            sink: None,
        }
    }

    /// Creates (truncating) `path` and writes the header.
    pub fn create(path: &Path, columns: &[&str]) -> Result<Self> {
        let mut log = Self::in_memory(columns);
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        writeln!(w, "{}", log.header()).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))?;
        log.sink = Some((path.to_path_buf(), w));
        Ok(log)
    }

    fn header(&self) -> String {
        let mut h = vec!["step".to_string(), "lr".to_string()];
        h.extend(self.columns.iter().cloned());
        h.join("\t")
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn push(&mut self, step: usize, lr: f64, values: &[f64]) -> Result<()> {
        if values.len() != self.columns.len() {
            return Err(Error::validation(format!(
                "log row has {} values for {} columns",
                values.len(),
                self.columns.len()
            )));
        }
        let row = LogRow {
            step,
            lr,
            values: values.to_vec(),
        };
        if let Some((path, w)) = &mut self.sink {
            writeln!(w, "{}", format_row(&row))
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(path.clone(), e))?;
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[LogRow] {
        &self.rows
    }

    /// Value of the first column (the total loss) per step.
    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.values[0]).collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = self.header();
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format_row(r));
            s.push('\n');
        }
        s
    }
}

fn format_row(r: &LogRow) -> String {
    let mut s = format!("{}\t{:e}", r.step, r.lr);
    for v in &r.values {
        s.push_str(&format!("\t{v:.9e}"));
    }
    s
}
