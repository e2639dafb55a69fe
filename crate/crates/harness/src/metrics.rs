//! JSON-lines metrics log closed by a checksum line.

use crate::error::{HarnessError, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iter: usize,
    pub split: String,
    pub name: String,
    pub value: f64,
}

#[derive(Serialize, Deserialize)]
struct ChecksumLine {
    checksum: String,
    rows: usize,
}

pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
    hasher: Sha256,
    rows: usize,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| HarnessError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            hasher: Sha256::new(),
            rows: 0,
        })
    }

    pub fn row(&mut self, iter: usize, split: &str, name: &str, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(HarnessError::format(
                &self.path,
                format!("refusing non-finite {name} = {value}"),
            ));
        }
        let row = MetricRow {
            iter,
            split: split.to_string(),
            name: name.to_string(),
            value,
        };
        let mut line = serde_json::to_string(&row).expect("metric rows serialize");
        line.push('\n');
        self.hasher.update(line.as_bytes());
        self.rows += 1;
        self.out
            .write_all(line.as_bytes())
            .map_err(|e| HarnessError::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out
            .flush()
            .map_err(|e| HarnessError::io(&self.path, e))
    }

    /// Appends the checksum line and closes the file.
    pub fn finish(mut self) -> Result<()> {
        let line = ChecksumLine {
            checksum: hex::encode(self.hasher.clone().finalize()),
            rows: self.rows,
        };
        let text = serde_json::to_string(&line).expect("checksum serializes");
        writeln!(self.out, "{text}").map_err(|e| HarnessError::io(&self.path, e))?;
        self.flush()
    }
}

/// Reads a complete metrics file, rejecting it when the checksum line is
/// missing or does not match the rows before it.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let body_end = text.trim_end_matches('\n').rfind('\n').map_or(0, |i| i + 1);
    let (body, last) = text.split_at(body_end);
    let check: ChecksumLine = serde_json::from_str(last.trim_end())
        .map_err(|_| HarnessError::format(path, "missing checksum line (truncated file?)"))?;
    if hex::encode(Sha256::digest(body.as_bytes())) != check.checksum {
        return Err(HarnessError::format(path, "checksum mismatch"));
    }
    let rows: Vec<MetricRow> = body
        .lines()
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| HarnessError::format(path, format!("row {}: {e}", i + 1)))
        })
        .collect::<Result<_>>()?;
    if rows.len() != check.rows {
        return Err(HarnessError::format(path, "row count mismatch"));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_sample(path: &Path) {
        let mut w = MetricsWriter::create(path).unwrap();
        w.row(0, "train", "loss", 0.5).unwrap();
        w.row(0, "train", "lr", 1e-3).unwrap();
        w.row(10, "val", "accuracy", 1.0).unwrap();
        w.finish().unwrap();
    }

    #[test]
    fn rows_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        write_sample(&path);
        let rows = read_metrics(&path).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[1].value, 1e-3);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(r#"{"iter":0,"split":"train","name":"loss","value":0.5}"#));
    }

    #[test]
    fn truncation_and_tampering_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        write_sample(&path);
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        std::fs::write(&path, lines[..3].join("\n") + "\n").unwrap();
        assert!(read_metrics(&path).is_err());
        std::fs::write(&path, text.replace("0.5", "0.25")).unwrap();
        assert!(read_metrics(&path).is_err());
    }

    #[test]
    fn non_finite_rows_refused() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = MetricsWriter::create(&dir.path().join("m.jsonl")).unwrap();
        assert!(w.row(0, "train", "loss", f64::NAN).is_err());
    }
}
