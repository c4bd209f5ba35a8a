use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub stage: u8,
    pub loss: f64,
    pub lr: f64,
}

/// Append-only per-step metrics, kept in memory and optionally mirrored to
/// a JSONL file.
#[derive(Debug, Default)]
pub struct MetricsLog {
    records: Mutex<Vec<MetricRecord>>,
    sink: Mutex<Option<(PathBuf, BufWriter<File>)>>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        MetricsLog::default()
    }

    /// Appends to `path`, creating it if needed.
    pub fn to_file(path: &Path) -> Result<Self> {
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(MetricsLog {
            records: Mutex::new(Vec::new()),
            sink: Mutex::new(Some((path.to_path_buf(), BufWriter::new(f)))),
        })
    }

    pub fn push(&self, rec: MetricRecord) -> Result<()> {
        if let Some((path, w)) = self.sink.lock().expect("metrics lock").as_mut() {
            let line = serde_json::to_string(&rec).expect("metric records serialize");
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io(path.as_path(), e))?;
        }
        self.records.lock().expect("metrics lock").push(rec);
        Ok(())
    }

    pub fn records(&self) -> Vec<MetricRecord> {
        self.records.lock().expect("metrics lock").clone()
    }

    pub fn losses(&self, stage: u8) -> Vec<f64> {
        self.records().iter().filter(|r| r.stage == stage).map(|r| r.loss).collect()
    }
}

/// Reads a metrics file written by [`MetricsLog`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::DataLine {
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}
