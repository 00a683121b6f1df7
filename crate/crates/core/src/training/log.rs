use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One optimisation step: the total loss and each named component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: String,
    pub step: usize,
    pub loss: f64,
    pub components: BTreeMap<String, f64>,
}

/// Receives per-step records from the training loops.
pub trait StepSink {
    fn record(&mut self, rec: &StepRecord) -> Result<()>;
}

/// Discards everything.
pub struct NullSink;

impl StepSink for NullSink {
    fn record(&mut self, _: &StepRecord) -> Result<()> {
        Ok(())
    }
}

impl StepSink for Vec<StepRecord> {
    fn record(&mut self, rec: &StepRecord) -> Result<()> {
        self.push(rec.clone());
        Ok(())
    }
}

/// Appends records as newline-delimited JSON.
pub struct JsonlSink {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlSink {
    pub fn append(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self { path, out: BufWriter::new(file) })
    }
}

impl StepSink for JsonlSink {
    fn record(&mut self, rec: &StepRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, rec)?;
        self.out.write_all(b"\n").map_err(|e| Error::io(&self.path, e))
    }
}

impl Drop for JsonlSink {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

/// Reads a JSONL log back.
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<StepRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Mean of the first and last `window` losses of a run.
pub fn loss_endpoints(losses: &[f64], window: usize) -> Option<(f64, f64)> {
    if losses.is_empty() {
        return None;
    }
    let w = window.clamp(1, losses.len());
    let mean = |rs: &[f64]| rs.iter().sum::<f64>() / rs.len() as f64;
    Some((mean(&losses[..w]), mean(&losses[losses.len() - w..])))
}
