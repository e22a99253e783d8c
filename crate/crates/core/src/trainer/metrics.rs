use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Per-step telemetry. The record for step `t` describes the update made at
/// that step; the terminal record (`t = T`) has no update, so `lr` and
/// `dead_zone_fraction` are absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: Option<f64>,
    /// Absent in full-precision mode.
    pub pressure: Option<f64>,
    /// Scheduled (unclamped) temperature per quantized tensor, hestia only.
    pub temperatures: BTreeMap<String, f64>,
    pub dead_zone_fraction: Option<f64>,
    /// Cumulative over all completed steps.
    pub flip_fraction: f64,
    /// Mean `|W - Q(W)|` over quantized weights before the update.
    pub quant_error: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Append-only JSON-lines sink; each record is flushed as it is written.
pub struct MetricsWriter {
    file: File,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            file: File::create(path)?,
        })
    }

    pub fn append(path: &Path) -> Result<Self> {
        Ok(Self {
            file: OpenOptions::new().create(true).append(true).open(path)?,
        })
    }

    pub fn write(&mut self, rec: &MetricsRecord) -> Result<()> {
        let mut line = serde_json::to_vec(rec)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
