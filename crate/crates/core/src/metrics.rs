//! JSON-lines training logs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One optimizer step. Loss components a stage does not optimize are absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: u8,
    pub step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_layer: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_attn: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_logit: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_ce: Option<f64>,
    pub lr: f64,
    pub wall_ms: u64,
}

impl StepRecord {
    /// Sum of the present loss components.
    pub fn total(&self) -> f64 {
        [self.loss_layer, self.loss_attn, self.loss_logit, self.loss_ce]
            .iter()
            .flatten()
            .sum()
    }
}

/// Destination for step records.
pub trait MetricsSink {
    fn record(&mut self, rec: &StepRecord) -> Result<()>;
}

impl MetricsSink for Vec<StepRecord> {
    fn record(&mut self, rec: &StepRecord) -> Result<()> {
        self.push(rec.clone());
        Ok(())
    }
}

/// Discards everything.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _: &StepRecord) -> Result<()> {
        Ok(())
    }
}

/// Writes one JSON object per line and flushes after every record.
pub struct JsonlWriter<W: Write> {
    out: W,
}

impl JsonlWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        Ok(JsonlWriter {
            out: BufWriter::new(File::create(path)?),
        })
    }
}

impl<W: Write> JsonlWriter<W> {
    pub fn new(out: W) -> Self {
        JsonlWriter { out }
    }

    /// Write any serializable value as one line.
    pub fn write_value<S: Serialize>(&mut self, value: &S) -> Result<()> {
        serde_json::to_writer(&mut self.out, value).map_err(std::io::Error::from)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> MetricsSink for JsonlWriter<W> {
    fn record(&mut self, rec: &StepRecord) -> Result<()> {
        self.write_value(rec)
    }
}

/// Parse a JSON-lines stream of step records.
pub fn read_records(text: &str) -> Result<Vec<StepRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| crate::Error::Data(format!("bad metrics line: {e}"))))
        .collect()
}
