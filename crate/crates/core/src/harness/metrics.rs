//! Append-only JSON-lines metrics stream.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LossParts;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricsRecord {
    Step {
        stage: String,
        step: u64,
        /// Counter of the first episode in the batch.
        episode: u64,
        losses: LossParts,
        grad_norm: f64,
        wall_secs: f64,
    },
    Eval {
        stage: String,
        step: u64,
        /// mAP per IoU threshold, keyed by the threshold printed to two
        /// decimals.
        map: BTreeMap<String, f64>,
        per_class_ap: BTreeMap<u32, f64>,
        accuracy: f64,
        wall_secs: f64,
    },
}

/// Collects records in memory and optionally appends each one to a file as
/// it arrives.
#[derive(Debug, Default)]
pub struct Metrics {
    pub records: Vec<MetricsRecord>,
    writer: Option<BufWriter<File>>,
}

impl Metrics {
    pub fn in_memory() -> Self {
        Metrics::default()
    }

    pub fn to_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Metrics {
            records: Vec::new(),
            writer: Some(BufWriter::new(f)),
        })
    }

    pub fn push(&mut self, r: MetricsRecord) -> Result<()> {
        if let Some(w) = &mut self.writer {
            let line = serde_json::to_string(&r).expect("metrics serialize");
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|e| Error::io("metrics stream", e))?;
        }
        self.records.push(r);
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))
            })
            .collect()
    }
}
