//! Metrics records and atomic file output.

use std::io::Write;
use std::path::Path;

use mnbr::meta::EpochRecord;
use serde::Serialize;

use crate::config::RunConfig;
use crate::CliError;

/// Version of the metrics and trace formats.
pub const METRICS_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum Record {
    Header {
        format_version: u32,
        artifact_version: u32,
        command: String,
        config: RunConfig,
    },
    Epoch {
        split: String,
        model: String,
        seed: u64,
        #[serde(flatten)]
        epoch: EpochRecord,
    },
    Test {
        split: String,
        model: String,
        seed: u64,
        metric_name: &'static str,
        loss: f64,
        metric: f64,
        best_epoch: usize,
        stopped_early: bool,
    },
    Summary {
        model: String,
        metric_name: &'static str,
        count: usize,
        mean: f64,
        std: f64,
        median: f64,
    },
    Cell {
        entries: usize,
        gamma: f64,
        seed: u64,
        metric_name: &'static str,
        metric: Option<f64>,
        error: Option<String>,
    },
    Timing {
        wall_clock_s: f64,
    },
}

impl Record {
    pub fn header(command: &str, config: &RunConfig) -> Record {
        Record::Header {
            format_version: METRICS_VERSION,
            artifact_version: mnbr::meta::FORMAT_VERSION,
            command: command.to_string(),
            config: config.clone(),
        }
    }
}

/// Line-delimited JSON.
pub fn to_jsonl(records: &[Record]) -> Result<Vec<u8>, CliError> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| CliError::Other(e.to_string()))?;
        out.push(b'\n');
    }
    Ok(out)
}

/// Write via a temporary file in the same directory and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| CliError::Other(e.to_string()))?;
    Ok(())
}

pub fn mean_std_median(values: &[f64]) -> (f64, f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    };
    (mean, std, median)
}
