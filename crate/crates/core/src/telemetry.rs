//! Per-step telemetry rows, written to CSV on a background thread.

use std::fs::File;
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, Sender};
use std::thread::{self, JoinHandle};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error("telemetry I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("telemetry CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("telemetry writer thread died")]
    WriterGone,
}

/// One control step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TelemetryRow {
    /// Stream time in seconds.
    pub ts: f64,
    /// Records arrived this step.
    pub rate_in: f64,
    pub beta: u64,
    pub beta_exp: f64,
    pub rho: f64,
    pub d: f64,
    /// CPU reading the decision was based on.
    pub mu_prev: f64,
    /// CPU reading after this step's action.
    pub mu_user: f64,
    pub mu_exp: f64,
    pub action: String,
    pub spill_depth: u64,
    pub committed_total: u64,
    /// Statements in the pending bucket when the decision was made.
    pub beta_e: u64,
    /// Records in the pending bucket when the decision was made.
    pub records: u64,
    /// Statements sent to the sink this step.
    pub pushed: u64,
    /// Compression ratio of the batch pushed this step.
    pub compression: Option<f64>,
}

/// Writes rows on a dedicated thread so the control loop never blocks on disk.
pub struct TelemetryWriter {
    tx: Option<Sender<TelemetryRow>>,
    handle: Option<JoinHandle<Result<u64, TelemetryError>>>,
}

impl TelemetryWriter {
    pub fn spawn(path: impl AsRef<Path>) -> Result<Self, TelemetryError> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)
                .map_err(|source| TelemetryError::Io { path: parent.to_path_buf(), source })?;
        }
        let file = File::create(&path).map_err(|source| TelemetryError::Io { path: path.clone(), source })?;
        let (tx, rx) = mpsc::channel::<TelemetryRow>();
        let handle = thread::spawn(move || {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(BufWriter::new(file));
            w.write_record(COLUMNS)?;
            let mut n = 0;
            for row in rx {
                w.serialize(&row)?;
                n += 1;
            }
            w.flush().map_err(|source| TelemetryError::Io { path, source })?;
            Ok(n)
        });
        Ok(Self { tx: Some(tx), handle: Some(handle) })
    }

    pub fn send(&self, row: TelemetryRow) -> Result<(), TelemetryError> {
        self.tx.as_ref().ok_or(TelemetryError::WriterGone)?.send(row).map_err(|_| TelemetryError::WriterGone)
    }

    /// Flushes and returns the number of rows written.
    pub fn finish(mut self) -> Result<u64, TelemetryError> {
        self.tx.take();
        self.handle.take().ok_or(TelemetryError::WriterGone)?.join().map_err(|_| TelemetryError::WriterGone)?
    }
}

impl Drop for TelemetryWriter {
    fn drop(&mut self) {
        self.tx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

pub const COLUMNS: [&str; 16] = [
    "ts",
    "rate_in",
    "beta",
    "beta_exp",
    "rho",
    "d",
    "mu_prev",
    "mu_user",
    "mu_exp",
    "action",
    "spill_depth",
    "committed_total",
    "beta_e",
    "records",
    "pushed",
    "compression",
];

/// Parsed rows plus the number of malformed rows skipped.
pub fn read_telemetry(path: impl AsRef<Path>) -> Result<(Vec<TelemetryRow>, u64), TelemetryError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| TelemetryError::Io { path: path.to_path_buf(), source })?;
    let mut r = csv::ReaderBuilder::new().flexible(true).from_reader(file);
    let mut rows = Vec::new();
    let mut bad = 0;
    for row in r.deserialize::<TelemetryRow>() {
        match row {
            Ok(row) => rows.push(row),
            Err(_) => bad += 1,
        }
    }
    Ok((rows, bad))
}
