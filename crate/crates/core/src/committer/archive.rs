//! Failed batches kept on disk as `<root>/<run_id>/batch-<i>.{records,cypher}`.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{build_statements, GraphSink, SinkError, StatementBatch};
use crate::controller::spill::{decode_segment, encode_segment, write_atomic, SpillError};
use crate::edge_table::create_edges;
use crate::mapping::MappingConfig;
use crate::stream_source::RawRecord;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("archive I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Spill(#[from] SpillError),
    #[error("archived records for batch {0} are unreadable: {1}")]
    Corrupt(u64, String),
    #[error("batch {0} rebuilt from its records does not match the archived statements")]
    Mismatch(u64),
    #[error("replay of batch {0} failed: {1}")]
    Sink(u64, SinkError),
}

#[derive(Debug, Clone)]
pub struct Archive {
    dir: PathBuf,
}

impl Archive {
    pub fn new(root: impl AsRef<Path>, run_id: &str) -> Result<Self, ArchiveError> {
        let dir = root.as_ref().join(run_id);
        fs::create_dir_all(&dir).map_err(|source| ArchiveError::Io { path: dir.clone(), source })?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Writes both files for the batch and returns the statement file path.
    pub fn store(&self, batch: &StatementBatch, records: &[RawRecord]) -> Result<PathBuf, ArchiveError> {
        let i = batch.bucket_index;
        write_atomic(&self.dir.join(format!("batch-{i}.records")), &encode_segment(records))?;
        let cypher = self.dir.join(format!("batch-{i}.cypher"));
        write_atomic(&cypher, batch.to_cypher().as_bytes())?;
        Ok(cypher)
    }

    /// Bucket indices present in the archive, ascending.
    pub fn batches(&self) -> Result<Vec<u64>, ArchiveError> {
        let entries = fs::read_dir(&self.dir).map_err(|source| ArchiveError::Io { path: self.dir.clone(), source })?;
        let mut out: Vec<u64> = entries
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                name.strip_prefix("batch-")?.strip_suffix(".records")?.parse().ok()
            })
            .collect();
        out.sort_unstable();
        Ok(out)
    }

    pub fn load(&self, i: u64) -> Result<(Vec<RawRecord>, String), ArchiveError> {
        let read = |p: PathBuf| fs::read(&p).map_err(|source| ArchiveError::Io { path: p, source });
        let records = decode_segment(&read(self.dir.join(format!("batch-{i}.records")))?)
            .map_err(|e| ArchiveError::Corrupt(i, e))?;
        let cypher = String::from_utf8_lossy(&read(self.dir.join(format!("batch-{i}.cypher")))?).into_owned();
        Ok((records, cypher))
    }

    /// Rebuilds the batch from its records, checks it against the stored
    /// statements byte for byte, and applies it to `sink`.
    pub fn replay(
        &self,
        i: u64,
        mapping: &MappingConfig,
        sink: &mut dyn GraphSink,
    ) -> Result<StatementBatch, ArchiveError> {
        let (records, cypher) = self.load(i)?;
        let batch = build_statements(&create_edges(&records, mapping), i);
        if batch.to_cypher() != cypher {
            return Err(ArchiveError::Mismatch(i));
        }
        sink.apply(&batch).map_err(|e| ArchiveError::Sink(i, e))?;
        Ok(batch)
    }

    /// Replays every archived batch in order; successful ones are removed.
    pub fn replay_all(&self, mapping: &MappingConfig, sink: &mut dyn GraphSink) -> Result<usize, ArchiveError> {
        let mut n = 0;
        for i in self.batches()? {
            self.replay(i, mapping, sink)?;
            for ext in ["records", "cypher"] {
                let _ = fs::remove_file(self.dir.join(format!("batch-{i}.{ext}")));
            }
            n += 1;
        }
        Ok(n)
    }
}
