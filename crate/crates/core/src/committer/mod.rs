//! Compiles edge tables into Cypher and pushes them to a sink.

mod archive;
mod mock;
#[cfg(feature = "wire")]
mod wire;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde_json::Value;
use thiserror::Error;

use crate::edge_table::{EdgeTable, TableMeta};
use crate::mapping::Props;
use crate::stream_source::RawRecord;

pub use archive::{Archive, ArchiveError};
pub use mock::{mock_sink_step, MockCoefficients, MockDbState, MockSink};
#[cfg(feature = "wire")]
pub use wire::WireSink;

pub const DEFAULT_POOL_SIZE: usize = 4;
pub const DEFAULT_RETRIES: u32 = 3;

#[derive(Debug, Error)]
pub enum SinkError {
    #[error("sink unavailable: {0}")]
    Unavailable(String),
    #[error("sink rejected batch: {0}")]
    Rejected(String),
    #[error("sink I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// `(label, key)` of a node.
pub type NodeKey = (String, String);

/// One idempotent insertion statement.
#[derive(Debug, Clone, PartialEq)]
pub enum Statement {
    Node { label: String, key: String, props: Props },
    Edge { start: NodeKey, end: NodeKey, label: String, props: Props, count: u64 },
}

impl Statement {
    pub fn to_cypher(&self) -> String {
        match self {
            Statement::Node { label, key, props } => {
                let mut s = format!("MERGE (n:{} {{key: {}}})", ident(label), quote(key));
                if !props.is_empty() {
                    s.push_str(" ON CREATE SET ");
                    s.push_str(&assignments("n", props));
                    s.push_str(" ON MATCH SET ");
                    s.push_str(&fill_missing("n", props));
                }
                s.push(';');
                s
            }
            Statement::Edge { start, end, label, props, count } => {
                let mut s = format!(
                    "MATCH (a:{} {{key: {}}}), (b:{} {{key: {}}}) MERGE (a)-[r:{}]->(b) ON CREATE SET r.count = {count}",
                    ident(&start.0),
                    quote(&start.1),
                    ident(&end.0),
                    quote(&end.1),
                    ident(label),
                );
                if !props.is_empty() {
                    s.push_str(", ");
                    s.push_str(&assignments("r", props));
                }
                let _ = write!(s, " ON MATCH SET r.count = r.count + {count};");
                s
            }
        }
    }
}

fn assignments(var: &str, props: &Props) -> String {
    props.iter().map(|(k, v)| format!("{var}.{} = {}", ident(k), literal(v))).collect::<Vec<_>>().join(", ")
}

/// Keeps values already on the node; only absent keys are written.
fn fill_missing(var: &str, props: &Props) -> String {
    props
        .iter()
        .map(|(k, v)| {
            let field = format!("{var}.{}", ident(k));
            format!("{field} = coalesce({field}, {})", literal(v))
        })
        .collect::<Vec<_>>()
        .join(", ")
}

/// Backtick-quoted identifier.
pub fn ident(name: &str) -> String {
    format!("`{}`", name.replace('`', "``"))
}

/// Single-quoted string literal.
pub fn quote(text: &str) -> String {
    let mut out = String::with_capacity(text.len() + 2);
    out.push('\'');
    for c in text.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\'' => out.push_str("\\'"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if c.is_control() => {
                let _ = write!(out, "\\u{:04X}", c as u32);
            }
            c => out.push(c),
        }
    }
    out.push('\'');
    out
}

/// Cypher literal for a JSON value. Objects are stored as JSON text.
pub fn literal(v: &Value) -> String {
    match v {
        Value::Null => "null".into(),
        Value::Bool(b) => b.to_string(),
        Value::Number(n) => n.to_string(),
        Value::String(s) => quote(s),
        Value::Array(items) => format!("[{}]", items.iter().map(literal).collect::<Vec<_>>().join(", ")),
        Value::Object(_) => quote(&v.to_string()),
    }
}

/// Statements for one bucket.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StatementBatch {
    pub bucket_index: u64,
    pub n_source_records: u64,
    pub node_statements: Vec<Statement>,
    pub edge_statements: Vec<Statement>,
    /// Statements the same records would produce without deduplication.
    pub uncompressed: u64,
}

impl StatementBatch {
    pub fn statement_count(&self) -> usize {
        self.node_statements.len() + self.edge_statements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.statement_count() == 0
    }

    pub fn statements(&self) -> impl Iterator<Item = &Statement> {
        self.node_statements.iter().chain(&self.edge_statements)
    }

    /// One statement per line, nodes first.
    pub fn to_cypher(&self) -> String {
        let mut s = String::new();
        for st in self.statements() {
            s.push_str(&st.to_cypher());
            s.push('\n');
        }
        s
    }

    pub fn compression_ratio(&self) -> Option<f64> {
        compression_ratio(self, self.uncompressed)
    }
}

/// Without deduplication every edge tuple costs two node statements and one
/// edge statement, and each standalone node occurrence costs one more.
pub fn uncompressed_statement_count(meta: &TableMeta) -> u64 {
    3 * meta.n_extracted_edges + meta.n_node_occurrences
}

/// `statements / uncompressed`; `None` when nothing was extracted.
pub fn compression_ratio(b: &StatementBatch, uncompressed: u64) -> Option<f64> {
    (uncompressed > 0).then(|| b.statement_count() as f64 / uncompressed as f64)
}

/// Node statements for every indexed node sorted by `(label, key)`, then one
/// edge statement per row in `edge_id` order.
pub fn build_statements(t: &EdgeTable, bucket_index: u64) -> StatementBatch {
    let mut nodes: Vec<_> = t.index().iter().collect();
    nodes.sort_by(|a, b| (&a.label, &a.key).cmp(&(&b.label, &b.key)));
    let node_statements = nodes
        .into_iter()
        .map(|n| Statement::Node { label: n.label.clone(), key: n.key.clone(), props: n.props.clone() })
        .collect();
    let mut rows: Vec<_> = t.rows().iter().collect();
    rows.sort_by_key(|r| r.edge_id);
    let edge_statements = rows
        .into_iter()
        .map(|r| {
            let s = t.start_of(r);
            let e = t.end_of(r);
            Statement::Edge {
                start: (s.label.clone(), s.key.clone()),
                end: (e.label.clone(), e.key.clone()),
                label: r.label.clone(),
                props: r.props.clone(),
                count: r.count,
            }
        })
        .collect();
    StatementBatch {
        bucket_index,
        n_source_records: t.meta.n_raw_records,
        node_statements,
        edge_statements,
        uncompressed: uncompressed_statement_count(&t.meta),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinkReport {
    pub committed: bool,
    /// Seconds, including retries and waiting for a pool slot.
    pub latency: f64,
    pub statements_applied: usize,
    pub attempts: u32,
    pub error: Option<String>,
    /// Set when the batch was written to the archive.
    pub archived: Option<PathBuf>,
}

/// A graph database, or something standing in for one.
pub trait GraphSink: Send {
    fn name(&self) -> &str;

    /// Applies one batch as a single transaction and returns its latency in
    /// seconds.
    fn apply(&mut self, batch: &StatementBatch) -> Result<f64, SinkError>;

    /// Lets one control step pass without work.
    fn idle(&mut self) {}

    /// Latest user CPU reading of the database host, if the sink has one.
    fn cpu_user(&self) -> Option<f64> {
        None
    }
}

/// Writes each batch to `batch-<bucket_index>.cypher`.
#[derive(Debug)]
pub struct FileSink {
    dir: PathBuf,
}

impl FileSink {
    pub fn new(dir: impl AsRef<Path>) -> Result<Self, SinkError> {
        std::fs::create_dir_all(dir.as_ref())?;
        Ok(Self { dir: dir.as_ref().to_path_buf() })
    }

    pub fn path_for(&self, bucket_index: u64) -> PathBuf {
        self.dir.join(format!("batch-{bucket_index}.cypher"))
    }
}

impl GraphSink for FileSink {
    fn name(&self) -> &str {
        "file"
    }

    fn apply(&mut self, batch: &StatementBatch) -> Result<f64, SinkError> {
        let start = Instant::now();
        std::fs::write(self.path_for(batch.bucket_index), batch.to_cypher())?;
        Ok(start.elapsed().as_secs_f64())
    }
}

/// Counting semaphore bounding batches in flight.
#[derive(Debug)]
pub struct InFlightLimiter {
    max: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

impl InFlightLimiter {
    pub fn new(max: usize) -> Self {
        Self { max: max.max(1), used: Mutex::new(0), freed: Condvar::new() }
    }

    pub fn capacity(&self) -> usize {
        self.max
    }

    pub fn in_flight(&self) -> usize {
        *self.used.lock().unwrap()
    }

    /// Blocks until a slot is free.
    pub fn acquire(self: &Arc<Self>) -> Permit {
        let mut used = self.used.lock().unwrap();
        while *used >= self.max {
            used = self.freed.wait(used).unwrap();
        }
        *used += 1;
        Permit { limiter: Arc::clone(self) }
    }
}

#[derive(Debug)]
pub struct Permit {
    limiter: Arc<InFlightLimiter>,
}

impl Drop for Permit {
    fn drop(&mut self) {
        *self.limiter.used.lock().unwrap() -= 1;
        self.limiter.freed.notify_one();
    }
}

/// Pushes batches with bounded retries and archives the ones that fail.
pub struct Committer {
    sink: Box<dyn GraphSink>,
    limiter: Arc<InFlightLimiter>,
    retries: u32,
    retry_backoff: Duration,
    archive: Option<Archive>,
    pub failed_batches: u64,
    pub archived_records: u64,
}

impl Committer {
    pub fn new(sink: Box<dyn GraphSink>) -> Self {
        Self {
            sink,
            limiter: Arc::new(InFlightLimiter::new(DEFAULT_POOL_SIZE)),
            retries: DEFAULT_RETRIES,
            retry_backoff: Duration::ZERO,
            archive: None,
            failed_batches: 0,
            archived_records: 0,
        }
    }

    pub fn with_pool(mut self, limiter: Arc<InFlightLimiter>) -> Self {
        self.limiter = limiter;
        self
    }

    pub fn with_retries(mut self, retries: u32, backoff: Duration) -> Self {
        self.retries = retries;
        self.retry_backoff = backoff;
        self
    }

    pub fn with_archive(mut self, archive: Archive) -> Self {
        self.archive = Some(archive);
        self
    }

    pub fn archive(&self) -> Option<&Archive> {
        self.archive.as_ref()
    }

    pub fn sink(&self) -> &dyn GraphSink {
        self.sink.as_ref()
    }

    pub fn sink_mut(&mut self) -> &mut dyn GraphSink {
        self.sink.as_mut()
    }

    /// Applies the batch; after `1 + retries` failed attempts it is archived
    /// together with the records it was built from.
    pub fn push(&mut self, batch: &StatementBatch, records: &[RawRecord]) -> SinkReport {
        let start = Instant::now();
        let _permit = self.limiter.acquire();
        let mut last_err = None;
        let mut attempts = 0;
        while attempts <= self.retries {
            attempts += 1;
            match self.sink.apply(batch) {
                Ok(latency) => {
                    return SinkReport {
                        committed: true,
                        latency: latency + start.elapsed().as_secs_f64(),
                        statements_applied: batch.statement_count(),
                        attempts,
                        error: None,
                        archived: None,
                    };
                }
                Err(e) => {
                    last_err = Some(e.to_string());
                    if attempts <= self.retries && !self.retry_backoff.is_zero() {
                        std::thread::sleep(self.retry_backoff);
                    }
                }
            }
        }
        self.failed_batches += 1;
        let mut error = last_err.unwrap_or_else(|| "no attempts made".into());
        let archived = match &self.archive {
            Some(a) => match a.store(batch, records) {
                Ok(path) => {
                    self.archived_records += records.len() as u64;
                    Some(path)
                }
                Err(e) => {
                    error = format!("{error}; archive failed: {e}");
                    None
                }
            },
            None => None,
        };
        SinkReport {
            committed: false,
            latency: start.elapsed().as_secs_f64(),
            statements_applied: 0,
            attempts,
            error: Some(error),
            archived,
        }
    }
}
