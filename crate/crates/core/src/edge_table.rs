//! Deduplicated, edge-centric staging structure for one bucket.
//!
//! Every distinct `(start, end, label)` triple is stored once; repeats bump
//! its `count`. Nodes live in a [`NodeIndex`] keyed by `(label, key)`, each
//! carrying an adjacency list so duplicate detection is a single lookup.
//! Edges are directed: `(A, B, L)` and `(B, A, L)` are different rows.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde_json::Value;

use crate::mapping::{MappingConfig, NodeRef, Props};
use crate::stream_source::RawRecord;

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Out,
    In,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeRecord {
    pub label: String,
    pub key: String,
    pub props: Props,
    /// (neighbor, edge label, direction seen from this node).
    pub adjacency: Vec<(NodeId, String, Direction)>,
}

impl NodeRecord {
    pub fn identity(&self) -> String {
        format!("{}:{}", self.label, self.key)
    }

    pub fn to_ref(&self) -> NodeRef {
        NodeRef { label: self.label.clone(), key: self.key.clone(), props: self.props.clone() }
    }
}

/// Node lookup by `(label, key)`; insertion order is preserved.
#[derive(Debug, Clone, Default)]
pub struct NodeIndex {
    nodes: Vec<NodeRecord>,
    by_key: HashMap<(String, String), NodeId>,
}

impl NodeIndex {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn get(&self, label: &str, key: &str) -> Option<&NodeRecord> {
        self.id_of(label, key).map(|id| &self.nodes[id])
    }

    pub fn id_of(&self, label: &str, key: &str) -> Option<NodeId> {
        self.by_key.get(&(label.to_string(), key.to_string())).copied()
    }

    pub fn node(&self, id: NodeId) -> &NodeRecord {
        &self.nodes[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &NodeRecord> {
        self.nodes.iter()
    }

    /// Inserts the node or fills in properties it did not have yet.
    fn upsert(&mut self, node: &NodeRef) -> NodeId {
        let key = (node.label.clone(), node.key.clone());
        match self.by_key.get(&key) {
            Some(&id) => {
                let existing = &mut self.nodes[id].props;
                for (k, v) in &node.props {
                    existing.entry(k.clone()).or_insert_with(|| v.clone());
                }
                id
            }
            None => {
                let id = self.nodes.len();
                self.nodes.push(NodeRecord {
                    label: node.label.clone(),
                    key: node.key.clone(),
                    props: node.props.clone(),
                    adjacency: Vec::new(),
                });
                self.by_key.insert(key, id);
                id
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeRow {
    pub edge_id: u64,
    pub start: NodeId,
    pub end: NodeId,
    pub label: String,
    /// Edge properties other than `count`.
    pub props: Props,
    /// Multiplicity of the edge within the bucket; always at least 1.
    pub count: u64,
}

/// Bookkeeping carried alongside the rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TableMeta {
    pub n_raw_records: u64,
    /// Edge tuples seen, duplicates included.
    pub n_extracted_edges: u64,
    /// Node occurrences from node-type key paths that no edge tuple of the
    /// same record already covers.
    pub n_node_occurrences: u64,
    /// Tuples dropped for missing keys.
    pub n_skipped_tuples: u64,
    pub first_ts: Option<u64>,
    pub last_ts: Option<u64>,
}

impl TableMeta {
    fn absorb_ts(&mut self, ts: u64) {
        self.first_ts = Some(self.first_ts.map_or(ts, |f| f.min(ts)));
        self.last_ts = Some(self.last_ts.map_or(ts, |l| l.max(ts)));
    }
}

#[derive(Debug, Clone, Default)]
pub struct EdgeTable {
    rows: Vec<EdgeRow>,
    index: NodeIndex,
    lookup: HashMap<(NodeId, NodeId, String), usize>,
    pub meta: TableMeta,
}

impl EdgeTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rows(&self) -> &[EdgeRow] {
        &self.rows
    }

    pub fn index(&self) -> &NodeIndex {
        &self.index
    }

    pub fn n_nodes(&self) -> usize {
        self.index.len()
    }

    pub fn n_edges(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty() && self.index.is_empty()
    }

    pub fn total_count(&self) -> u64 {
        self.rows.iter().map(|r| r.count).sum()
    }

    /// Nodes plus edges: the statement count after compression.
    pub fn effective_size(&self) -> usize {
        self.n_nodes() + self.n_edges()
    }

    pub fn find(&self, start: &NodeRef, end: &NodeRef, label: &str) -> Option<&EdgeRow> {
        let s = self.index.id_of(&start.label, &start.key)?;
        let e = self.index.id_of(&end.label, &end.key)?;
        self.lookup.get(&(s, e, label.to_string())).map(|&i| &self.rows[i])
    }

    pub fn insert_node(&mut self, node: &NodeRef) -> NodeId {
        self.index.upsert(node)
    }

    /// Upserts one edge occurrence.
    pub fn insert_edge(&mut self, start: &NodeRef, end: &NodeRef, label: &str, props: &Props) {
        self.insert_edge_counted(start, end, label, props, 1);
    }

    fn insert_edge_counted(&mut self, start: &NodeRef, end: &NodeRef, label: &str, props: &Props, count: u64) {
        let s = self.index.upsert(start);
        let e = self.index.upsert(end);
        self.insert_by_id(s, e, label, props, count);
    }

    fn insert_by_id(&mut self, s: NodeId, e: NodeId, label: &str, props: &Props, count: u64) {
        let key = (s, e, label.to_string());
        if let Some(&i) = self.lookup.get(&key) {
            let row = &mut self.rows[i];
            row.count += count;
            for (k, v) in props {
                row.props.entry(k.clone()).or_insert_with(|| v.clone());
            }
            return;
        }
        let edge_id = self.rows.len() as u64;
        self.rows.push(EdgeRow { edge_id, start: s, end: e, label: label.to_string(), props: props.clone(), count });
        self.lookup.insert(key, self.rows.len() - 1);
        self.index.nodes[s].adjacency.push((e, label.to_string(), Direction::Out));
        self.index.nodes[e].adjacency.push((s, label.to_string(), Direction::In));
    }

    /// Adds one record's extraction to the table.
    pub fn ingest(&mut self, r: &RawRecord, m: &MappingConfig) {
        let ex = m.extract(r);
        self.meta.n_raw_records += 1;
        self.meta.absorb_ts(r.arrival_ts);
        let covered = |n: &NodeRef| {
            ex.edges.iter().any(|e| {
                (e.start.label == n.label && e.start.key == n.key) || (e.end.label == n.label && e.end.key == n.key)
            })
        };
        self.meta.n_node_occurrences += ex.nodes.iter().filter(|n| !covered(n)).count() as u64;
        self.meta.n_extracted_edges += ex.edges.len() as u64;
        self.meta.n_skipped_tuples += ex.skipped;
        for n in &ex.nodes {
            self.insert_node(n);
        }
        for e in &ex.edges {
            self.insert_edge(&e.start, &e.end, &e.label, &e.props);
        }
    }

    pub fn start_of(&self, row: &EdgeRow) -> &NodeRecord {
        self.index.node(row.start)
    }

    pub fn end_of(&self, row: &EdgeRow) -> &NodeRecord {
        self.index.node(row.end)
    }

    /// Writes `rows.csv` and `nodes.csv` into `dir`.
    pub fn dump_csv(&self, dir: impl AsRef<Path>) -> std::io::Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut rows = csv::Writer::from_path(dir.join("rows.csv"))?;
        rows.write_record(["edge_id", "start", "end", "label", "count", "props"])?;
        for r in &self.rows {
            rows.write_record([
                r.edge_id.to_string(),
                self.start_of(r).identity(),
                self.end_of(r).identity(),
                r.label.clone(),
                r.count.to_string(),
                props_json(&r.props),
            ])?;
        }
        rows.flush()?;
        let mut nodes = csv::Writer::from_path(dir.join("nodes.csv"))?;
        nodes.write_record(["identity", "label", "key", "degree", "props"])?;
        for n in self.index.iter() {
            nodes.write_record([
                n.identity(),
                n.label.clone(),
                n.key.clone(),
                n.adjacency.len().to_string(),
                props_json(&n.props),
            ])?;
        }
        nodes.flush()?;
        let mut f = std::fs::File::create(dir.join("meta.txt"))?;
        writeln!(f, "{:?}", self.meta)
    }
}

fn props_json(p: &Props) -> String {
    Value::Object(p.clone().into_iter().collect()).to_string()
}

/// Builds the bucket's table from a batch of records.
pub fn create_edges(batch: &[RawRecord], m: &MappingConfig) -> EdgeTable {
    let mut t = EdgeTable::new();
    for r in batch {
        t.ingest(r, m);
    }
    t
}

/// Builds partial tables on `workers` threads and merges them in order.
pub fn create_edges_parallel(batch: &[RawRecord], m: &MappingConfig, workers: usize) -> EdgeTable {
    let workers = workers.max(1);
    if workers == 1 || batch.len() < 2 * workers {
        return create_edges(batch, m);
    }
    let chunk = batch.len().div_ceil(workers);
    let parts: Vec<EdgeTable> = std::thread::scope(|scope| {
        let handles: Vec<_> = batch.chunks(chunk).map(|part| scope.spawn(move || create_edges(part, m))).collect();
        handles.into_iter().map(|h| h.join().expect("edge table worker panicked")).collect()
    });
    merge_tables(parts)
}

/// Folds partial tables into one. Ids are reassigned; counts add up.
pub fn merge_tables(parts: impl IntoIterator<Item = EdgeTable>) -> EdgeTable {
    let mut out = EdgeTable::new();
    for part in parts {
        let remap: Vec<NodeId> = part.index.iter().map(|n| out.index.upsert(&n.to_ref())).collect();
        for row in &part.rows {
            out.insert_by_id(remap[row.start], remap[row.end], &row.label, &row.props, row.count);
        }
        let m = &part.meta;
        out.meta.n_raw_records += m.n_raw_records;
        out.meta.n_extracted_edges += m.n_extracted_edges;
        out.meta.n_node_occurrences += m.n_node_occurrences;
        out.meta.n_skipped_tuples += m.n_skipped_tuples;
        for ts in [m.first_ts, m.last_ts].into_iter().flatten() {
            out.meta.absorb_ts(ts);
        }
    }
    out
}
