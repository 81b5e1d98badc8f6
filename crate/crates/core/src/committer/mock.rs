//! In-memory graph store with a synthetic CPU response.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{GraphSink, NodeKey, SinkError, SinkReport, Statement, StatementBatch};
use crate::mapping::Props;

/// `μ[n] = clamp(a·μ[n-1] + b·ln(1 + S) + c + N(0, σ), 0, 100)` and
/// `latency = latency_base + latency_per_statement·S`, scaled by
/// `1 / (1 - μ/100)` once μ exceeds 90.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockCoefficients {
    #[serde(rename = "@a")]
    pub a: f64,
    #[serde(rename = "@b")]
    pub b: f64,
    #[serde(rename = "@c")]
    pub c: f64,
    #[serde(rename = "@sigma")]
    pub sigma: f64,
    #[serde(rename = "@latency_base")]
    pub latency_base: f64,
    #[serde(rename = "@latency_per_statement")]
    pub latency_per_statement: f64,
    #[serde(rename = "@seed")]
    pub seed: u64,
}

impl Default for MockCoefficients {
    fn default() -> Self {
        Self { a: 0.6, b: 8.0, c: 5.0, sigma: 1.0, latency_base: 0.005, latency_per_statement: 0.0002, seed: 7 }
    }
}

const CONGESTION_FLOOR: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeState {
    pub props: Props,
    pub count: u64,
}

/// Store contents plus the CPU state driving the response model.
#[derive(Debug, Clone)]
pub struct MockDbState {
    pub nodes: BTreeMap<NodeKey, Props>,
    pub edges: BTreeMap<(NodeKey, NodeKey, String), EdgeState>,
    pub coefficients: MockCoefficients,
    pub mu: f64,
    pub steps: u64,
    /// Edge statements whose endpoints were missing when applied.
    pub unmatched_edges: u64,
    /// Number of upcoming pushes to reject.
    pub fail_next: u32,
    /// Rejects every push while set.
    pub down: bool,
    rng: ChaCha8Rng,
}

impl MockDbState {
    pub fn new(coefficients: MockCoefficients) -> Self {
        let idle = if coefficients.a < 1.0 { (coefficients.c / (1.0 - coefficients.a)).clamp(0.0, 100.0) } else { 0.0 };
        Self {
            nodes: BTreeMap::new(),
            edges: BTreeMap::new(),
            coefficients,
            mu: idle,
            steps: 0,
            unmatched_edges: 0,
            fail_next: 0,
            down: false,
            rng: ChaCha8Rng::seed_from_u64(coefficients.seed),
        }
    }

    /// Advances the CPU model by one step under `statements` of load.
    pub fn advance(&mut self, statements: usize) -> f64 {
        let k = self.coefficients;
        let noise =
            if k.sigma > 0.0 { Normal::new(0.0, k.sigma).expect("finite sigma").sample(&mut self.rng) } else { 0.0 };
        self.mu = (k.a * self.mu + k.b * (1.0 + statements as f64).ln() + k.c + noise).clamp(0.0, 100.0);
        self.steps += 1;
        self.mu
    }

    pub fn latency_for(&self, statements: usize) -> f64 {
        let k = self.coefficients;
        let base = k.latency_base + k.latency_per_statement * statements as f64;
        if self.mu > 90.0 {
            base / (1.0 - self.mu / 100.0).max(CONGESTION_FLOOR)
        } else {
            base
        }
    }

    /// MERGE semantics: nodes and edges are created once, later statements
    /// only fill node properties that are still absent, and edge counts accumulate.
    pub fn apply_statements(&mut self, batch: &StatementBatch) {
        for st in batch.statements() {
            match st {
                Statement::Node { label, key, props } => {
                    let node = self.nodes.entry((label.clone(), key.clone())).or_default();
                    for (k, v) in props {
                        node.entry(k.clone()).or_insert_with(|| v.clone());
                    }
                }
                Statement::Edge { start, end, label, props, count } => {
                    if !self.nodes.contains_key(start) || !self.nodes.contains_key(end) {
                        self.unmatched_edges += 1;
                        continue;
                    }
                    self.edges
                        .entry((start.clone(), end.clone(), label.clone()))
                        .and_modify(|e| e.count += count)
                        .or_insert_with(|| EdgeState { props: props.clone(), count: *count });
                }
            }
        }
    }

    /// Problems found by the referential-integrity audit; empty when clean.
    pub fn audit(&self) -> Vec<String> {
        let mut problems: Vec<String> = self
            .edges
            .keys()
            .filter(|(s, e, _)| !self.nodes.contains_key(s) || !self.nodes.contains_key(e))
            .map(|(s, e, l)| format!("dangling edge {}:{} -[{l}]-> {}:{}", s.0, s.1, e.0, e.1))
            .collect();
        if self.unmatched_edges > 0 {
            problems.push(format!("{} edge statements referenced missing nodes", self.unmatched_edges));
        }
        problems
    }

    pub fn total_edge_count(&self) -> u64 {
        self.edges.values().map(|e| e.count).sum()
    }
}

/// One push against the mock: apply the batch, step the CPU model, report.
pub fn mock_sink_step(state: &mut MockDbState, b: &StatementBatch) -> SinkReport {
    if state.down || state.fail_next > 0 {
        state.fail_next = state.fail_next.saturating_sub(1);
        return SinkReport {
            committed: false,
            latency: 0.0,
            statements_applied: 0,
            attempts: 1,
            error: Some("mock database is down".into()),
            archived: None,
        };
    }
    state.apply_statements(b);
    state.advance(b.statement_count());
    SinkReport {
        committed: true,
        latency: state.latency_for(b.statement_count()),
        statements_applied: b.statement_count(),
        attempts: 1,
        error: None,
        archived: None,
    }
}

/// [`GraphSink`] over a shared [`MockDbState`].
#[derive(Debug, Clone)]
pub struct MockSink {
    state: Arc<Mutex<MockDbState>>,
}

impl MockSink {
    pub fn new(coefficients: MockCoefficients) -> Self {
        Self { state: Arc::new(Mutex::new(MockDbState::new(coefficients))) }
    }

    /// Shared handle for inspecting the store from outside the pipeline.
    pub fn handle(&self) -> Arc<Mutex<MockDbState>> {
        Arc::clone(&self.state)
    }

    pub fn state(&self) -> MutexGuard<'_, MockDbState> {
        self.state.lock().expect("mock state poisoned")
    }
}

impl GraphSink for MockSink {
    fn name(&self) -> &str {
        "mock"
    }

    fn apply(&mut self, batch: &StatementBatch) -> Result<f64, SinkError> {
        let report = mock_sink_step(&mut self.state(), batch);
        match report.error {
            None => Ok(report.latency),
            Some(e) => Err(SinkError::Unavailable(e)),
        }
    }

    fn idle(&mut self) {
        self.state().advance(0);
    }

    fn cpu_user(&self) -> Option<f64> {
        Some(self.state().mu)
    }
}
