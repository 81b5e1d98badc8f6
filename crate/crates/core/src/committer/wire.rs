//! Neo4j sink over the HTTP transactional endpoint.

use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::{GraphSink, SinkError, StatementBatch};

#[derive(Debug)]
pub struct WireSink {
    client: reqwest::blocking::Client,
    commit_url: String,
    user: String,
    password: String,
}

impl WireSink {
    /// `base_url` like `http://localhost:7474`, `database` like `neo4j`.
    pub fn new(
        base_url: &str,
        database: &str,
        user: &str,
        password: &str,
        timeout: Duration,
    ) -> Result<Self, SinkError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| SinkError::Unavailable(e.to_string()))?;
        Ok(Self {
            client,
            commit_url: format!("{}/db/{database}/tx/commit", base_url.trim_end_matches('/')),
            user: user.to_string(),
            password: password.to_string(),
        })
    }
}

impl GraphSink for WireSink {
    fn name(&self) -> &str {
        "wire"
    }

    fn apply(&mut self, batch: &StatementBatch) -> Result<f64, SinkError> {
        let statements: Vec<Value> = batch.statements().map(|s| json!({ "statement": s.to_cypher() })).collect();
        let start = Instant::now();
        let resp = self
            .client
            .post(&self.commit_url)
            .basic_auth(&self.user, Some(&self.password))
            .json(&json!({ "statements": statements }))
            .send()
            .map_err(|e| SinkError::Unavailable(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(SinkError::Unavailable(format!("HTTP {}", resp.status())));
        }
        let body: Value = resp.json().map_err(|e| SinkError::Rejected(e.to_string()))?;
        if let Some(errors) = body.get("errors").and_then(Value::as_array) {
            if let Some(first) = errors.first() {
                return Err(SinkError::Rejected(first.to_string()));
            }
        }
        Ok(start.elapsed().as_secs_f64())
    }
}
