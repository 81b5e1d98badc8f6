//! The engine configuration file (`*.xmlcfg`).
//!
//! Relative paths are resolved against the directory holding the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::committer::MockCoefficients;
use crate::controller::ControllerConfig;
use crate::mapping::{load_mapping, tweet_mapping, MappingConfig};
use crate::predictor::{cpu_preset, BufferModel, ModelSet, PhiKind};
use crate::stream_source::{FilterSpec, Predicate, RateSchedule, RateSegment};

#[derive(Debug, Error)]
pub enum EngineConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config {path} is not valid: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("config has {} problem(s):\n  - {}", .0.len(), .0.join("\n  - "))]
    Invalid(Vec<String>),
}

fn is_default<T: Default + PartialEq>(v: &T) -> bool {
    *v == T::default()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PathsConfig {
    #[serde(rename = "@input")]
    pub input: PathBuf,
    /// Mapping file; the bundled tweet map when absent.
    #[serde(rename = "@mapping", default, skip_serializing_if = "Option::is_none")]
    pub mapping: Option<PathBuf>,
    #[serde(rename = "@spill_dir")]
    pub spill_dir: PathBuf,
    #[serde(rename = "@archive_dir")]
    pub archive_dir: PathBuf,
    #[serde(rename = "@telemetry")]
    pub telemetry: PathBuf,
    /// Machine-readable run report (JSON).
    #[serde(rename = "@report", default, skip_serializing_if = "Option::is_none")]
    pub report: Option<PathBuf>,
    /// Fitted models; overrides the predictor presets when present.
    #[serde(rename = "@model_file", default, skip_serializing_if = "Option::is_none")]
    pub model_file: Option<PathBuf>,
    #[serde(rename = "@shed_log", default, skip_serializing_if = "Option::is_none")]
    pub shed_log: Option<PathBuf>,
    /// Where the file sink writes `batch-*.cypher`.
    #[serde(rename = "@statements_dir", default, skip_serializing_if = "Option::is_none")]
    pub statements_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredicateXml {
    #[serde(rename = "@kind")]
    pub kind: String,
    #[serde(rename = "@path", default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(rename = "@value", default, skip_serializing_if = "Option::is_none")]
    pub value: Option<usize>,
}

impl PredicateXml {
    fn to_predicate(&self) -> Result<Predicate, String> {
        match (self.kind.as_str(), &self.path, self.value) {
            ("reject-if-only-emoji", None, None) => Ok(Predicate::RejectIfOnlyEmoji),
            ("require-field-present", Some(p), None) => Ok(Predicate::RequireFieldPresent(p.clone())),
            ("min-text-length", None, Some(n)) => Ok(Predicate::MinTextLength(n)),
            (k, _, _) => Err(format!(
                "filter predicate `{k}` is unknown or has the wrong attributes \
                 (reject-if-only-emoji | require-field-present path=.. | min-text-length value=..)"
            )),
        }
    }

    fn from_predicate(p: &Predicate) -> Self {
        let (kind, path, value) = match p {
            Predicate::RejectIfOnlyEmoji => ("reject-if-only-emoji", None, None),
            Predicate::RequireFieldPresent(path) => ("require-field-present", Some(path.clone()), None),
            Predicate::MinTextLength(n) => ("min-text-length", None, Some(*n)),
        };
        Self { kind: kind.into(), path, value }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    #[serde(rename = "@text_path")]
    pub text_path: String,
    #[serde(rename = "@keyword_filtering", default)]
    pub keyword_filtering: bool,
    #[serde(rename = "keyword", default)]
    pub keywords: Vec<String>,
    #[serde(rename = "predicate", default)]
    pub predicates: Vec<PredicateXml>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self::from_spec(&FilterSpec::default())
    }
}

impl FilterConfig {
    pub fn from_spec(f: &FilterSpec) -> Self {
        Self {
            text_path: f.text_path.clone(),
            keyword_filtering: f.keyword_filtering,
            keywords: f.keywords.clone(),
            predicates: f.predicates.iter().map(PredicateXml::from_predicate).collect(),
        }
    }

    pub fn to_spec(&self) -> Result<FilterSpec, Vec<String>> {
        let mut errs = Vec::new();
        let predicates =
            self.predicates.iter().filter_map(|p| p.to_predicate().map_err(|e| errs.push(e)).ok()).collect();
        let spec = FilterSpec {
            text_path: self.text_path.clone(),
            keyword_filtering: self.keyword_filtering,
            keywords: self.keywords.clone(),
            predicates,
        };
        if let Err(e) = spec.validate() {
            errs.push(e.to_string());
        }
        if errs.is_empty() {
            Ok(spec)
        } else {
            Err(errs)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    #[serde(rename = "@cpu_preset")]
    pub cpu_preset: String,
    #[serde(rename = "@buffer_k")]
    pub buffer_k: f64,
    #[serde(rename = "@buffer_r")]
    pub buffer_r: f64,
    #[serde(rename = "@buffer_intercept", default)]
    pub buffer_intercept: f64,
    #[serde(rename = "@phi1")]
    pub phi1: PhiKind,
    #[serde(rename = "@phi2")]
    pub phi2: PhiKind,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        let b = BufferModel::default();
        Self {
            cpu_preset: "table1g-50".into(),
            buffer_k: b.k,
            buffer_r: b.r,
            buffer_intercept: b.intercept,
            phi1: b.phi1,
            phi2: b.phi2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SinkKind {
    #[default]
    Mock,
    File,
    Wire,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireConfig {
    #[serde(rename = "@url")]
    pub url: String,
    #[serde(rename = "@database")]
    pub database: String,
    #[serde(rename = "@user")]
    pub user: String,
    /// Environment variable holding the password.
    #[serde(rename = "@password_env")]
    pub password_env: String,
    #[serde(rename = "@timeout_s")]
    pub timeout_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SinkConfig {
    #[serde(rename = "@kind", default)]
    pub kind: SinkKind,
    #[serde(rename = "@pool_size")]
    pub pool_size: usize,
    #[serde(rename = "@retries")]
    pub retries: u32,
    #[serde(rename = "@backoff_ms")]
    pub backoff_ms: u64,
    /// Starts the mock store unreachable, for outage drills.
    #[serde(rename = "@offline", default)]
    pub offline: bool,
    #[serde(default)]
    pub mock: MockCoefficients,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wire: Option<WireConfig>,
}

impl Default for SinkConfig {
    fn default() -> Self {
        Self {
            kind: SinkKind::Mock,
            pool_size: crate::committer::DEFAULT_POOL_SIZE,
            retries: crate::committer::DEFAULT_RETRIES,
            backoff_ms: 0,
            offline: false,
            mock: MockCoefficients::default(),
            wire: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SpillConfig {
    /// Records per segment file; 0 writes one segment per spilled bucket.
    #[serde(rename = "@segment_records", default)]
    pub segment_records: usize,
    #[serde(rename = "@max_bytes", default, skip_serializing_if = "Option::is_none")]
    pub max_bytes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(rename = "@run_id")]
    pub run_id: String,
    /// Cuts the schedule short when set.
    #[serde(rename = "@duration_s", default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
    #[serde(rename = "@realtime", default)]
    pub realtime: bool,
    #[serde(rename = "@queue_bound")]
    pub queue_bound: usize,
    #[serde(rename = "@max_drain_ticks")]
    pub max_drain_ticks: u64,
    #[serde(rename = "@mem_available")]
    pub mem_available: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let o = crate::controller::RunOptions::default();
        Self {
            run_id: "run".into(),
            duration_s: None,
            realtime: false,
            queue_bound: 100_000,
            max_drain_ticks: o.max_drain_ticks,
            mem_available: o.mem_available,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename = "engine")]
pub struct EngineConfig {
    pub paths: PathsConfig,
    pub schedule: RateSchedule,
    #[serde(default, skip_serializing_if = "is_default")]
    pub filter: FilterConfig,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub predictor: PredictorConfig,
    #[serde(default)]
    pub sink: SinkConfig,
    #[serde(default)]
    pub spill: SpillConfig,
    #[serde(default)]
    pub run: RunConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            paths: PathsConfig {
                input: "data/tweets.jsonl".into(),
                spill_dir: "out/spill".into(),
                archive_dir: "out/archive".into(),
                telemetry: "out/telemetry.csv".into(),
                ..PathsConfig::default()
            },
            schedule: RateSchedule::new(vec![RateSegment::new(60.0, 5.0, 0.0)], 7),
            filter: FilterConfig::default(),
            controller: ControllerConfig::default(),
            predictor: PredictorConfig::default(),
            sink: SinkConfig::default(),
            spill: SpillConfig::default(),
            run: RunConfig::default(),
        }
    }
}

impl EngineConfig {
    pub fn from_xml(text: &str) -> Result<Self, String> {
        quick_xml::de::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_xml(&self) -> String {
        let mut out = String::new();
        let mut ser = quick_xml::se::Serializer::new(&mut out);
        ser.indent(' ', 2);
        self.serialize(ser).expect("engine config serializes");
        out.push('\n');
        out
    }

    /// Parses and validates a config file, resolving its relative paths.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, EngineConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| EngineConfigError::Read { path: path.to_path_buf(), source })?;
        let mut cfg =
            Self::from_xml(&text).map_err(|message| EngineConfigError::Parse { path: path.to_path_buf(), message })?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        let errs = cfg.validate();
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(EngineConfigError::Invalid(errs))
        }
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let p = &mut self.paths;
        for path in [&mut p.input, &mut p.spill_dir, &mut p.archive_dir, &mut p.telemetry] {
            fix(path);
        }
        for path in [&mut p.mapping, &mut p.report, &mut p.model_file, &mut p.shed_log, &mut p.statements_dir]
            .into_iter()
            .flatten()
        {
            fix(path);
        }
    }

    /// Every problem found, not just the first.
    pub fn validate(&self) -> Vec<String> {
        let mut errs: Vec<String> = Vec::new();
        if !self.paths.input.is_file() {
            errs.push(format!("input file {} does not exist", self.paths.input.display()));
        }
        if let Some(m) = &self.paths.mapping {
            if let Err(e) = load_mapping(m) {
                errs.push(format!("mapping {}: {e}", m.display()));
            }
        }
        if let Some(m) = &self.paths.model_file {
            if let Err(e) = ModelSet::load(m) {
                errs.push(e.to_string());
            }
        }
        if let Err(e) = self.schedule.validate() {
            errs.push(e.to_string());
        }
        if let Err(fe) = self.filter.to_spec() {
            errs.extend(fe);
        }
        errs.extend(self.controller.validate().into_iter().map(|e| e.to_string()));
        if let Err(e) = cpu_preset(&self.predictor.cpu_preset) {
            errs.push(e.to_string());
        }
        if self.sink.pool_size == 0 {
            errs.push("sink pool_size must be at least 1".into());
        }
        let m = &self.sink.mock;
        if !(0.0..1.0).contains(&m.a) || m.b < 0.0 || m.sigma < 0.0 {
            errs.push(format!(
                "mock coefficients need 0 <= a < 1, b >= 0, sigma >= 0 (a={}, b={}, sigma={})",
                m.a, m.b, m.sigma
            ));
        }
        match self.sink.kind {
            SinkKind::File if self.paths.statements_dir.is_none() => {
                errs.push("file sink needs paths/@statements_dir".into());
            }
            SinkKind::Wire if self.sink.wire.is_none() => errs.push("wire sink needs a <wire> element".into()),
            SinkKind::Wire if !cfg!(feature = "wire") => {
                errs.push("wire sink requires building with the `wire` feature".into());
            }
            _ => {}
        }
        if let Some(d) = self.run.duration_s {
            if !(d > 0.0) {
                errs.push(format!("run duration_s must be positive, got {d}"));
            }
        }
        if self.run.queue_bound == 0 {
            errs.push("run queue_bound must be at least 1".into());
        }
        if self.run.run_id.is_empty() || self.run.run_id.contains(['/', '\\']) {
            errs.push(format!("run_id `{}` must be a non-empty plain name", self.run.run_id));
        }
        errs
    }

    pub fn mapping(&self) -> Result<MappingConfig, String> {
        match &self.paths.mapping {
            Some(p) => load_mapping(p).map_err(|e| format!("mapping {}: {e}", p.display())),
            None => Ok(tweet_mapping()),
        }
    }

    /// The model file if configured, else the presets.
    pub fn models(&self) -> Result<ModelSet, String> {
        if let Some(p) = &self.paths.model_file {
            return ModelSet::load(p).map_err(|e| e.to_string());
        }
        let p = &self.predictor;
        Ok(ModelSet {
            buffer: BufferModel {
                k: p.buffer_k,
                r: p.buffer_r,
                phi1: p.phi1,
                phi2: p.phi2,
                intercept: p.buffer_intercept,
            },
            cpu: cpu_preset(&p.cpu_preset).map_err(|e| e.to_string())?,
        })
    }

    /// The schedule, truncated to the configured run duration.
    pub fn effective_schedule(&self) -> RateSchedule {
        let Some(limit) = self.run.duration_s else {
            return self.schedule.clone();
        };
        let mut left = limit;
        let mut segments = Vec::new();
        for seg in &self.schedule.segments {
            if left <= 0.0 {
                break;
            }
            let d = seg.duration_s.min(left);
            segments.push(RateSegment { duration_s: d, ..*seg });
            left -= d;
        }
        RateSchedule::new(segments, self.schedule.seed)
    }
}
