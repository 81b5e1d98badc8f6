//! Command-line entry point: run scenarios, fit models, summarize telemetry.

pub mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};
use thiserror::Error;

pub use config::{EngineConfig, EngineConfigError, SinkKind};

use crate::committer::{Archive, Committer, FileSink, GraphSink, InFlightLimiter, MockSink};
use crate::controller::{run_loop, EngineError, RunOptions, RunReport, SpillQueue};
use crate::predictor::{
    candidate_basis_sweep, cpu_preset, fit_buffer_model, fit_cpu_model_reduced, format_sweep, BufferModel,
    BufferSample, CpuSample, FitReport, ModelSet, PhiKind, SweepEntry, CANDIDATE_BASES,
};
use crate::stream_source::{open_replay, PacedFeed, RecordFeed, VirtualFeed};
use crate::synth::{write_corpus, CorpusSpec};
use crate::telemetry::{read_telemetry, TelemetryError, TelemetryRow};

pub const MIN_FIT_ROWS: usize = 100;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] EngineConfigError),
    #[error("setup failed: {0}")]
    Setup(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error("telemetry has {rows} usable rows; fitting needs at least {needed}")]
    InsufficientRows { rows: usize, needed: usize },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            _ => 2,
        }
    }
}

fn io_ctx(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

pub struct RunOutcome {
    pub report: RunReport,
    /// Handle on the in-memory store when the mock sink was used.
    pub mock: Option<MockSink>,
}

/// Wires every component from the config and runs the pipeline once.
pub fn run_config(cfg: &EngineConfig) -> Result<RunOutcome, CliError> {
    let mapping = cfg.mapping().map_err(CliError::Setup)?;
    let filter = cfg.filter.to_spec().map_err(|e| CliError::Setup(e.join("; ")))?;
    let models = cfg.models().map_err(CliError::Setup)?;
    let replay = open_replay(&cfg.paths.input, cfg.effective_schedule()).map_err(|e| CliError::Setup(e.to_string()))?;
    let mut feed: Box<dyn RecordFeed> = if cfg.run.realtime {
        Box::new(PacedFeed::start(replay, cfg.run.queue_bound))
    } else {
        Box::new(VirtualFeed::new(replay))
    };

    let mut mock = None;
    let sink: Box<dyn GraphSink> = match cfg.sink.kind {
        SinkKind::Mock => {
            let m = MockSink::new(cfg.sink.mock);
            m.handle().lock().expect("mock state lock").down = cfg.sink.offline;
            mock = Some(m.clone());
            Box::new(m)
        }
        SinkKind::File => {
            let dir = cfg.paths.statements_dir.as_ref().ok_or_else(|| CliError::Setup("no statements_dir".into()))?;
            Box::new(FileSink::new(dir).map_err(|e| CliError::Setup(e.to_string()))?)
        }
        SinkKind::Wire => wire_sink(cfg)?,
    };
    let archive = Archive::new(&cfg.paths.archive_dir, &cfg.run.run_id).map_err(|e| CliError::Setup(e.to_string()))?;
    let mut committer = Committer::new(sink)
        .with_pool(Arc::new(InFlightLimiter::new(cfg.sink.pool_size)))
        .with_retries(cfg.sink.retries, Duration::from_millis(cfg.sink.backoff_ms))
        .with_archive(archive);
    let mut spill = SpillQueue::open(&cfg.paths.spill_dir, cfg.spill.max_bytes)
        .map_err(|e| CliError::Setup(e.to_string()))?
        .with_segment_records(cfg.spill.segment_records);
    let opts = RunOptions {
        max_drain_ticks: cfg.run.max_drain_ticks,
        realtime: cfg.run.realtime,
        mem_available: cfg.run.mem_available,
        telemetry: Some(cfg.paths.telemetry.clone()),
        shed_log: cfg.paths.shed_log.clone(),
    };
    let report =
        run_loop(feed.as_mut(), &mapping, &filter, &cfg.controller, models, &mut committer, &mut spill, &opts)?;
    if let Some(path) = &cfg.paths.report {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_ctx(format!("creating {}", parent.display())))?;
        }
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(path, json).map_err(io_ctx(format!("writing {}", path.display())))?;
    }
    Ok(RunOutcome { report, mock })
}

#[cfg(feature = "wire")]
fn wire_sink(cfg: &EngineConfig) -> Result<Box<dyn GraphSink>, CliError> {
    let w = cfg.sink.wire.as_ref().ok_or_else(|| CliError::Setup("no <wire> element".into()))?;
    let password = std::env::var(&w.password_env).unwrap_or_default();
    let sink =
        crate::committer::WireSink::new(&w.url, &w.database, &w.user, &password, Duration::from_secs_f64(w.timeout_s))
            .map_err(|e| CliError::Setup(e.to_string()))?;
    Ok(Box::new(sink))
}

#[cfg(not(feature = "wire"))]
fn wire_sink(_: &EngineConfig) -> Result<Box<dyn GraphSink>, CliError> {
    Err(CliError::Setup("wire sink requires building with the `wire` feature".into()))
}

/// Fitted models plus everything needed to explain them.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub models: ModelSet,
    pub sweep: Vec<SweepEntry>,
    pub buffer_report: Option<FitReport>,
    pub cpu_report: Option<FitReport>,
    pub notes: Vec<String>,
}

impl FitOutcome {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "CPU model candidates (sorted by MSE):");
        s.push_str(&format_sweep(&self.sweep));
        let c = &self.models.cpu;
        let _ = writeln!(s, "\nselected CPU model: {}  A={:.6} B={:.6} c={:.6}", c.basis, c.a, c.b, c.c);
        let b = &self.models.buffer;
        let _ = writeln!(s, "buffer model: K={:.6} R={:.6} intercept={:.6}", b.k, b.r, b.intercept);
        if let Some(r) = &self.buffer_report {
            let _ = writeln!(s, "buffer fit: MAE={:.6} MSE={:.6} RMSE={:.6} n={}", r.mae, r.mse, r.rmse, r.n_samples);
        }
        for n in &self.notes {
            let _ = writeln!(s, "note: {n}");
        }
        s
    }
}

/// Samples for the CPU model: the load pushed against the readings around it.
pub fn cpu_samples(rows: &[TelemetryRow]) -> Vec<CpuSample> {
    rows.iter().map(|r| CpuSample { mu_prev: r.mu_prev, beta: r.pushed as f64, mu: r.mu_user }).collect()
}

/// Samples for the buffer model, in statements per pending record.
pub fn buffer_samples(rows: &[TelemetryRow]) -> Vec<BufferSample> {
    rows.iter()
        .filter(|r| r.records > 0)
        .map(|r| BufferSample { rho: r.rho, d: r.d, beta_e: r.beta_e as f64 / r.records as f64 })
        .collect()
}

pub fn fit_models(rows: &[TelemetryRow], phi1: PhiKind, phi2: PhiKind) -> Result<FitOutcome, CliError> {
    if rows.len() < MIN_FIT_ROWS {
        return Err(CliError::InsufficientRows { rows: rows.len(), needed: MIN_FIT_ROWS });
    }
    let mut notes = Vec::new();
    let samples = cpu_samples(rows);
    let sweep = candidate_basis_sweep(&samples);
    let (cpu, cpu_report) = match sweep.iter().find_map(|e| e.outcome.as_ref().ok()) {
        Some((m, r)) => (*m, Some(r.clone())),
        None => {
            notes.push("every candidate basis was rank deficient; fitted with collinear columns dropped".into());
            match fit_cpu_model_reduced(&samples, CANDIDATE_BASES[0].1) {
                Ok((m, r)) => (m, Some(r)),
                Err(e) => return Err(CliError::Setup(format!("CPU model fit failed: {e}"))),
            }
        }
    };
    let bsamples = buffer_samples(rows);
    let (buffer, buffer_report) = match fit_buffer_model(&bsamples, phi1, phi2) {
        Ok((m, r)) => (m, Some(r)),
        Err(e) => {
            notes.push(format!("buffer model not fitted ({e}); keeping the default coefficients"));
            (BufferModel { phi1, phi2, ..BufferModel::default() }, None)
        }
    };
    Ok(FitOutcome { models: ModelSet { buffer, cpu }, sweep, buffer_report, cpu_report, notes })
}

/// Text summary of one telemetry file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TelemetrySummary {
    pub rows: usize,
    pub malformed: u64,
    pub duration_s: f64,
    pub mean_rate: f64,
    pub max_rate: f64,
    pub mean_mu: f64,
    pub max_mu: f64,
    pub steps_above: Option<usize>,
    pub committed: u64,
    pub mean_compression: Option<f64>,
    pub actions: Vec<(String, usize)>,
}

pub fn summarize(rows: &[TelemetryRow], malformed: u64, cpu_max: Option<f64>) -> TelemetrySummary {
    let n = rows.len();
    let mean = |f: &dyn Fn(&TelemetryRow) -> f64| {
        if n == 0 {
            0.0
        } else {
            rows.iter().map(f).sum::<f64>() / n as f64
        }
    };
    let ratios: Vec<f64> = rows.iter().filter_map(|r| r.compression).collect();
    let mut actions: Vec<(String, usize)> = Vec::new();
    for r in rows {
        for a in r.action.split('+').filter(|a| !a.is_empty()) {
            match actions.iter_mut().find(|(k, _)| k == a) {
                Some((_, c)) => *c += 1,
                None => actions.push((a.to_string(), 1)),
            }
        }
    }
    actions.sort();
    TelemetrySummary {
        rows: n,
        malformed,
        duration_s: rows.last().map_or(0.0, |r| r.ts),
        mean_rate: mean(&|r| r.rate_in),
        max_rate: rows.iter().map(|r| r.rate_in).fold(0.0, f64::max),
        mean_mu: mean(&|r| r.mu_user),
        max_mu: rows.iter().map(|r| r.mu_user).fold(0.0, f64::max),
        steps_above: cpu_max.map(|m| rows.iter().filter(|r| r.mu_user > m).count()),
        committed: rows.last().map_or(0, |r| r.committed_total),
        mean_compression: (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64),
        actions,
    }
}

impl TelemetrySummary {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "rows               {} ({} malformed skipped)", self.rows, self.malformed);
        let _ = writeln!(s, "duration (s)       {:.1}", self.duration_s);
        let _ = writeln!(s, "rate mean / max    {:.2} / {:.0}", self.mean_rate, self.max_rate);
        let _ = writeln!(s, "cpu mean / max     {:.2} / {:.2}", self.mean_mu, self.max_mu);
        if let Some(v) = self.steps_above {
            let _ = writeln!(s, "steps above bound  {v}");
        }
        let _ = writeln!(s, "committed          {}", self.committed);
        let _ = writeln!(s, "mean compression   {}", self.mean_compression.map_or("n/a".into(), |c| format!("{c:.4}")));
        let acts: Vec<String> = self.actions.iter().map(|(a, c)| format!("{a}={c}")).collect();
        let _ = writeln!(s, "actions            {}", acts.join(" "));
        s
    }
}

/// Writes the plot-ready slices and returns their paths.
pub fn write_slices(rows: &[TelemetryRow], out_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(out_dir).map_err(io_ctx(format!("creating {}", out_dir.display())))?;
    let slice = |name: &str, header: &[&str], body: Vec<Vec<String>>| -> Result<PathBuf, CliError> {
        let path = out_dir.join(name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Setup(e.to_string()))?;
        w.write_record(header).map_err(|e| CliError::Setup(e.to_string()))?;
        for row in body {
            w.write_record(&row).map_err(|e| CliError::Setup(e.to_string()))?;
        }
        w.flush().map_err(io_ctx(format!("writing {}", path.display())))?;
        Ok(path)
    };
    Ok(vec![
        slice(
            "rate_vs_time.csv",
            &["ts", "rate_in", "spill_depth"],
            rows.iter().map(|r| vec![r.ts.to_string(), r.rate_in.to_string(), r.spill_depth.to_string()]).collect(),
        )?,
        slice(
            "mu_vs_time.csv",
            &["ts", "mu_user", "mu_exp", "beta"],
            rows.iter()
                .map(|r| vec![r.ts.to_string(), r.mu_user.to_string(), r.mu_exp.to_string(), r.beta.to_string()])
                .collect(),
        )?,
        slice(
            "compression_vs_beta_e.csv",
            &["beta_e", "compression"],
            rows.iter().filter_map(|r| r.compression.map(|c| vec![r.pushed.to_string(), c.to_string()])).collect(),
        )?,
    ])
}

#[derive(Debug, Parser)]
#[command(name = "streamgraph", version, about = "Adaptive ingestion of JSON record streams into a property graph")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the pipeline described by an engine config file.
    Run { config: PathBuf },
    /// Fit buffer and CPU models from telemetry, or write a preset.
    FitModels {
        telemetry: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, default_value = "models.toml")]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "linear")]
        phi1: PhiArg,
        #[arg(long, value_enum, default_value = "quadratic")]
        phi2: PhiArg,
    },
    /// Summarize telemetry and emit plot-ready CSV slices.
    Report {
        telemetry: PathBuf,
        /// A second telemetry file to compare against.
        #[arg(long)]
        compare: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        cpu_max: Option<f64>,
    },
    /// Check a config file and list every problem found.
    ValidateConfig { config: PathBuf },
    /// Write a synthetic tweet corpus.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        records: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        topic_shift_every: usize,
        #[arg(long, default_value_t = 0.0)]
        malformed_fraction: f64,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum PhiArg {
    Linear,
    Quadratic,
    Inverse,
}

impl From<PhiArg> for PhiKind {
    fn from(p: PhiArg) -> Self {
        match p {
            PhiArg::Linear => PhiKind::Linear,
            PhiArg::Quadratic => PhiKind::Quadratic,
            PhiArg::Inverse => PhiKind::Inverse,
        }
    }
}

/// Writes to stdout, ignoring a closed pipe (e.g. output piped into `head`).
macro_rules! out {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = write!(std::io::stdout(), $($t)*);
    }};
}

macro_rules! outln {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

/// Runs one command and returns the process exit code.
pub fn execute(cli: Cli) -> i32 {
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<i32, CliError> {
    match command {
        Command::Run { config } => {
            let cfg = EngineConfig::load(&config)?;
            let out = run_config(&cfg)?;
            out!("{}", out.report.summary());
            if let Some(m) = &out.mock {
                let issues = m.state().audit();
                outln!("store audit: {}", if issues.is_empty() { "ok".to_string() } else { issues.join("; ") });
            }
            if out.report.archived > 0 {
                let dir = cfg.paths.archive_dir.join(&cfg.run.run_id);
                eprintln!(
                    "error: {} records could not be committed; archived under {}",
                    out.report.archived,
                    dir.display()
                );
                return Ok(2);
            }
            Ok(0)
        }
        Command::FitModels { telemetry, preset, out, phi1, phi2 } => {
            let models = match (telemetry, preset) {
                (_, Some(name)) => {
                    let cpu = cpu_preset(&name)
                        .map_err(|e| CliError::Config(EngineConfigError::Invalid(vec![e.to_string()])))?;
                    outln!("preset {name}: {}  A={} B={} c={}", cpu.basis, cpu.a, cpu.b, cpu.c);
                    ModelSet { cpu, ..ModelSet::default() }
                }
                (Some(path), None) => {
                    let (rows, bad) = read_telemetry(&path)?;
                    if bad > 0 {
                        log::warn!("skipped {bad} malformed telemetry rows");
                    }
                    let fit = fit_models(&rows, phi1.into(), phi2.into())?;
                    out!("{}", fit.render());
                    fit.models
                }
                (None, None) => {
                    return Err(CliError::Config(EngineConfigError::Invalid(vec![
                        "fit-models needs a telemetry file or --preset".into(),
                    ])))
                }
            };
            models.save(&out).map_err(|e| CliError::Setup(e.to_string()))?;
            outln!("wrote {}", out.display());
            Ok(0)
        }
        Command::Report { telemetry, compare, out_dir, cpu_max } => {
            let (rows, bad) = read_telemetry(&telemetry)?;
            if bad > 0 {
                log::warn!("skipped {bad} malformed telemetry rows");
            }
            let a = summarize(&rows, bad, cpu_max);
            outln!("== {}", telemetry.display());
            out!("{}", a.render());
            if let Some(dir) = out_dir {
                for p in write_slices(&rows, &dir)? {
                    outln!("wrote {}", p.display());
                }
            }
            if let Some(other) = compare {
                let (rows_b, bad_b) = read_telemetry(&other)?;
                let b = summarize(&rows_b, bad_b, cpu_max);
                outln!("== {}", other.display());
                out!("{}", b.render());
                outln!("max cpu: {:.2} vs {:.2} ({:+.2})", a.max_mu, b.max_mu, b.max_mu - a.max_mu);
            }
            Ok(0)
        }
        Command::ValidateConfig { config } => {
            EngineConfig::load(&config)?;
            outln!("{}: ok", config.display());
            Ok(0)
        }
        Command::GenCorpus { out, records, seed, topic_shift_every, malformed_fraction } => {
            let spec = CorpusSpec { records, seed, topic_shift_every, malformed_fraction, ..CorpusSpec::default() };
            let n = write_corpus(&out, &spec).map_err(io_ctx(format!("writing {}", out.display())))?;
            outln!("wrote {n} records to {}", out.display());
            Ok(0)
        }
    }
}
