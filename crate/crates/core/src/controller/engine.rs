//! The run loop: filter, stage, decide, commit, repeat.

use std::io::Write;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use super::spill::{SpillError, SpillQueue};
use super::{action_label, control_step, Action, ControllerConfig, ControllerState, StepInput};
use crate::committer::{build_statements, Committer};
use crate::edge_table::EdgeTable;
use crate::mapping::MappingConfig;
use crate::metrics::{DelayLedger, DiversityTracker, PerfSample};
use crate::predictor::{fit_cpu_model, CpuSample, ModelSet};
use crate::stream_source::{classify, FilterSpec, FilterVerdict, RawRecord, RecordFeed};
use crate::telemetry::{TelemetryError, TelemetryRow, TelemetryWriter};

const REFIT_MIN_SAMPLES: usize = 100;
const REFIT_MAX_SAMPLES: usize = 5000;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Spill(#[from] SpillError),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error("cannot write shed audit log {path}: {source}")]
    Audit {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Ticks allowed after the stream ends for draining the spill queue.
    pub max_drain_ticks: u64,
    /// Pace ticks by the wall clock instead of running flat out.
    pub realtime: bool,
    pub mem_available: u64,
    pub telemetry: Option<PathBuf>,
    /// Appends one line per shed bucket.
    pub shed_log: Option<PathBuf>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { max_drain_ticks: 600, realtime: false, mem_available: 8 << 30, telemetry: None, shed_log: None }
    }
}

/// A bucket dropped because it could not be spilled or archived.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShedRecord {
    pub ts: f64,
    pub records: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunReport {
    pub records_in: u64,
    /// Records already in the spill queue when the run started.
    pub spill_initial: u64,
    pub committed: u64,
    pub spilled: u64,
    pub filtered: u64,
    pub skipped: u64,
    pub shed: u64,
    pub archived: u64,
    pub malformed: u64,
    pub missing_text: u64,
    pub corrupt_spill_records: u64,
    pub ticks: u64,
    pub pushes: u64,
    pub throttles: u64,
    pub reloads: u64,
    pub reloaded_records: u64,
    pub sleeps: u64,
    pub failed_batches: u64,
    pub refits: u64,
    pub mean_rate: f64,
    pub max_rate: f64,
    pub mean_compression: Option<f64>,
    pub statements_pushed: u64,
    pub cpu_max: f64,
    pub max_mu: f64,
    pub violation_steps: u64,
    pub max_consecutive_violations: u64,
    pub total_delay_s: f64,
    pub wall_time_s: f64,
    pub final_beta: u64,
    pub shed_log: Vec<ShedRecord>,
}

impl RunReport {
    /// `in = committed + spilled + filtered + skipped + shed + archived`,
    /// counting records inherited from an earlier run's spill on the left.
    pub fn conservation_holds(&self) -> bool {
        self.records_in + self.spill_initial
            == self.committed + self.spilled + self.filtered + self.skipped + self.shed + self.archived
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let line = |s: &mut String, k: &str, v: String| s.push_str(&format!("{k:<30}{v}\n"));
        line(&mut s, "records in", self.records_in.to_string());
        if self.spill_initial > 0 {
            line(&mut s, "inherited from spill", self.spill_initial.to_string());
        }
        line(&mut s, "committed", self.committed.to_string());
        line(&mut s, "left in spill", self.spilled.to_string());
        line(&mut s, "filtered", self.filtered.to_string());
        line(
            &mut s,
            "skipped",
            format!("{} ({} malformed, {} missing text)", self.skipped, self.malformed, self.missing_text),
        );
        line(&mut s, "shed", self.shed.to_string());
        line(&mut s, "archived", self.archived.to_string());
        line(&mut s, "conservation", if self.conservation_holds() { "ok".into() } else { "VIOLATED".into() });
        line(&mut s, "control steps", self.ticks.to_string());
        line(
            &mut s,
            "pushes / throttles / reloads",
            format!("{} / {} / {}", self.pushes, self.throttles, self.reloads),
        );
        line(&mut s, "mean / max rate (rec/step)", format!("{:.2} / {:.0}", self.mean_rate, self.max_rate));
        line(&mut s, "mean compression", self.mean_compression.map_or("n/a".into(), |c| format!("{c:.4}")));
        line(&mut s, "max cpu", format!("{:.2}", self.max_mu));
        line(
            &mut s,
            "steps above cpu_max",
            format!("{} (longest run {})", self.violation_steps, self.max_consecutive_violations),
        );
        line(&mut s, "total delay (s)", format!("{:.3}", self.total_delay_s));
        line(&mut s, "wall time (s)", format!("{:.3}", self.wall_time_s));
        s
    }
}

struct Pending {
    records: Vec<RawRecord>,
    table: EdgeTable,
    opened_ms: Option<u64>,
}

impl Pending {
    fn new() -> Self {
        Self { records: Vec::new(), table: EdgeTable::new(), opened_ms: None }
    }

    fn add(&mut self, r: RawRecord, mapping: &MappingConfig) {
        self.table.ingest(&r, mapping);
        self.opened_ms.get_or_insert(r.arrival_ts);
        self.records.push(r);
    }

    fn take(&mut self) -> (Vec<RawRecord>, EdgeTable) {
        self.opened_ms = None;
        (std::mem::take(&mut self.records), std::mem::take(&mut self.table))
    }
}

/// Drives the pipeline until the stream ends and the spill queue is drained
/// or the drain budget runs out.
#[allow(clippy::too_many_arguments)]
pub fn run_loop(
    feed: &mut dyn RecordFeed,
    mapping: &MappingConfig,
    filter: &FilterSpec,
    cfg: &ControllerConfig,
    mut models: ModelSet,
    committer: &mut Committer,
    spill: &mut SpillQueue,
    opts: &RunOptions,
) -> Result<RunReport, EngineError> {
    let wall = Instant::now();
    let tick_ms = ((cfg.sleep_quantum_s * 1000.0).round() as u64).max(1);
    let flush_ms = (cfg.flush_interval_s * 1000.0).round() as u64;
    let telemetry = opts.telemetry.as_ref().map(TelemetryWriter::spawn).transpose()?;

    let mut report = RunReport { spill_initial: spill.depth(), cpu_max: cfg.cpu_max, ..RunReport::default() };
    let corrupt_at_start = spill.corrupt_records();
    let mut state = ControllerState::new(cfg);
    let mut diversity = DiversityTracker::new(cfg.k);
    let mut delays = DelayLedger::new();
    let mut pending = Pending::new();
    let mut cpu_samples: Vec<CpuSample> = Vec::new();
    let mut ratios: Vec<f64> = Vec::new();
    let mut bytes_seen = 0u64;
    let mut bucket_index = 0u64;
    let mut buckets_since_refit = 0u64;
    let mut now_ms = 0u64;
    let mut drain_ticks = 0u64;
    let mut violation_run = 0u64;
    let mut mu = committer.sink().cpu_user().unwrap_or(0.0);

    let shed = |report: &mut RunReport, ts: f64, n: u64, reason: String| -> Result<(), EngineError> {
        report.shed += n;
        if let Some(path) = &opts.shed_log {
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|source| EngineError::Audit { path: path.clone(), source })?;
            writeln!(f, "ts={ts:.3} records={n} reason={reason}")
                .map_err(|source| EngineError::Audit { path: path.clone(), source })?;
        }
        report.shed_log.push(ShedRecord { ts, records: n, reason });
        Ok(())
    };

    loop {
        now_ms += tick_ms;
        if opts.realtime {
            let deadline = wall + Duration::from_millis(now_ms);
            let now = Instant::now();
            if deadline > now {
                std::thread::sleep(deadline - now);
            }
        }
        let ts = now_ms as f64 / 1000.0;
        let arrived = feed.poll_until(now_ms);
        let rate = arrived.len() as f64;
        report.ticks += 1;
        report.max_rate = report.max_rate.max(rate);
        for r in arrived {
            report.records_in += 1;
            bytes_seen += r.raw.len() as u64;
            match classify(&r, filter) {
                FilterVerdict::Keep => pending.add(r, mapping),
                FilterVerdict::Rejected => report.filtered += 1,
                FilterVerdict::MissingText => report.missing_text += 1,
            }
        }
        let stream_over = feed.exhausted();
        let draining = stream_over && drain_ticks >= opts.max_drain_ticks;

        let n_pending = pending.records.len() as u64;
        let ready = n_pending > 0
            && (n_pending >= state.beta
                || pending.opened_ms.is_some_and(|o| now_ms.saturating_sub(o) >= flush_ms)
                || stream_over);
        let seen = report.records_in.max(1);
        let perf =
            PerfSample { ts: now_ms, cpu_user: mu, mem_available: opts.mem_available, ..PerfSample::idle(now_ms) };
        let mut decision = control_step(
            StepInput {
                perf,
                table: &pending.table,
                pending_records: n_pending,
                bucket_ready: ready,
                spill_depth: spill.depth(),
                avg_record_bytes: bytes_seen as f64 / seen as f64,
            },
            &diversity,
            cfg,
            &mut state,
            &models,
        );
        if draining && n_pending > 0 && !decision.has("push") && !decision.has("throttle") {
            // Out of drain budget: park what is left in the spill queue.
            decision.actions.push(Action::Throttle);
        }
        let beta_e = pending.table.effective_size() as u64;

        let mut pushed_statements = 0u64;
        let mut compression = None;
        let mut sink_stepped = false;

        if decision.has("sleep") {
            report.sleeps += 1;
        }
        if decision.has("throttle") && !decision.has("push") {
            let (records, _) = pending.take();
            let n = records.len() as u64;
            match spill.throttle(&records) {
                Ok(()) => report.throttles += 1,
                Err(SpillError::Full { needed, available }) => {
                    shed(&mut report, ts, n, format!("spill full ({needed} bytes needed, {available} available)"))?
                }
                Err(e) => shed(&mut report, ts, n, format!("spill failed: {e}"))?,
            }
        }

        let push = decision.has("push");
        if push || decision.reload_budget().is_some() {
            let (mut records, mut table) = if push { pending.take() } else { (Vec::new(), EdgeTable::new()) };
            let mut reloaded = 0u64;
            if let Some(budget) = decision.reload_budget() {
                let mut n = budget as usize;
                while n > 0 {
                    let peeked = spill.peek(n)?;
                    n = n.min(peeked.len());
                    let mut trial = table.clone();
                    for r in &peeked[..n] {
                        trial.ingest(r, mapping);
                    }
                    if models.cpu.predict(trial.effective_size() as f64, mu) < cfg.cpu_max {
                        let taken = spill.reload(n)?;
                        reloaded = taken.len() as u64;
                        for r in &taken {
                            table.ingest(r, mapping);
                        }
                        records.extend(taken);
                        break;
                    }
                    n /= 2;
                }
            }
            if reloaded == 0 {
                decision.actions.retain(|a| !matches!(a, Action::Reload(_)));
            } else {
                report.reloads += 1;
                report.reloaded_records += reloaded;
            }
            if !records.is_empty() {
                diversity.observe(&table);
                let batch = build_statements(&table, bucket_index);
                bucket_index += 1;
                buckets_since_refit += 1;
                let sent = committer.push(&batch, &records);
                let n = records.len() as u64;
                if sent.committed {
                    sink_stepped = true;
                    report.committed += n;
                    report.pushes += 1;
                    pushed_statements = batch.statement_count() as u64;
                    report.statements_pushed += pushed_statements;
                    compression = batch.compression_ratio();
                    ratios.extend(compression);
                    let waited: f64 =
                        records.iter().map(|r| now_ms.saturating_sub(r.arrival_ts) as f64 / 1000.0).sum::<f64>()
                            / n as f64;
                    let _ = delays.record_delay(batch.bucket_index, waited, sent.latency);
                } else {
                    report.failed_batches += 1;
                    if sent.archived.is_some() {
                        report.archived += n;
                    } else {
                        let why = sent.error.unwrap_or_default();
                        shed(&mut report, ts, n, format!("push failed and not archived: {why}"))?;
                    }
                }
            }
        }
        if !sink_stepped {
            committer.sink_mut().idle();
        }

        let mu_before = mu;
        mu = committer.sink().cpu_user().unwrap_or(0.0);
        state.observe_cpu(mu);
        cpu_samples.push(CpuSample { mu_prev: mu_before, beta: pushed_statements as f64, mu });
        report.max_mu = report.max_mu.max(mu);
        if mu > cfg.cpu_max {
            report.violation_steps += 1;
            violation_run += 1;
            report.max_consecutive_violations = report.max_consecutive_violations.max(violation_run);
        } else {
            violation_run = 0;
        }

        if cfg.enabled
            && cfg.refit_every > 0
            && buckets_since_refit >= cfg.refit_every
            && cpu_samples.len() >= REFIT_MIN_SAMPLES
        {
            buckets_since_refit = 0;
            let from = cpu_samples.len().saturating_sub(REFIT_MAX_SAMPLES);
            if let Ok((m, _)) = fit_cpu_model(&cpu_samples[from..], models.cpu.basis) {
                if m.b > 0.0 && (0.0..1.0).contains(&m.a) {
                    models.cpu = m;
                    report.refits += 1;
                }
            }
        }

        if let Some(t) = &telemetry {
            t.send(TelemetryRow {
                ts,
                rate_in: rate,
                beta: state.beta,
                beta_exp: decision.beta_exp,
                rho: decision.rho,
                d: decision.d,
                mu_prev: mu_before,
                mu_user: mu,
                mu_exp: decision.mu_exp,
                action: action_label(&decision.actions),
                spill_depth: spill.depth(),
                committed_total: report.committed,
                beta_e,
                records: n_pending,
                pushed: pushed_statements,
                compression,
            })?;
        }

        if stream_over {
            if pending.records.is_empty() && (spill.is_empty() || draining) {
                break;
            }
            drain_ticks += 1;
        }
    }

    report.malformed = feed.skipped();
    report.records_in += report.malformed;
    report.skipped = report.malformed + report.missing_text;
    report.corrupt_spill_records = spill.corrupt_records() - corrupt_at_start;
    if report.corrupt_spill_records > 0 {
        let n = report.corrupt_spill_records;
        shed(&mut report, now_ms as f64 / 1000.0, n, "spill segment failed checksum".into())?;
    }
    report.spilled = spill.depth();
    report.mean_rate = report.records_in as f64 / report.ticks.max(1) as f64;
    report.mean_compression = (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64);
    report.total_delay_s = delays.total_delay();
    report.final_beta = state.beta;
    report.wall_time_s = wall.elapsed().as_secs_f64();
    if let Some(t) = telemetry {
        t.finish()?;
    }
    Ok(report)
}
