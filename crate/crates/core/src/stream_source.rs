//! File replay as a timed record stream, plus the second-phase content filter.
//!
//! A [`Replay`] walks a JSONL file and stamps every emitted record with an
//! arrival time derived from a [`RateSchedule`]. Timestamps are computed, not
//! measured, so the same file and schedule always yield the same sequence.
//! [`PacedFeed`] adds wall-clock pacing on top for live runs; [`VirtualFeed`]
//! hands records out by stream time without sleeping.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, SyncSender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::mapping::PathExpr;

/// Size of the window duplicates are drawn from.
pub const DUPLICATE_WINDOW: usize = 1_000;

/// Records are paced in groups of this size.
const PACING_BATCH: usize = 10;

#[derive(Debug, Error)]
pub enum SourceError {
    #[error("cannot open replay file {path}: {source}")]
    Open {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid rate schedule: {0}")]
    Schedule(String),
    #[error("invalid filter: {0}")]
    Filter(String),
}

/// One stream item: the parsed document plus the exact line it came from.
#[derive(Debug, Clone)]
pub struct RawRecord {
    pub payload: Arc<Value>,
    /// Original line, kept so spilled records round-trip byte for byte.
    pub raw: Arc<str>,
    /// Milliseconds on the stream clock.
    pub arrival_ts: u64,
    /// Ordinal of the source line among well-formed lines of the file.
    pub source_seq: u64,
}

impl RawRecord {
    pub fn parse(raw: &str, arrival_ts: u64, source_seq: u64) -> Result<Self, serde_json::Error> {
        let payload: Value = serde_json::from_str(raw)?;
        Ok(Self { payload: Arc::new(payload), raw: Arc::from(raw), arrival_ts, source_seq })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateSegment {
    #[serde(rename = "@duration_s")]
    pub duration_s: f64,
    #[serde(rename = "@rate")]
    pub rate: f64,
    #[serde(rename = "@duplicate_fraction", default)]
    pub duplicate_fraction: f64,
}

impl RateSegment {
    pub fn new(duration_s: f64, rate: f64, duplicate_fraction: f64) -> Self {
        Self { duration_s, rate, duplicate_fraction }
    }

    /// Number of emissions the segment schedules.
    pub fn slots(&self) -> u64 {
        (self.duration_s * self.rate).round() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSchedule {
    #[serde(rename = "@seed", default)]
    pub seed: u64,
    #[serde(rename = "segment", default)]
    pub segments: Vec<RateSegment>,
}

impl RateSchedule {
    pub fn new(segments: Vec<RateSegment>, seed: u64) -> Self {
        Self { seed, segments }
    }

    pub fn constant(duration_s: f64, rate: f64, duplicate_fraction: f64) -> Self {
        Self::new(vec![RateSegment::new(duration_s, rate, duplicate_fraction)], 0)
    }

    pub fn total_duration_s(&self) -> f64 {
        self.segments.iter().map(|s| s.duration_s).sum()
    }

    pub fn validate(&self) -> Result<(), SourceError> {
        if self.segments.is_empty() {
            return Err(SourceError::Schedule("no segments".into()));
        }
        for (i, seg) in self.segments.iter().enumerate() {
            if !(seg.rate > 0.0) || !seg.rate.is_finite() {
                return Err(SourceError::Schedule(format!("segment {i}: rate must be > 0")));
            }
            if !(0.0..=1.0).contains(&seg.duplicate_fraction) {
                return Err(SourceError::Schedule(format!("segment {i}: duplicate_fraction must lie in [0, 1]")));
            }
            if !(seg.duration_s >= 0.0) {
                return Err(SourceError::Schedule(format!("segment {i}: duration must be non-negative")));
            }
        }
        if !(self.total_duration_s() > 0.0) {
            return Err(SourceError::Schedule("total duration must be > 0".into()));
        }
        Ok(())
    }
}

/// Replays a JSONL file according to a schedule.
///
/// Malformed lines are skipped and counted. The stream stops when either the
/// schedule or the file runs out.
pub struct Replay {
    lines: Box<dyn Iterator<Item = std::io::Result<String>> + Send>,
    schedule: RateSchedule,
    rng: ChaCha8Rng,
    segment: usize,
    slot: u64,
    segment_start_ms: f64,
    window: VecDeque<RawRecord>,
    next_seq: u64,
    skipped: u64,
    duplicates: u64,
    emitted: u64,
    done: bool,
}

/// Opens `path` for replay under `schedule`.
pub fn open_replay(path: impl AsRef<Path>, schedule: RateSchedule) -> Result<Replay, SourceError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| SourceError::Open { path: path.to_path_buf(), source })?;
    Replay::from_reader(BufReader::new(file), schedule)
}

impl Replay {
    pub fn from_reader<R: BufRead + Send + 'static>(reader: R, schedule: RateSchedule) -> Result<Self, SourceError> {
        schedule.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(schedule.seed);
        Ok(Self {
            lines: Box::new(reader.lines()),
            schedule,
            rng,
            segment: 0,
            slot: 0,
            segment_start_ms: 0.0,
            window: VecDeque::with_capacity(DUPLICATE_WINDOW),
            next_seq: 0,
            skipped: 0,
            duplicates: 0,
            emitted: 0,
            done: false,
        })
    }

    pub fn from_lines(lines: Vec<String>, schedule: RateSchedule) -> Result<Self, SourceError> {
        let joined = lines.join("\n");
        Self::from_reader(std::io::Cursor::new(joined.into_bytes()), schedule)
    }

    /// Malformed lines seen so far.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn duplicates(&self) -> u64 {
        self.duplicates
    }

    pub fn emitted(&self) -> u64 {
        self.emitted
    }

    fn next_fresh(&mut self, arrival_ts: u64) -> Option<RawRecord> {
        loop {
            let line = match self.lines.next()? {
                Ok(line) => line,
                Err(_) => {
                    // Invalid UTF-8 and friends count as dirty input.
                    self.skipped += 1;
                    continue;
                }
            };
            let trimmed = line.trim_end_matches('\r');
            if trimmed.trim().is_empty() {
                continue;
            }
            match RawRecord::parse(trimmed, arrival_ts, self.next_seq) {
                Ok(rec) => {
                    self.next_seq += 1;
                    return Some(rec);
                }
                Err(_) => self.skipped += 1,
            }
        }
    }
}

impl Iterator for Replay {
    type Item = RawRecord;

    fn next(&mut self) -> Option<RawRecord> {
        if self.done {
            return None;
        }
        // Advance past exhausted segments.
        loop {
            let seg = *self.schedule.segments.get(self.segment).or_else(|| {
                self.done = true;
                None
            })?;
            if self.slot < seg.slots() {
                break;
            }
            self.segment_start_ms += seg.duration_s * 1000.0;
            self.segment += 1;
            self.slot = 0;
            self.window.clear();
        }
        let seg = self.schedule.segments[self.segment];
        let i = self.slot;
        self.slot += 1;

        let jitter: f64 = self.rng.random();
        let arrival = self.segment_start_ms + (i as f64 + jitter) * 1000.0 / seg.rate;
        let arrival_ts = arrival.floor() as u64;

        // Error-diffusion keeps the duplicate share exact rather than Bernoulli.
        let p = seg.duplicate_fraction;
        let wants_dup = ((i + 1) as f64 * p).floor() > (i as f64 * p).floor();
        let record = if wants_dup && !self.window.is_empty() {
            let pick = self.rng.random_range(0..self.window.len());
            let mut rec = self.window[pick].clone();
            rec.arrival_ts = arrival_ts;
            self.duplicates += 1;
            rec
        } else {
            match self.next_fresh(arrival_ts) {
                Some(rec) => rec,
                None => {
                    self.done = true;
                    return None;
                }
            }
        };
        if self.window.len() == DUPLICATE_WINDOW {
            self.window.pop_front();
        }
        self.window.push_back(record.clone());
        self.emitted += 1;
        Some(record)
    }
}

/// Something the engine can pull stream records from, tick by tick.
pub trait RecordFeed {
    /// All records with `arrival_ts <= until_ms` not handed out yet.
    fn poll_until(&mut self, until_ms: u64) -> Vec<RawRecord>;
    fn exhausted(&self) -> bool;
    /// Malformed lines dropped by the underlying replay.
    fn skipped(&self) -> u64;
}

/// Hands out records by stream time with no waiting.
pub struct VirtualFeed {
    replay: Replay,
    lookahead: Option<RawRecord>,
}

impl VirtualFeed {
    pub fn new(mut replay: Replay) -> Self {
        let lookahead = replay.next();
        Self { replay, lookahead }
    }
}

impl RecordFeed for VirtualFeed {
    fn poll_until(&mut self, until_ms: u64) -> Vec<RawRecord> {
        let mut out = Vec::new();
        while self.lookahead.as_ref().is_some_and(|r| r.arrival_ts <= until_ms) {
            out.extend(self.lookahead.take());
            self.lookahead = self.replay.next();
        }
        out
    }

    fn exhausted(&self) -> bool {
        self.lookahead.is_none()
    }

    fn skipped(&self) -> u64 {
        self.replay.skipped()
    }
}

/// Wall-clock paced replay: a producer thread sleeps until each batch's
/// deadline and hands records over a bounded channel.
pub struct PacedFeed {
    rx: Receiver<PacedMsg>,
    start: Instant,
    lookahead: Option<RawRecord>,
    finished: bool,
    skipped: u64,
    producer: Option<JoinHandle<()>>,
}

enum PacedMsg {
    Record(RawRecord),
    End { skipped: u64 },
}

impl PacedFeed {
    /// Starts the producer. `queue_bound` is the handoff capacity.
    pub fn start(mut replay: Replay, queue_bound: usize) -> Self {
        let (tx, rx): (SyncSender<PacedMsg>, _) = mpsc::sync_channel(queue_bound.max(1));
        let start = Instant::now();
        let producer = thread::spawn(move || {
            let mut batch = Vec::with_capacity(PACING_BATCH);
            loop {
                batch.clear();
                batch.extend(replay.by_ref().take(PACING_BATCH));
                let Some(first) = batch.first() else { break };
                let deadline = start + Duration::from_millis(first.arrival_ts);
                let now = Instant::now();
                if deadline > now {
                    thread::sleep(deadline - now);
                }
                for rec in batch.drain(..) {
                    if tx.send(PacedMsg::Record(rec)).is_err() {
                        return;
                    }
                }
            }
            let _ = tx.send(PacedMsg::End { skipped: replay.skipped() });
        });
        Self { rx, start, lookahead: None, finished: false, skipped: 0, producer: Some(producer) }
    }

    pub fn elapsed_ms(&self) -> u64 {
        self.start.elapsed().as_millis() as u64
    }
}

impl RecordFeed for PacedFeed {
    fn poll_until(&mut self, until_ms: u64) -> Vec<RawRecord> {
        let deadline = self.start + Duration::from_millis(until_ms);
        let mut out = Vec::new();
        if let Some(rec) = self.lookahead.take() {
            if rec.arrival_ts <= until_ms {
                out.push(rec);
            } else {
                self.lookahead = Some(rec);
                let now = Instant::now();
                if deadline > now {
                    thread::sleep(deadline - now);
                }
                return out;
            }
        }
        while !self.finished {
            let now = Instant::now();
            let wait = deadline.saturating_duration_since(now);
            match self.rx.recv_timeout(wait) {
                Ok(PacedMsg::Record(rec)) => {
                    if rec.arrival_ts <= until_ms {
                        out.push(rec);
                    } else {
                        self.lookahead = Some(rec);
                        let now = Instant::now();
                        if deadline > now {
                            thread::sleep(deadline - now);
                        }
                        break;
                    }
                }
                Ok(PacedMsg::End { skipped }) => {
                    self.skipped = skipped;
                    self.finished = true;
                }
                Err(RecvTimeoutError::Timeout) => break,
                Err(RecvTimeoutError::Disconnected) => self.finished = true,
            }
        }
        out
    }

    fn exhausted(&self) -> bool {
        self.finished && self.lookahead.is_none()
    }

    fn skipped(&self) -> u64 {
        self.skipped
    }
}

impl Drop for PacedFeed {
    fn drop(&mut self) {
        // The producer exits on its next send once the receiver is gone.
        self.producer.take();
    }
}

/// Named content rules applied after keyword matching.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Predicate {
    /// Drop records whose text consists of emoji (and whitespace) only.
    RejectIfOnlyEmoji,
    /// Drop records lacking a value at the given path.
    RequireFieldPresent(String),
    /// Drop records whose text is shorter than this many characters.
    MinTextLength(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    #[serde(default = "default_text_path")]
    pub text_path: String,
    #[serde(default)]
    pub keyword_filtering: bool,
    #[serde(rename = "keyword", default)]
    pub keywords: Vec<String>,
    #[serde(rename = "predicate", default)]
    pub predicates: Vec<Predicate>,
}

fn default_text_path() -> String {
    "text".to_string()
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self {
            text_path: default_text_path(),
            keyword_filtering: false,
            keywords: Vec::new(),
            predicates: vec![Predicate::RejectIfOnlyEmoji],
        }
    }
}

impl FilterSpec {
    pub fn with_keywords<I: IntoIterator<Item = S>, S: Into<String>>(keywords: I) -> Self {
        Self { keyword_filtering: true, keywords: keywords.into_iter().map(Into::into).collect(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), SourceError> {
        if self.keyword_filtering && self.keywords.is_empty() {
            return Err(SourceError::Filter("keyword filtering enabled with an empty keyword list".into()));
        }
        PathExpr::parse(&self.text_path).map_err(|e| SourceError::Filter(e.to_string()))?;
        for p in &self.predicates {
            if let Predicate::RequireFieldPresent(path) = p {
                PathExpr::parse(path).map_err(|e| SourceError::Filter(e.to_string()))?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterVerdict {
    Keep,
    /// Failed a keyword or predicate rule.
    Rejected,
    /// The designated text field is absent.
    MissingText,
}

/// Full filter outcome, separating predicate rejections from missing text.
pub fn classify(r: &RawRecord, f: &FilterSpec) -> FilterVerdict {
    let text_path = match PathExpr::parse(&f.text_path) {
        Ok(p) => p,
        Err(_) => return FilterVerdict::MissingText,
    };
    let text = match text_path.resolve(&r.payload).first_scalar() {
        Some(Value::String(s)) => s.clone(),
        Some(v) if !v.is_null() && !v.is_object() && !v.is_array() => v.to_string(),
        _ => return FilterVerdict::MissingText,
    };
    if f.keyword_filtering {
        let lower = text.to_lowercase();
        let hit = f.keywords.iter().any(|k| lower.contains(&k.to_lowercase()));
        if !hit {
            return FilterVerdict::Rejected;
        }
    }
    for p in &f.predicates {
        let pass = match p {
            Predicate::RejectIfOnlyEmoji => !is_only_emoji(&text),
            Predicate::RequireFieldPresent(path) => {
                PathExpr::parse(path).map(|p| !p.resolve(&r.payload).is_absent()).unwrap_or(false)
            }
            Predicate::MinTextLength(n) => text.chars().count() >= *n,
        };
        if !pass {
            return FilterVerdict::Rejected;
        }
    }
    FilterVerdict::Keep
}

/// Keep/drop decision. Pure: no state is touched.
pub fn apply_filter(r: &RawRecord, f: &FilterSpec) -> bool {
    classify(r, f) == FilterVerdict::Keep
}

/// True when `text` holds at least one emoji and nothing but emoji and whitespace.
pub fn is_only_emoji(text: &str) -> bool {
    let mut saw_emoji = false;
    for c in text.chars() {
        if c.is_whitespace() {
            continue;
        }
        if is_emoji_char(c) {
            saw_emoji = true;
        } else {
            return false;
        }
    }
    saw_emoji
}

fn is_emoji_char(c: char) -> bool {
    matches!(c as u32,
        0x1F000..=0x1FAFF   // pictographs, emoticons, transport, flags, modifiers
        | 0x2600..=0x27BF   // misc symbols, dingbats
        | 0x2300..=0x23FF   // misc technical (watch, hourglass)
        | 0x2B00..=0x2BFF   // arrows, stars
        | 0xFE00..=0xFE0F   // variation selectors
        | 0x200D            // zero-width joiner
        | 0x20E3            // keycap
        | 0xE0020..=0xE007F // tag sequences
    )
}
