//! On-disk FIFO of throttled records.
//!
//! Each throttled bucket becomes one segment file:
//!
//! ```text
//! magic "SGSPILL\0" | version u32 | n_frames u32 | frames... | crc32 u32
//! frame = arrival_ts u64 | source_seq u64 | len u32 | raw line bytes
//! ```
//!
//! Integers are little-endian and the checksum covers everything before it.
//! Segments are written to a temporary name and renamed into place, so a
//! crash never leaves a half-written segment under a valid name. Partial
//! consumption of the head segment is tracked in a small cursor file.

use std::collections::VecDeque;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::stream_source::RawRecord;

const MAGIC: &[u8; 8] = b"SGSPILL\0";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;
const CURSOR_FILE: &str = "cursor";

#[derive(Debug, Error)]
pub enum SpillError {
    #[error("spill I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("spill capacity exhausted: {needed} bytes needed, {available} available")]
    Full { needed: u64, available: u64 },
    #[error("segment {path} is corrupt: {reason}")]
    Corrupt { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SpillError + '_ {
    move |source| SpillError::Io { path: path.to_path_buf(), source }
}

/// Serializes records into one checksummed segment image.
pub fn encode_segment(records: &[RawRecord]) -> Vec<u8> {
    let body: usize = records.iter().map(|r| 20 + r.raw.len()).sum();
    let mut buf = Vec::with_capacity(HEADER_LEN + body + 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        buf.extend_from_slice(&r.arrival_ts.to_le_bytes());
        buf.extend_from_slice(&r.source_seq.to_le_bytes());
        buf.extend_from_slice(&(r.raw.len() as u32).to_le_bytes());
        buf.extend_from_slice(r.raw.as_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

/// Frame count from a segment header, without verifying the body.
fn header_frames(bytes: &[u8]) -> Result<u32, String> {
    if bytes.len() < HEADER_LEN + 4 {
        return Err("truncated header".into());
    }
    if &bytes[..8] != MAGIC {
        return Err("bad magic".into());
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    Ok(u32::from_le_bytes(bytes[12..16].try_into().unwrap()))
}

/// Parses and verifies a segment image.
pub fn decode_segment(bytes: &[u8]) -> Result<Vec<RawRecord>, String> {
    let n = header_frames(bytes)? as usize;
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err("checksum mismatch".into());
    }
    let mut out = Vec::with_capacity(n);
    let mut pos = HEADER_LEN;
    for i in 0..n {
        if pos + 20 > body.len() {
            return Err(format!("frame {i} truncated"));
        }
        let ts = u64::from_le_bytes(body[pos..pos + 8].try_into().unwrap());
        let seq = u64::from_le_bytes(body[pos + 8..pos + 16].try_into().unwrap());
        let len = u32::from_le_bytes(body[pos + 16..pos + 20].try_into().unwrap()) as usize;
        pos += 20;
        if pos + len > body.len() {
            return Err(format!("frame {i} truncated"));
        }
        let line = std::str::from_utf8(&body[pos..pos + len]).map_err(|e| format!("frame {i}: {e}"))?;
        let rec = RawRecord::parse(line, ts, seq).map_err(|e| format!("frame {i}: {e}"))?;
        out.push(rec);
        pos += len;
    }
    if pos != body.len() {
        return Err("trailing bytes after last frame".into());
    }
    Ok(out)
}

/// Writes `bytes` to `path` through a temporary file and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), SpillError> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

#[derive(Debug, Clone)]
struct Segment {
    seq: u64,
    path: PathBuf,
    frames: u64,
    bytes: u64,
}

/// FIFO spill queue rooted at one directory.
#[derive(Debug)]
pub struct SpillQueue {
    dir: PathBuf,
    segments: VecDeque<Segment>,
    /// Frames already consumed from the head segment.
    head_offset: u64,
    next_seq: u64,
    max_bytes: Option<u64>,
    /// Largest number of records per segment file; 0 means one per bucket.
    segment_records: usize,
    corrupt_segments: u64,
    corrupt_records: u64,
}

impl SpillQueue {
    /// Opens the queue, picking up segments left by an earlier process.
    pub fn open(dir: impl AsRef<Path>, max_bytes: Option<u64>) -> Result<Self, SpillError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut found = Vec::new();
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let path = entry.map_err(io_err(&dir))?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if name.ends_with(".tmp") {
                let _ = fs::remove_file(&path);
                continue;
            }
            if let Some(seq) =
                name.strip_prefix("seg-").and_then(|s| s.strip_suffix(".spill")).and_then(|s| s.parse::<u64>().ok())
            {
                found.push((seq, path));
            }
        }
        found.sort();
        let mut q = Self {
            dir,
            segments: VecDeque::new(),
            head_offset: 0,
            next_seq: found.last().map_or(0, |(s, _)| s + 1),
            max_bytes,
            segment_records: 0,
            corrupt_segments: 0,
            corrupt_records: 0,
        };
        for (seq, path) in found {
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            match header_frames(&bytes) {
                Ok(frames) => {
                    q.segments.push_back(Segment { seq, path, frames: frames as u64, bytes: bytes.len() as u64 })
                }
                Err(_) => {
                    q.corrupt_segments += 1;
                    let _ = fs::remove_file(&path);
                }
            }
        }
        q.load_cursor()?;
        Ok(q)
    }

    fn cursor_path(&self) -> PathBuf {
        self.dir.join(CURSOR_FILE)
    }

    fn load_cursor(&mut self) -> Result<(), SpillError> {
        let path = self.cursor_path();
        let Ok(text) = fs::read_to_string(&path) else {
            return Ok(());
        };
        let mut parts = text.split_whitespace().map(|p| p.parse::<u64>());
        if let (Some(Ok(seq)), Some(Ok(offset))) = (parts.next(), parts.next()) {
            if let Some(head) = self.segments.front() {
                if head.seq == seq {
                    self.head_offset = offset.min(head.frames);
                }
            }
        }
        Ok(())
    }

    fn store_cursor(&self) -> Result<(), SpillError> {
        let path = self.cursor_path();
        match self.segments.front() {
            Some(head) if self.head_offset > 0 => {
                write_atomic(&path, format!("{} {}\n", head.seq, self.head_offset).as_bytes())
            }
            _ => match fs::remove_file(&path) {
                Err(e) if e.kind() != io::ErrorKind::NotFound => Err(io_err(&path)(e)),
                _ => Ok(()),
            },
        }
    }

    pub fn with_segment_records(mut self, n: usize) -> Self {
        self.segment_records = n;
        self
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Records waiting in the queue.
    pub fn depth(&self) -> u64 {
        self.segments.iter().map(|s| s.frames).sum::<u64>() - self.head_offset
    }

    pub fn is_empty(&self) -> bool {
        self.depth() == 0
    }

    pub fn segment_count(&self) -> usize {
        self.segments.len()
    }

    pub fn bytes_on_disk(&self) -> u64 {
        self.segments.iter().map(|s| s.bytes).sum()
    }

    pub fn corrupt_segments(&self) -> u64 {
        self.corrupt_segments
    }

    /// Records dropped because their segment failed verification.
    pub fn corrupt_records(&self) -> u64 {
        self.corrupt_records
    }

    /// Appends one bucket, split into segments of at most the configured size.
    ///
    /// Either every record is written or none is.
    pub fn throttle(&mut self, records: &[RawRecord]) -> Result<(), SpillError> {
        if records.is_empty() {
            return Ok(());
        }
        let chunk = if self.segment_records == 0 { records.len() } else { self.segment_records };
        let images: Vec<(Vec<u8>, u64)> = records.chunks(chunk).map(|c| (encode_segment(c), c.len() as u64)).collect();
        if let Some(max) = self.max_bytes {
            let needed: u64 = images.iter().map(|(b, _)| b.len() as u64).sum();
            let available = max.saturating_sub(self.bytes_on_disk());
            if needed > available {
                return Err(SpillError::Full { needed, available });
            }
        }
        for (image, frames) in images {
            let seq = self.next_seq;
            let path = self.dir.join(format!("seg-{seq:08}.spill"));
            write_atomic(&path, &image)?;
            self.next_seq += 1;
            self.segments.push_back(Segment { seq, path, frames, bytes: image.len() as u64 });
        }
        Ok(())
    }

    /// Drops corrupt segments at the head until a readable one is found.
    fn read_head(&mut self) -> Result<Option<Vec<RawRecord>>, SpillError> {
        while let Some(head) = self.segments.front().cloned() {
            let bytes = fs::read(&head.path).map_err(io_err(&head.path))?;
            match decode_segment(&bytes) {
                Ok(records) => return Ok(Some(records)),
                Err(_) => {
                    self.corrupt_segments += 1;
                    self.corrupt_records += head.frames - self.head_offset;
                    self.segments.pop_front();
                    self.head_offset = 0;
                    let _ = fs::remove_file(&head.path);
                    self.store_cursor()?;
                }
            }
        }
        Ok(None)
    }

    /// Up to `n` oldest records, without removing them.
    ///
    /// Corrupt segments met on the way are discarded and counted.
    pub fn peek(&mut self, n: usize) -> Result<Vec<RawRecord>, SpillError> {
        let mut out = Vec::new();
        if n == 0 {
            return Ok(out);
        }
        if self.read_head()?.is_none() {
            return Ok(out);
        }
        let mut i = 0;
        let mut offset = self.head_offset as usize;
        while out.len() < n && i < self.segments.len() {
            let seg = self.segments[i].clone();
            let bytes = fs::read(&seg.path).map_err(io_err(&seg.path))?;
            match decode_segment(&bytes) {
                Ok(records) => {
                    let take = (n - out.len()).min(records.len().saturating_sub(offset));
                    out.extend(records.into_iter().skip(offset).take(take));
                    i += 1;
                }
                Err(_) => {
                    // Stop at a corrupt segment; it is dropped once it reaches the head.
                    break;
                }
            }
            offset = 0;
        }
        Ok(out)
    }

    /// Removes the `n` oldest records. Fully consumed segments are deleted.
    pub fn consume(&mut self, mut n: u64) -> Result<(), SpillError> {
        while n > 0 {
            let Some(head) = self.segments.front() else { break };
            let left = head.frames - self.head_offset;
            if n >= left {
                n -= left;
                let path = head.path.clone();
                self.segments.pop_front();
                self.head_offset = 0;
                fs::remove_file(&path).map_err(io_err(&path))?;
            } else {
                self.head_offset += n;
                n = 0;
            }
        }
        self.store_cursor()
    }

    /// Takes up to `budget` records off the queue in FIFO order.
    pub fn reload(&mut self, budget: usize) -> Result<Vec<RawRecord>, SpillError> {
        let records = self.peek(budget)?;
        self.consume(records.len() as u64)?;
        Ok(records)
    }
}
