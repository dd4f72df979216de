//! Durable record storage.
//!
//! A [`SegmentLog`] keeps one append-only file per entity type in a
//! directory. Each record is a 4-byte big-endian length followed by that
//! many bytes of canonical JSON. Appends are fsynced before they return.
//! On open, a torn tail (short length, short payload or unparsable record)
//! is truncated away; everything before it is intact by construction.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use super::{HistoryError, TimeSeriesRecord};
use crate::model::{from_value_typed, to_canonical_vec};

/// Where records go before they are acknowledged.
pub trait Sink: Send {
    /// Make `records` durable. Either all of them are stored or an error
    /// is returned and none are acknowledged.
    fn append(&mut self, records: &[TimeSeriesRecord]) -> Result<(), HistoryError>;

    /// Everything stored so far, in append order per entity type.
    fn load(&mut self) -> Result<Vec<TimeSeriesRecord>, HistoryError>;
}

/// Volatile sink for tests and simulation.
#[derive(Debug, Default)]
pub struct MemorySink {
    records: Vec<TimeSeriesRecord>,
    max_records: Option<usize>,
}

impl MemorySink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_limit(max_records: usize) -> Self {
        MemorySink {
            records: Vec::new(),
            max_records: Some(max_records),
        }
    }
}

impl Sink for MemorySink {
    fn append(&mut self, records: &[TimeSeriesRecord]) -> Result<(), HistoryError> {
        if self.max_records.is_some_and(|m| self.records.len() + records.len() > m) {
            return Err(HistoryError::StorageFull);
        }
        self.records.extend_from_slice(records);
        Ok(())
    }

    fn load(&mut self) -> Result<Vec<TimeSeriesRecord>, HistoryError> {
        Ok(self.records.clone())
    }
}

#[derive(Debug)]
pub struct SegmentLog {
    dir: PathBuf,
    max_bytes: Option<u64>,
    bytes: u64,
    files: BTreeMap<String, File>,
}

pub const SEGMENT_EXT: &str = "seg";

fn io(path: &Path, e: std::io::Error) -> HistoryError {
    HistoryError::Io(format!("{}: {e}", path.display()))
}

/// File name for an entity type; bytes outside `[A-Za-z0-9_-]` are
/// percent-encoded so any type name maps to a distinct, portable name.
pub fn segment_name(entity_type: &str) -> String {
    let mut out = String::new();
    for b in entity_type.bytes() {
        if b.is_ascii_alphanumeric() || b == b'_' || b == b'-' {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    format!("{out}.{SEGMENT_EXT}")
}

/// Split a segment image into records; returns them with the length of
/// the valid prefix.
pub fn decode_segment(bytes: &[u8]) -> (Vec<TimeSeriesRecord>, usize) {
    let mut out = Vec::new();
    let mut pos = 0;
    while bytes.len() - pos >= 4 {
        let len = u32::from_be_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes")) as usize;
        let start = pos + 4;
        let Some(payload) = bytes.get(start..start + len) else { break };
        let Ok(v) = serde_json::from_slice(payload) else { break };
        let Ok(r) = from_value_typed::<TimeSeriesRecord>(v) else { break };
        out.push(r);
        pos = start + len;
    }
    (out, pos)
}

pub fn encode_record(r: &TimeSeriesRecord) -> Vec<u8> {
    let payload = to_canonical_vec(r);
    let mut out = Vec::with_capacity(payload.len() + 4);
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(&payload);
    out
}

impl SegmentLog {
    /// Open (creating if needed) the log in `dir`.
    pub fn open(dir: impl Into<PathBuf>, max_bytes: Option<u64>) -> Result<Self, HistoryError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
        Ok(SegmentLog {
            dir,
            max_bytes,
            bytes: 0,
            files: BTreeMap::new(),
        })
    }

    fn file(&mut self, entity_type: &str) -> Result<&mut File, HistoryError> {
        let name = segment_name(entity_type);
        if !self.files.contains_key(&name) {
            let path = self.dir.join(&name);
            let f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| io(&path, e))?;
            self.files.insert(name.clone(), f);
        }
        Ok(self.files.get_mut(&name).expect("inserted above"))
    }

    pub fn size(&self) -> u64 {
        self.bytes
    }
}

impl Sink for SegmentLog {
    fn append(&mut self, records: &[TimeSeriesRecord]) -> Result<(), HistoryError> {
        let mut by_type: BTreeMap<&str, Vec<u8>> = BTreeMap::new();
        for r in records {
            by_type
                .entry(r.entity.entity_type())
                .or_default()
                .extend(encode_record(r));
        }
        let total: u64 = by_type.values().map(|b| b.len() as u64).sum();
        if self.max_bytes.is_some_and(|m| self.bytes + total > m) {
            return Err(HistoryError::StorageFull);
        }
        for (ty, bytes) in by_type {
            let path = self.dir.join(segment_name(ty));
            let f = self.file(ty)?;
            f.write_all(&bytes).map_err(|e| io(&path, e))?;
            f.sync_data().map_err(|e| io(&path, e))?;
        }
        self.bytes += total;
        Ok(())
    }

    fn load(&mut self) -> Result<Vec<TimeSeriesRecord>, HistoryError> {
        let mut out = Vec::new();
        let mut entries: Vec<PathBuf> = fs::read_dir(&self.dir)
            .map_err(|e| io(&self.dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == SEGMENT_EXT))
            .collect();
        entries.sort();
        self.bytes = 0;
        for path in entries {
            let mut bytes = Vec::new();
            File::open(&path)
                .and_then(|mut f| f.read_to_end(&mut bytes))
                .map_err(|e| io(&path, e))?;
            let (records, valid) = decode_segment(&bytes);
            if valid < bytes.len() {
                log::warn!(
                    "{}: truncating {} bytes of torn tail",
                    path.display(),
                    bytes.len() - valid
                );
                let f = OpenOptions::new().write(true).open(&path).map_err(|e| io(&path, e))?;
                f.set_len(valid as u64).map_err(|e| io(&path, e))?;
                f.sync_all().map_err(|e| io(&path, e))?;
            }
            self.bytes += valid as u64;
            out.extend(records);
        }
        Ok(out)
    }
}
