//! Historical time series of notified context.
//!
//! Every attribute of every element in an inbound notification becomes one
//! [`TimeSeriesRecord`], stamped with the attribute's `timestamp` metadatum
//! (or the arrival time) and carrying its metadata verbatim. Records are
//! made durable through a [`Sink`] before the notification is acknowledged
//! and indexed per `(entity, attribute)` in time order.

mod segment;

use std::collections::{BTreeMap, HashSet};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub use segment::{decode_segment, encode_record, segment_name, MemorySink, SegmentLog, Sink, SEGMENT_EXT};

use crate::broker::Notification;
use crate::model::{to_canonical_string, EntityRef, Metadatum};
use crate::net::{to_value, ApiError, Clock, Request, Service};

/// Cap on raw query results when the caller gives none.
pub const DEFAULT_LIMIT: usize = 1_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HistoryError {
    #[error("storage is full")]
    StorageFull,
    #[error("series `{0}` has non-numeric values")]
    NonNumericSeries(String),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("storage I/O failed: {0}")]
    Io(String),
}

impl From<HistoryError> for ApiError {
    fn from(e: HistoryError) -> Self {
        let code = match &e {
            HistoryError::StorageFull => "StorageFull",
            HistoryError::NonNumericSeries(_) => "NonNumericSeries",
            HistoryError::InvalidQuery(_) => "InvalidQuery",
            HistoryError::Io(_) => "StorageError",
        };
        ApiError::new(code, e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesRecord {
    pub entity: EntityRef,
    pub attribute: String,
    pub value: Value,
    #[serde(default)]
    pub metadata: Vec<Metadatum>,
    pub t: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Order {
    #[default]
    Asc,
    Desc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawQuery {
    pub entity: EntityRef,
    pub attribute: String,
    pub from: u64,
    pub to: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    #[serde(default)]
    pub order: Order,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum AggregateOp {
    Avg,
    Min,
    Max,
    Count,
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateQuery {
    pub entity: EntityRef,
    pub attribute: String,
    pub from: u64,
    pub to: u64,
    pub resolution: u64,
    #[serde(rename = "fn")]
    pub op: AggregateOp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub start: u64,
    pub value: Value,
}

type SeriesKey = (String, String, String);

pub struct HistoryStore {
    sink: Box<dyn Sink>,
    series: BTreeMap<SeriesKey, Vec<TimeSeriesRecord>>,
    seen: HashSet<(SeriesKey, u64, String)>,
}

fn key_of(r: &TimeSeriesRecord) -> SeriesKey {
    (
        r.entity.entity_type().to_string(),
        r.entity.id().to_string(),
        r.attribute.clone(),
    )
}

fn check_range(from: u64, to: u64) -> Result<(), HistoryError> {
    if from >= to {
        return Err(HistoryError::InvalidQuery(format!("empty range [{from}, {to})")));
    }
    Ok(())
}

impl HistoryStore {
    /// Open over `sink`, rebuilding the index from what it holds.
    pub fn open(mut sink: Box<dyn Sink>) -> Result<Self, HistoryError> {
        let stored = sink.load()?;
        let mut store = HistoryStore {
            sink,
            series: BTreeMap::new(),
            seen: HashSet::new(),
        };
        for r in stored {
            if store.seen.insert(store.dedup_key(&r)) {
                store.index(r);
            }
        }
        Ok(store)
    }

    pub fn in_memory() -> Self {
        Self::open(Box::new(MemorySink::new())).expect("memory sink cannot fail")
    }

    fn dedup_key(&self, r: &TimeSeriesRecord) -> (SeriesKey, u64, String) {
        (key_of(r), r.t, to_canonical_string(&r.value))
    }

    fn index(&mut self, r: TimeSeriesRecord) {
        let s = self.series.entry(key_of(&r)).or_default();
        let at = s.partition_point(|x| x.t <= r.t);
        s.insert(at, r);
    }

    /// Records a notification would produce, before deduplication.
    pub fn records_of(n: &Notification, arrival: u64) -> Vec<TimeSeriesRecord> {
        n.elements
            .iter()
            .flat_map(|e| {
                e.attributes().iter().map(move |a| TimeSeriesRecord {
                    entity: e.entity().clone(),
                    attribute: a.name().to_string(),
                    value: a.value().clone(),
                    metadata: a.metadata().to_vec(),
                    t: a.timestamp().unwrap_or(arrival),
                })
            })
            .collect()
    }

    /// Persist and index a notification; returns the number of new records.
    pub fn ingest(&mut self, n: &Notification, arrival: u64) -> Result<usize, HistoryError> {
        let mut fresh = Vec::new();
        let mut batch = HashSet::new();
        for r in Self::records_of(n, arrival) {
            let k = self.dedup_key(&r);
            if !self.seen.contains(&k) && batch.insert(k) {
                fresh.push(r);
            }
        }
        if fresh.is_empty() {
            return Ok(0);
        }
        self.sink.append(&fresh)?;
        self.seen.extend(batch);
        let count = fresh.len();
        for r in fresh {
            self.index(r);
        }
        Ok(count)
    }

    fn range(&self, entity: &EntityRef, attribute: &str, from: u64, to: u64) -> &[TimeSeriesRecord] {
        let key = (entity.entity_type().to_string(), entity.id().to_string(), attribute.to_string());
        let Some(s) = self.series.get(&key) else { return &[] };
        let lo = s.partition_point(|r| r.t < from);
        let hi = s.partition_point(|r| r.t < to);
        &s[lo..hi]
    }

    /// Records with `t` in `[from, to)`; an empty range yields nothing.
    pub fn query_raw(&self, q: &RawQuery) -> Result<Vec<TimeSeriesRecord>, HistoryError> {
        if q.from >= q.to {
            return Ok(Vec::new());
        }
        let rs = self.range(&q.entity, &q.attribute, q.from, q.to);
        let limit = q.limit.unwrap_or(DEFAULT_LIMIT);
        Ok(match q.order {
            Order::Asc => rs.iter().take(limit).cloned().collect(),
            Order::Desc => rs.iter().rev().take(limit).cloned().collect(),
        })
    }

    pub fn query_aggregate(&self, q: &AggregateQuery) -> Result<Vec<Bucket>, HistoryError> {
        check_range(q.from, q.to)?;
        if q.resolution == 0 {
            return Err(HistoryError::InvalidQuery("resolution must be positive".into()));
        }
        let rs = self.range(&q.entity, &q.attribute, q.from, q.to);
        let mut buckets: BTreeMap<u64, Vec<&TimeSeriesRecord>> = BTreeMap::new();
        for r in rs {
            let k = (r.t - q.from) / q.resolution;
            buckets.entry(q.from + k * q.resolution).or_default().push(r);
        }
        buckets
            .into_iter()
            .map(|(start, rs)| {
                fold(q.op, &rs, &q.attribute).map(|value| Bucket { start, value })
            })
            .collect()
    }

    pub fn series_count(&self) -> usize {
        self.series.len()
    }

    pub fn record_count(&self) -> usize {
        self.series.values().map(Vec::len).sum()
    }
}

fn numbers(rs: &[&TimeSeriesRecord], attribute: &str) -> Result<Vec<f64>, HistoryError> {
    rs.iter()
        .map(|r| {
            r.value
                .as_f64()
                .ok_or_else(|| HistoryError::NonNumericSeries(attribute.to_string()))
        })
        .collect()
}

fn fold(op: AggregateOp, rs: &[&TimeSeriesRecord], attribute: &str) -> Result<Value, HistoryError> {
    Ok(match op {
        AggregateOp::Count => json!(rs.len()),
        AggregateOp::Last => rs.last().map(|r| r.value.clone()).unwrap_or(Value::Null),
        AggregateOp::Avg => {
            let xs = numbers(rs, attribute)?;
            json!(xs.iter().sum::<f64>() / xs.len() as f64)
        }
        AggregateOp::Min | AggregateOp::Max => {
            let xs = numbers(rs, attribute)?;
            let mut best = 0;
            for (i, x) in xs.iter().enumerate() {
                let better = if op == AggregateOp::Min { *x < xs[best] } else { *x > xs[best] };
                if better {
                    best = i;
                }
            }
            rs[best].value.clone()
        }
    })
}

/// The history sink as a network service.
pub struct History {
    store: Mutex<HistoryStore>,
    clock: Arc<dyn Clock>,
}

impl History {
    pub fn new(store: HistoryStore, clock: Arc<dyn Clock>) -> Self {
        History {
            store: Mutex::new(store),
            clock,
        }
    }

    fn store(&self) -> std::sync::MutexGuard<'_, HistoryStore> {
        self.store.lock().expect("history lock")
    }

    pub fn query_raw(&self, q: &RawQuery) -> Result<Vec<TimeSeriesRecord>, HistoryError> {
        self.store().query_raw(q)
    }

    pub fn query_aggregate(&self, q: &AggregateQuery) -> Result<Vec<Bucket>, HistoryError> {
        self.store().query_aggregate(q)
    }

    pub fn record_count(&self) -> usize {
        self.store().record_count()
    }
}

impl Service for History {
    fn handle(&self, req: &Request) -> Result<Value, ApiError> {
        match req.path.as_str() {
            "/v1/notify" => {
                let n: Notification = req.parse()?;
                let written = self.store().ingest(&n, self.clock.now_ms())?;
                Ok(json!({ "written": written }))
            }
            "/v1/history/raw" => {
                let q: RawQuery = req.parse()?;
                Ok(json!({ "records": to_value(&self.query_raw(&q)?) }))
            }
            "/v1/history/aggregate" => {
                let q: AggregateQuery = req.parse()?;
                Ok(json!({ "buckets": to_value(&self.query_aggregate(&q)?) }))
            }
            other => Err(ApiError::not_found(other)),
        }
    }
}
