//! Node plumbing shared by every service: clocks, the request/response
//! service boundary, outbound transports and the retry schedule.
//!
//! Services are synchronous state machines. The same `Service` value runs
//! behind an HTTP listener (wall clock) or inside the simulated network
//! (logical clock), which is what makes scenario runs reproducible.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::model::{from_value_typed, ModelError};

/// Header carrying the comma-separated ids of federation nodes already visited.
pub const TRACE_HEADER: &str = "X-Fed-Trace";

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// Logical clock; time only moves forward and only when told to.
#[derive(Debug, Default, Clone)]
pub struct SimClock(Arc<AtomicU64>);

impl SimClock {
    pub fn new(start: u64) -> Self {
        SimClock(Arc::new(AtomicU64::new(start)))
    }

    /// Move to `t`; earlier instants are ignored.
    pub fn advance_to(&self, t: u64) {
        self.0.fetch_max(t, Ordering::SeqCst);
    }
}

impl Clock for SimClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone)]
pub struct Request {
    pub path: String,
    pub body: Value,
    pub trace: Vec<String>,
}

impl Request {
    pub fn new(path: impl Into<String>, body: Value) -> Self {
        Request {
            path: path.into(),
            body,
            trace: Vec::new(),
        }
    }

    pub fn parse<T: DeserializeOwned>(&self) -> Result<T, ApiError> {
        from_value_typed(self.body.clone()).map_err(ApiError::from)
    }
}

/// Error returned to a caller; HTTP 400 with `{"error":code,"detail":...}`.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{code}: {detail}")]
pub struct ApiError {
    #[serde(rename = "error")]
    pub code: String,
    pub detail: String,
}

impl ApiError {
    pub fn new(code: &str, detail: impl Into<String>) -> Self {
        ApiError {
            code: code.to_string(),
            detail: detail.into(),
        }
    }

    pub fn not_found(path: &str) -> Self {
        Self::new("NotFound", format!("no handler for {path}"))
    }
}

impl From<ModelError> for ApiError {
    fn from(e: ModelError) -> Self {
        match &e {
            ModelError::MalformedJson(_) => ApiError::new("MalformedJson", e.to_string()),
            ModelError::InvariantViolation { field, .. } => {
                ApiError::new("InvariantViolation", format!("{field}: {e}"))
            }
        }
    }
}

pub trait Service: Send + Sync {
    fn handle(&self, req: &Request) -> Result<Value, ApiError>;

    /// Earliest pending timer, in clock milliseconds.
    fn next_timer(&self) -> Option<u64> {
        None
    }

    /// Fire every timer due at or before `now`.
    fn on_timer(&self, _now: u64) {}
}

#[derive(Debug, Clone, Error)]
pub enum TransportError {
    #[error("endpoint unreachable: {0}")]
    Unreachable(String),
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("request rejected: {0}")]
    Rejected(ApiError),
    #[error("protocol error: {0}")]
    Protocol(String),
}

/// Outbound side of a node, bound to the node's own identity.
pub trait Transport: Send + Sync {
    /// Synchronous request/response.
    fn request(&self, url: &str, body: &Value, trace: &[String]) -> Result<Value, TransportError>;

    /// Fan-out with a join barrier. Results come back in call order.
    fn request_all(&self, calls: &[(String, Value)], trace: &[String]) -> Vec<Result<Value, TransportError>> {
        calls
            .iter()
            .map(|(url, body)| self.request(url, body, trace))
            .collect()
    }

    /// Fire-and-forget delivery: FIFO per destination, retried on failure
    /// according to [`RetryPolicy::default`].
    fn send(&self, url: &str, body: Value);
}

/// Join a base endpoint (`scheme://authority[/prefix]`) and an API path.
pub fn endpoint_url(endpoint: &str, path: &str) -> String {
    format!("{}{}", endpoint.trim_end_matches('/'), path)
}

/// Split a URL into `scheme://authority` and the path (with query).
pub fn split_url(raw: &str) -> Option<(String, String)> {
    let u = url::Url::parse(raw).ok()?;
    let host = u.host_str()?;
    let base = match u.port() {
        Some(p) => format!("{}://{}:{}", u.scheme(), host, p),
        None => format!("{}://{}", u.scheme(), host),
    };
    let mut path = u.path().to_string();
    if let Some(q) = u.query() {
        path.push('?');
        path.push_str(q);
    }
    Some((base, path))
}

/// Bounded retry schedule for asynchronous deliveries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub backoff_ms: Vec<u64>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            backoff_ms: vec![100, 1_000, 10_000],
        }
    }
}

impl RetryPolicy {
    /// Wait before the next attempt after `failed` attempts, or `None` when exhausted.
    pub fn delay_after(&self, failed: u32) -> Option<u64> {
        if failed >= self.attempts || failed == 0 {
            return None;
        }
        let idx = (failed as usize - 1).min(self.backoff_ms.len().saturating_sub(1));
        Some(self.backoff_ms.get(idx).copied().unwrap_or(0))
    }
}

#[derive(Debug, Clone, Error)]
#[error("delivery to {url} failed after {attempts} attempts: {last}")]
pub struct DeliveryFailed {
    pub url: String,
    pub attempts: u32,
    pub last: TransportError,
}

/// Blocking at-least-once delivery; returns the number of attempts used.
pub fn deliver_with_retry(
    transport: &dyn Transport,
    url: &str,
    body: &Value,
    policy: &RetryPolicy,
    sleep: &mut dyn FnMut(u64),
) -> Result<u32, DeliveryFailed> {
    let mut failed = 0;
    loop {
        match transport.request(url, body, &[]) {
            Ok(_) => return Ok(failed + 1),
            Err(e) => {
                failed += 1;
                match policy.delay_after(failed) {
                    Some(ms) => sleep(ms),
                    None => {
                        log::warn!("dropping delivery to {url} after {failed} attempts: {e}");
                        return Err(DeliveryFailed {
                            url: url.to_string(),
                            attempts: failed,
                            last: e,
                        });
                    }
                }
            }
        }
    }
}

pub fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("wire types always serialize")
}
