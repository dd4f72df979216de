//! HTTP binding: a listener that drives a [`Service`] plus its timers, and
//! an outbound [`Transport`] over blocking HTTP.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use ctxmesh_core::model::to_canonical_string;
use ctxmesh_core::net::{
    deliver_with_retry, split_url, ApiError, Clock, Request, RetryPolicy, Service, Transport, TransportError,
    TRACE_HEADER,
};
use serde_json::Value;

const TIMER_TICK_MS: u64 = 20;

pub struct Listener {
    server: Arc<tiny_http::Server>,
    pub addr: SocketAddr,
}

impl Listener {
    pub fn bind(listen: &str) -> Result<Self, String> {
        let server = tiny_http::Server::http(listen).map_err(|e| format!("cannot listen on {listen}: {e}"))?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| format!("{listen} is not an IP address"))?;
        Ok(Listener {
            server: Arc::new(server),
            addr,
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Serve `service` forever with `workers` request threads and one timer thread.
    pub fn serve(self, service: Arc<dyn Service>, clock: Arc<dyn Clock>, workers: usize) {
        let timers = {
            let service = service.clone();
            thread::spawn(move || run_timers(service.as_ref(), clock.as_ref()))
        };
        let handles: Vec<_> = (0..workers.max(1))
            .map(|_| {
                let server = self.server.clone();
                let service = service.clone();
                thread::spawn(move || {
                    for req in server.incoming_requests() {
                        respond(service.as_ref(), req);
                    }
                })
            })
            .collect();
        for h in handles {
            let _ = h.join();
        }
        let _ = timers.join();
    }
}

fn run_timers(service: &dyn Service, clock: &dyn Clock) {
    loop {
        let now = clock.now_ms();
        match service.next_timer() {
            Some(t) if t <= now => service.on_timer(now),
            Some(t) => thread::sleep(Duration::from_millis((t - now).min(TIMER_TICK_MS))),
            None => thread::sleep(Duration::from_millis(TIMER_TICK_MS)),
        }
    }
}

fn json_header() -> tiny_http::Header {
    tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..]).expect("static header")
}

fn respond(service: &dyn Service, mut req: tiny_http::Request) {
    let (status, body) = match decode(&mut req) {
        Ok(r) => {
            log::debug!("{} {}", r.path, to_canonical_string(&r.body));
            match service.handle(&r) {
                Ok(v) => (200, to_canonical_string(&v)),
                Err(e) => (400, to_canonical_string(&e)),
            }
        }
        Err(e) => (400, to_canonical_string(&e)),
    };
    let resp = tiny_http::Response::from_string(body)
        .with_status_code(status)
        .with_header(json_header());
    if let Err(e) = req.respond(resp) {
        log::debug!("client went away: {e}");
    }
}

fn decode(req: &mut tiny_http::Request) -> Result<Request, ApiError> {
    if *req.method() != tiny_http::Method::Post {
        return Err(ApiError::new("MethodNotAllowed", "only POST is accepted"));
    }
    let trace = req
        .headers()
        .iter()
        .find(|h| h.field.equiv(TRACE_HEADER))
        .map(|h| {
            h.value
                .as_str()
                .split(',')
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect()
        })
        .unwrap_or_default();
    let mut text = String::new();
    req.as_reader()
        .read_to_string(&mut text)
        .map_err(|e| ApiError::new("MalformedJson", e.to_string()))?;
    let body = if text.trim().is_empty() {
        Value::Object(Default::default())
    } else {
        serde_json::from_str(&text).map_err(|e| ApiError::new("MalformedJson", e.to_string()))?
    };
    let path = req.url().split('?').next().unwrap_or("/").to_string();
    Ok(Request { path, body, trace })
}

/// Outbound HTTP. Asynchronous sends get one delivery thread per
/// destination authority so per-destination order is kept.
#[derive(Clone)]
pub struct HttpTransport {
    agent: ureq::Agent,
    queues: Arc<Mutex<HashMap<String, Sender<(String, Value)>>>>,
    in_flight: Arc<AtomicUsize>,
    retry: RetryPolicy,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpTransport {
            agent,
            queues: Arc::new(Mutex::new(HashMap::new())),
            in_flight: Arc::new(AtomicUsize::new(0)),
            retry: RetryPolicy::default(),
        }
    }

    /// Block until every queued asynchronous delivery has been attempted.
    pub fn flush(&self) {
        while self.in_flight.load(Ordering::SeqCst) > 0 {
            thread::sleep(Duration::from_millis(5));
        }
    }

    fn queue_for(&self, base: &str) -> Sender<(String, Value)> {
        let mut queues = self.queues.lock().expect("queue lock");
        if let Some(tx) = queues.get(base) {
            return tx.clone();
        }
        let (tx, rx) = mpsc::channel::<(String, Value)>();
        let me = self.clone();
        thread::spawn(move || {
            for (url, body) in rx {
                let _ = deliver_with_retry(&me, &url, &body, &me.retry, &mut |ms| {
                    thread::sleep(Duration::from_millis(ms))
                });
                me.in_flight.fetch_sub(1, Ordering::SeqCst);
            }
        });
        queues.insert(base.to_string(), tx.clone());
        tx
    }
}

fn transport_error(url: &str, e: ureq::Error) -> TransportError {
    match e {
        ureq::Error::Timeout(_) => TransportError::Timeout(url.to_string()),
        ureq::Error::Io(_) | ureq::Error::ConnectionFailed | ureq::Error::HostNotFound => {
            TransportError::Unreachable(format!("{url}: {e}"))
        }
        other => TransportError::Protocol(format!("{url}: {other}")),
    }
}

impl Transport for HttpTransport {
    fn request(&self, url: &str, body: &Value, trace: &[String]) -> Result<Value, TransportError> {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if !trace.is_empty() {
            req = req.header(TRACE_HEADER, trace.join(","));
        }
        let mut resp = req
            .send(to_canonical_string(body))
            .map_err(|e| transport_error(url, e))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| transport_error(url, e))?;
        let value: Value = if text.trim().is_empty() {
            Value::Null
        } else {
            serde_json::from_str(&text).map_err(|e| TransportError::Protocol(format!("{url}: {e}")))?
        };
        match status {
            200..=299 => Ok(value),
            _ => match serde_json::from_value::<ApiError>(value) {
                Ok(api) => Err(TransportError::Rejected(api)),
                Err(_) => Err(TransportError::Protocol(format!("{url}: HTTP {status}"))),
            },
        }
    }

    fn request_all(&self, calls: &[(String, Value)], trace: &[String]) -> Vec<Result<Value, TransportError>> {
        thread::scope(|s| {
            let handles: Vec<_> = calls
                .iter()
                .map(|(url, body)| s.spawn(move || self.request(url, body, trace)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(TransportError::Protocol("request panicked".into()))))
                .collect()
        })
    }

    fn send(&self, url: &str, body: Value) {
        let base = split_url(url).map(|(b, _)| b).unwrap_or_else(|| url.to_string());
        self.in_flight.fetch_add(1, Ordering::SeqCst);
        if self.queue_for(&base).send((url.to_string(), body)).is_err() {
            self.in_flight.fetch_sub(1, Ordering::SeqCst);
            log::warn!("delivery queue for {base} is closed");
        }
    }
}
