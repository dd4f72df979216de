//! In-memory network with a logical clock.
//!
//! Nodes are addressed as `mem://<name>`. Synchronous requests are
//! dispatched immediately; asynchronous sends are queued per `(from, to)`
//! link and delivered in FIFO order as simulated time advances, with the
//! same retry schedule real deliveries use. Links can be partitioned and
//! delayed. Given the same sequence of calls, the event log is identical
//! across runs.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::{Arc, Mutex, Weak};

use serde_json::Value;

use crate::model::to_canonical_string;
use crate::net::{split_url, ApiError, Clock, Request, RetryPolicy, Service, SimClock, Transport, TransportError};

/// Name used for requests issued by the harness itself.
pub const CLIENT: &str = "client";

const STEP_LIMIT: u64 = 5_000_000;

#[derive(Debug)]
struct Pending {
    seq: u64,
    ready_at: u64,
    path: String,
    body: Value,
    failed: u32,
}

#[derive(Debug)]
struct Partition {
    nodes: BTreeSet<String>,
    until: u64,
}

#[derive(Default)]
struct NetState {
    channels: BTreeMap<(String, String), VecDeque<Pending>>,
    seq: u64,
    partitions: Vec<Partition>,
    delays: BTreeMap<(String, String), u64>,
    log: Vec<String>,
    steps: u64,
}

struct Inner {
    clock: SimClock,
    policy: RetryPolicy,
    nodes: Mutex<BTreeMap<String, Arc<dyn Service>>>,
    state: Mutex<NetState>,
}

impl Inner {
    fn node(&self, name: &str) -> Option<Arc<dyn Service>> {
        self.nodes.lock().expect("node table").get(name).cloned()
    }

    fn blocked(&self, st: &NetState, a: &str, b: &str) -> bool {
        let now = self.clock.now_ms();
        st.partitions
            .iter()
            .any(|p| p.until > now && p.nodes.contains(a) != p.nodes.contains(b))
    }

    fn log(&self, line: String) {
        let now = self.clock.now_ms();
        self.state.lock().expect("net state").log.push(format!("{now:>8} {line}"));
    }
}

#[derive(Clone)]
pub struct SimNet {
    inner: Arc<Inner>,
}

impl Default for SimNet {
    fn default() -> Self {
        Self::new(SimClock::new(0))
    }
}

impl SimNet {
    pub fn new(clock: SimClock) -> Self {
        SimNet {
            inner: Arc::new(Inner {
                clock,
                policy: RetryPolicy::default(),
                nodes: Mutex::new(BTreeMap::new()),
                state: Mutex::new(NetState::default()),
            }),
        }
    }

    pub fn clock(&self) -> SimClock {
        self.inner.clock.clone()
    }

    pub fn clock_arc(&self) -> Arc<dyn Clock> {
        Arc::new(self.inner.clock.clone())
    }

    pub fn now(&self) -> u64 {
        self.inner.clock.now_ms()
    }

    /// Outbound transport for the node called `name`.
    pub fn transport(&self, name: &str) -> Arc<dyn Transport> {
        Arc::new(SimTransport {
            net: Arc::downgrade(&self.inner),
            me: name.to_string(),
        })
    }

    pub fn add_node(&self, name: &str, service: Arc<dyn Service>) {
        self.inner
            .nodes
            .lock()
            .expect("node table")
            .insert(name.to_string(), service);
    }

    pub fn has_node(&self, name: &str) -> bool {
        self.inner.node(name).is_some()
    }

    /// Isolate `nodes` from everyone else for `duration` ms.
    pub fn partition(&self, nodes: impl IntoIterator<Item = String>, duration: u64) {
        let until = self.now() + duration;
        let nodes: BTreeSet<String> = nodes.into_iter().collect();
        self.inner.log(format!("partition {nodes:?} until {until}"));
        self.inner
            .state
            .lock()
            .expect("net state")
            .partitions
            .push(Partition { nodes, until });
    }

    /// Extra latency applied to asynchronous sends on one link.
    pub fn set_delay(&self, from: &str, to: &str, ms: u64) {
        self.inner
            .state
            .lock()
            .expect("net state")
            .delays
            .insert((from.to_string(), to.to_string()), ms);
    }

    pub fn log(&self) -> Vec<String> {
        self.inner.state.lock().expect("net state").log.clone()
    }

    pub fn note(&self, line: impl Into<String>) {
        self.inner.log(line.into());
    }

    /// Earliest pending event: `(time, is_timer)`.
    fn next_event(&self) -> Option<(u64, bool)> {
        let msg = {
            let st = self.inner.state.lock().expect("net state");
            st.channels
                .values()
                .filter_map(|q| q.front().map(|p| p.ready_at))
                .min()
        };
        let nodes: Vec<_> = self.inner.nodes.lock().expect("node table").values().cloned().collect();
        let timer = nodes.iter().filter_map(|n| n.next_timer()).min();
        match (timer, msg) {
            (Some(t), Some(m)) if t <= m => Some((t, true)),
            (_, Some(m)) => Some((m, false)),
            (Some(t), None) => Some((t, true)),
            (None, None) => None,
        }
    }

    /// Process one event due at or before `limit`. Returns false when idle.
    pub fn step(&self, limit: u64) -> bool {
        let Some((t, is_timer)) = self.next_event() else {
            return false;
        };
        if t > limit {
            return false;
        }
        {
            let mut st = self.inner.state.lock().expect("net state");
            st.steps += 1;
            assert!(st.steps < STEP_LIMIT, "simulation exceeded {STEP_LIMIT} steps; livelock?");
        }
        self.inner.clock.advance_to(t);
        let now = self.now();
        if is_timer {
            let nodes: Vec<_> = self
                .inner
                .nodes
                .lock()
                .expect("node table")
                .iter()
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect();
            for (name, node) in nodes {
                if node.next_timer().is_some_and(|d| d <= now) {
                    self.inner.log(format!("timer {name}"));
                    node.on_timer(now);
                }
            }
        } else {
            self.deliver_next(now);
        }
        true
    }

    fn deliver_next(&self, now: u64) {
        let (key, pending) = {
            let mut st = self.inner.state.lock().expect("net state");
            let key = st
                .channels
                .iter()
                .filter_map(|(k, q)| q.front().map(|p| ((p.ready_at, p.seq), k.clone())))
                .min()
                .map(|(_, k)| k)
                .expect("next_event saw a message");
            let p = st.channels.get_mut(&key).and_then(VecDeque::pop_front).expect("head");
            (key, p)
        };
        let (from, to) = &key;
        let blocked = {
            let st = self.inner.state.lock().expect("net state");
            self.inner.blocked(&st, from, to)
        };
        let node = if blocked { None } else { self.inner.node(to) };
        match node {
            Some(node) => {
                self.inner.log(format!(
                    "deliver {from} -> {to}{} {}",
                    pending.path,
                    to_canonical_string(&pending.body)
                ));
                let req = Request::new(pending.path.clone(), pending.body.clone());
                if let Err(e) = node.handle(&req) {
                    self.inner.log(format!("rejected {from} -> {to}{}: {e}", pending.path));
                }
                let mut st = self.inner.state.lock().expect("net state");
                if st.channels.get(&key).is_some_and(VecDeque::is_empty) {
                    st.channels.remove(&key);
                }
            }
            None => {
                let failed = pending.failed + 1;
                match self.inner.policy.delay_after(failed) {
                    Some(d) => {
                        self.inner.log(format!("retry {from} -> {to}{} in {d}ms", pending.path));
                        let mut st = self.inner.state.lock().expect("net state");
                        st.channels.entry(key.clone()).or_default().push_front(Pending {
                            ready_at: now + d,
                            failed,
                            ..pending
                        });
                    }
                    None => {
                        self.inner
                            .log(format!("delivery failed {from} -> {to}{} after {failed} attempts", pending.path));
                        let mut st = self.inner.state.lock().expect("net state");
                        if st.channels.get(&key).is_some_and(VecDeque::is_empty) {
                            st.channels.remove(&key);
                        }
                    }
                }
            }
        }
    }

    /// Advance to `target`, processing every event due on the way.
    pub fn run_until(&self, target: u64) {
        while self.step(target) {}
        self.inner.clock.advance_to(target);
    }

    /// Process everything due at the current instant.
    pub fn drain(&self) {
        self.run_until(self.now());
    }

    /// Synchronous request on behalf of `from`.
    pub fn request_from(&self, from: &str, url: &str, body: &Value) -> Result<Value, TransportError> {
        SimTransport {
            net: Arc::downgrade(&self.inner),
            me: from.to_string(),
        }
        .request(url, body, &[])
    }
}

struct SimTransport {
    net: Weak<Inner>,
    me: String,
}

impl SimTransport {
    fn inner(&self) -> Option<Arc<Inner>> {
        self.net.upgrade()
    }
}

impl Transport for SimTransport {
    fn request(&self, url: &str, body: &Value, trace: &[String]) -> Result<Value, TransportError> {
        let inner = self.inner().ok_or_else(|| TransportError::Unreachable("network shut down".into()))?;
        let (base, path) = split_url(url).ok_or_else(|| TransportError::Protocol(format!("bad URL {url}")))?;
        let to = base.trim_start_matches("mem://").to_string();
        let blocked = {
            let st = inner.state.lock().expect("net state");
            inner.blocked(&st, &self.me, &to)
        };
        let node = if blocked { None } else { inner.node(&to) };
        let Some(node) = node else {
            inner.log(format!("unreachable {} -> {to}{path}", self.me));
            return Err(TransportError::Unreachable(url.to_string()));
        };
        inner.log(format!("request {} -> {to}{path} {}", self.me, to_canonical_string(body)));
        let req = Request {
            path,
            body: body.clone(),
            trace: trace.to_vec(),
        };
        node.handle(&req).map_err(|e: ApiError| TransportError::Rejected(e))
    }

    fn send(&self, url: &str, body: Value) {
        let Some(inner) = self.inner() else { return };
        let Some((base, path)) = split_url(url) else {
            inner.log(format!("dropping send to malformed URL {url}"));
            return;
        };
        let to = base.trim_start_matches("mem://").to_string();
        let now = inner.clock.now_ms();
        let mut st = inner.state.lock().expect("net state");
        let key = (self.me.clone(), to);
        let delay = st.delays.get(&key).copied().unwrap_or(0);
        st.seq += 1;
        let seq = st.seq;
        st.channels.entry(key).or_default().push_back(Pending {
            seq,
            ready_at: now + delay,
            path,
            body,
            failed: 0,
        });
    }
}

/// Records every request it receives; stands in for consumers and devices.
#[derive(Default)]
pub struct Recorder {
    received: Mutex<Vec<(u64, String, Value)>>,
    clock: Option<Arc<dyn Clock>>,
}

impl Recorder {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        Recorder {
            received: Mutex::new(Vec::new()),
            clock: Some(clock),
        }
    }

    /// `(arrival time, path, body)` in arrival order.
    pub fn received(&self) -> Vec<(u64, String, Value)> {
        self.received.lock().expect("recorder").clone()
    }

    pub fn bodies(&self) -> Vec<Value> {
        self.received().into_iter().map(|(_, _, b)| b).collect()
    }
}

impl Service for Recorder {
    fn handle(&self, req: &Request) -> Result<Value, ApiError> {
        let now = self.clock.as_ref().map_or(0, |c| c.now_ms());
        self.received
            .lock()
            .expect("recorder")
            .push((now, req.path.clone(), req.body.clone()));
        Ok(Value::Object(Default::default()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn fifo_and_retry_under_partition() {
        let net = SimNet::default();
        let rec = Arc::new(Recorder::new(net.clock_arc()));
        net.add_node("c", rec.clone());
        let t = net.transport("a");
        net.partition(["c".to_string()], 500);
        t.send("mem://c/x", json!(1));
        t.send("mem://c/x", json!(2));
        net.run_until(2_000);
        // First attempt at 0 fails, retried at 100 (blocked), then at 1100.
        let got = rec.received();
        assert_eq!(got.iter().map(|r| r.2.clone()).collect::<Vec<_>>(), vec![json!(1), json!(2)]);
        assert_eq!(got[0].0, 1_100);
    }

    #[test]
    fn gives_up_after_three_attempts() {
        let net = SimNet::default();
        let t = net.transport("a");
        t.send("mem://nobody/x", json!(1));
        net.run_until(20_000);
        let log = net.log();
        assert_eq!(log.iter().filter(|l| l.contains("retry")).count(), 2);
        assert!(log.last().unwrap().contains("after 3 attempts"));
    }

    #[test]
    fn delay_orders_by_time() {
        let net = SimNet::default();
        let rec = Arc::new(Recorder::new(net.clock_arc()));
        net.add_node("c", rec.clone());
        net.set_delay("a", "c", 50);
        net.transport("a").send("mem://c/x", json!("slow"));
        net.transport("b").send("mem://c/x", json!("fast"));
        net.run_until(100);
        assert_eq!(rec.bodies(), vec![json!("fast"), json!("slow")]);
        assert_eq!(rec.received()[1].0, 50);
    }
}
