//! Executes a [`Script`] over a [`SimNet`] and reports the outcome.
//!
//! Steps run strictly in script order. Before each step the clock is run
//! forward to the step's `at`; before each assertion everything due at the
//! current instant is drained. Steps talk to nodes only through their wire
//! interfaces.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use serde::Serialize;
use serde_json::{json, Value};

use super::script::{Action, ElementMatch, NodeSpec, Script, ScriptError, Step};
use super::simnet::{Recorder, SimNet, CLIENT};
use crate::agent::Agent;
use crate::broker::{Broker, QueryResponse};
use crate::datamodel::ModelCatalog;
use crate::discovery::Discovery;
use crate::federation::{FederationConfig, FederationNode};
use crate::history::{History, HistoryStore, TimeSeriesRecord};
use crate::model::{from_value_typed, to_canonical_string, ContextElement};
use crate::net::{to_value, TransportError};
use crate::orchestrator::{Orchestrator, TaskStatus, Worker, WorkerConfig, WorkerNode};

/// Relative tolerance for numeric comparisons in assertions.
pub const NUMERIC_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Outcome {
    pub line: usize,
    pub step: String,
    pub at: u64,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioReport {
    pub name: String,
    pub passed: bool,
    pub outcomes: Vec<Outcome>,
    pub log: Vec<String>,
}

impl ScenarioReport {
    pub fn to_json(&self) -> Value {
        to_value(self)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let name = if self.name.is_empty() { "(unnamed)" } else { &self.name };
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        let _ = writeln!(out, "scenario {name}: {verdict}");
        for o in &self.outcomes {
            let mark = if o.passed { "ok  " } else { "FAIL" };
            let _ = writeln!(out, "  {mark} line {:>4} @{:>6}ms {}: {}", o.line, o.at, o.step, o.detail);
        }
        let failed = self.outcomes.iter().filter(|o| !o.passed).count();
        let _ = writeln!(
            out,
            "{} checks, {} failed, {} events",
            self.outcomes.len(),
            failed,
            self.log.len()
        );
        out
    }
}

fn url(node: &str) -> String {
    format!("mem://{node}")
}

fn worker_node(script: &Script, name: &str) -> Option<WorkerNode> {
    match script.node(name)? {
        NodeSpec::Worker {
            name,
            tier,
            scopes,
            capacity,
            ..
        } => Some(WorkerNode {
            id: name.clone(),
            tier: *tier,
            scopes: scopes.clone(),
            capacity: *capacity,
            endpoint: Some(url(name)),
        }),
        _ => None,
    }
}

struct Run<'s> {
    script: &'s Script,
    net: SimNet,
    consumers: BTreeMap<String, Arc<Recorder>>,
    labels: BTreeMap<String, String>,
    outcomes: Vec<Outcome>,
}

type StepResult = Result<String, String>;

fn rejected(e: TransportError) -> String {
    match e {
        TransportError::Rejected(api) => api.code,
        other => format!("transport: {other}"),
    }
}

impl<'s> Run<'s> {
    fn boot(script: &'s Script) -> Result<Self, ScriptError> {
        let mut models = ModelCatalog::new(script.models.clone());
        if let Some(dir) = script.model_dir() {
            let loaded = ModelCatalog::load_dir(&dir).map_err(|e| ScriptError::Io {
                path: dir.display().to_string(),
                detail: e.to_string(),
            })?;
            for name in loaded.names().map(str::to_string).collect::<Vec<_>>() {
                if models.get(&name).is_none() {
                    models.insert(loaded.get(&name).expect("listed").clone());
                }
            }
        }
        let net = SimNet::default();
        let mut consumers = BTreeMap::new();
        for n in &script.nodes {
            let clock = net.clock_arc();
            let name = n.item.name();
            let transport = net.transport(name);
            match &n.item {
                NodeSpec::Broker { models: with, .. } => {
                    let catalog = if *with { models.clone() } else { ModelCatalog::default() };
                    net.add_node(name, Arc::new(Broker::with_models(name, catalog, clock, transport)));
                }
                NodeSpec::Discovery { .. } => net.add_node(name, Arc::new(Discovery::new(clock, transport))),
                NodeSpec::Federation {
                    broker,
                    discovery,
                    registration_ttl,
                    ..
                } => {
                    let mut cfg = FederationConfig::new(name, url(name));
                    if let Some(b) = broker {
                        cfg = cfg.with_broker(url(b));
                    }
                    if let Some(d) = discovery {
                        cfg = cfg.with_discovery(url(d));
                    }
                    if let Some(t) = registration_ttl {
                        cfg.registration_ttl = *t;
                    }
                    net.add_node(name, Arc::new(FederationNode::new(cfg, clock, transport)));
                }
                NodeSpec::Agent {
                    broker,
                    mapping,
                    queue_capacity,
                    ..
                } => {
                    let mut agent = Agent::new(mapping.clone(), models.clone(), url(broker), clock, transport).map_err(
                        |e| ScriptError::Invalid {
                            line: n.line,
                            detail: e.to_string(),
                        },
                    )?;
                    if let Some(c) = queue_capacity {
                        agent = agent.with_capacity(*c);
                    }
                    net.add_node(name, Arc::new(agent));
                }
                NodeSpec::History { .. } => net.add_node(name, Arc::new(History::new(HistoryStore::in_memory(), clock))),
                NodeSpec::Worker {
                    broker,
                    discovery,
                    tier,
                    scopes,
                    capacity,
                    ..
                } => {
                    let cfg = WorkerConfig {
                        id: name.to_string(),
                        endpoint: url(name),
                        broker: url(broker),
                        discovery: url(discovery),
                        tier: *tier,
                        scopes: scopes.clone(),
                        capacity: *capacity,
                    };
                    net.add_node(name, Arc::new(Worker::new(cfg, clock, transport)));
                }
                NodeSpec::Orchestrator { discovery, workers, .. } => {
                    let ws = workers.iter().filter_map(|w| worker_node(script, w)).collect();
                    net.add_node(name, Arc::new(Orchestrator::new(ws, discovery.as_deref().map(url), transport)));
                }
                NodeSpec::Consumer { .. } => {
                    let r = Arc::new(Recorder::new(clock));
                    net.add_node(name, r.clone());
                    consumers.insert(name.to_string(), r);
                }
            }
        }
        Ok(Run {
            script,
            net,
            consumers,
            labels: BTreeMap::new(),
            outcomes: Vec::new(),
        })
    }

    fn call(&self, node: &str, path: &str, body: &Value) -> Result<Value, TransportError> {
        self.call_from(&None, node, path, body)
    }

    fn call_from(&self, from: &Option<String>, node: &str, path: &str, body: &Value) -> Result<Value, TransportError> {
        let origin = from.as_deref().unwrap_or(CLIENT);
        self.net.request_from(origin, &format!("{}{path}", url(node)), body)
    }

    fn resolve(&self, label: &str) -> String {
        self.labels.get(label).cloned().unwrap_or_else(|| label.to_string())
    }

    fn execute(&mut self, step: &Step) -> Result<Option<String>, String> {
        let done = |v: Result<Value, TransportError>| v.map(|v| Some(to_canonical_string(&v))).map_err(rejected);
        match step {
            Step::Publish { node, from, elements } => {
                done(self.call_from(from, node, "/v1/updateContext", &json!({ "elements": elements })))
            }
            Step::Register { node, registration } => {
                done(self.call(node, "/v1/registerContext", &to_value(registration)))
            }
            Step::Unregister { node, id } => done(self.call(node, "/v1/unregisterContext", &json!({ "id": id }))),
            Step::Subscribe {
                node,
                from,
                subscription,
                label,
            } => {
                let v = self.call_from(from, node, "/v1/subscribeContext", subscription).map_err(rejected)?;
                let id = v["subscriptionId"].as_str().unwrap_or_default().to_string();
                if let Some(l) = label {
                    self.labels.insert(l.clone(), id.clone());
                }
                Ok(Some(format!("subscription {id}")))
            }
            Step::Unsubscribe { node, subscription } => {
                let id = self.resolve(subscription);
                done(self.call(node, "/v1/unsubscribeContext", &json!({ "id": id })))
            }
            Step::Query { node, from, query } => done(self.call_from(from, node, "/v1/queryContext", &to_value(query))),
            Step::Attach { node, parent } => {
                done(self.call(node, "/v1/attachParent", &json!({ "parentDiscovery": url(parent) })))
            }
            Step::Partition { nodes, duration } => {
                self.net.partition(nodes.iter().cloned(), *duration);
                Ok(Some(format!("partitioned {nodes:?} for {duration}ms")))
            }
            Step::Delay { from, to, ms } => {
                self.net.set_delay(from, to, *ms);
                Ok(None)
            }
            Step::Advance { to, by } => {
                let target = to.unwrap_or_else(|| self.net.now() + by.unwrap_or(0));
                self.net.run_until(target);
                Ok(None)
            }
            Step::Device { node, messages } => done(self.call(node, "/v1/device", &json!({ "messages": messages }))),
            Step::Submit { node, topology, workers } => {
                let mut body = json!({ "topology": topology });
                if let Some(ws) = workers {
                    let nodes: Vec<WorkerNode> = ws.iter().filter_map(|w| worker_node(self.script, w)).collect();
                    body["workers"] = to_value(&nodes);
                }
                done(self.call(node, "/v1/orchestrator/submit", &body))
            }
            Step::Request { node, path, body } => done(self.call(node, path, body)),
            _ => self.check(step).map(Some),
        }
    }

    fn check(&self, step: &Step) -> StepResult {
        match step {
            Step::ExpectNotification {
                node,
                subscription,
                count,
                min_count,
                element_count,
                contains,
            } => {
                let want_id = subscription.as_ref().map(|s| self.resolve(s));
                let bodies: Vec<Value> = self.consumers[node.as_str()]
                    .bodies()
                    .into_iter()
                    .filter(|b| want_id.as_ref().is_none_or(|id| b["subscriptionId"].as_str() == Some(id)))
                    .collect();
                let elements = bodies
                    .iter()
                    .flat_map(|b| b["elements"].as_array().cloned().unwrap_or_default())
                    .map(from_value_typed::<ContextElement>)
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| format!("undecodable notification: {e}"))?;
                if let Some(c) = count {
                    expect_eq("notifications", *c, bodies.len())?;
                }
                if let Some(c) = min_count {
                    if bodies.len() < *c {
                        return Err(format!("expected at least {c} notifications, got {}", bodies.len()));
                    }
                }
                if let Some(c) = element_count {
                    expect_eq("notified elements", *c, elements.len())?;
                }
                contains_all(&elements, contains)?;
                Ok(format!("{} notifications, {} elements", bodies.len(), elements.len()))
            }
            Step::ExpectQuery {
                node,
                from,
                query,
                elements,
                count,
                partial,
            } => {
                let v = self
                    .call_from(from, node, "/v1/queryContext", &to_value(query))
                    .map_err(rejected)?;
                let resp: QueryResponse = from_value_typed(v).map_err(|e| e.to_string())?;
                if let Some(c) = count {
                    expect_eq("elements", *c, resp.elements.len())?;
                }
                if let Some(p) = partial {
                    let mut want = p.clone();
                    want.sort();
                    if want != resp.partial {
                        return Err(format!("expected partial {want:?}, got {:?}", resp.partial));
                    }
                }
                contains_all(&resp.elements, elements)?;
                Ok(format!("{} elements, partial {:?}", resp.elements.len(), resp.partial))
            }
            Step::ExpectHistory {
                node,
                query,
                count,
                values,
            } => {
                let v = self.call(node, "/v1/history/raw", &to_value(query)).map_err(rejected)?;
                let records: Vec<TimeSeriesRecord> =
                    from_value_typed(v["records"].clone()).map_err(|e| e.to_string())?;
                if let Some(c) = count {
                    expect_eq("records", *c, records.len())?;
                }
                if let Some(vals) = values {
                    let got: Vec<Value> = records.iter().map(|r| r.value.clone()).collect();
                    if got.len() != vals.len() || !got.iter().zip(vals).all(|(g, w)| same_value(g, w)) {
                        return Err(format!("expected values {vals:?}, got {got:?}"));
                    }
                }
                Ok(format!("{} records", records.len()))
            }
            Step::ExpectBinding { node, instance, inputs } => {
                let v = self.call(node, "/v1/worker/bindings", &json!({})).map_err(rejected)?;
                let tasks: Vec<TaskStatus> = from_value_typed(v["tasks"].clone()).map_err(|e| e.to_string())?;
                let t = tasks
                    .iter()
                    .find(|t| &t.instance == instance)
                    .ok_or_else(|| format!("instance `{instance}` is not deployed on {node}"))?;
                let mut want = inputs.clone();
                for w in &mut want {
                    w.sort();
                }
                if t.inputs != want {
                    return Err(format!("expected bindings {want:?}, got {:?}", t.inputs));
                }
                if t.pending {
                    return Err(format!("instance `{instance}` still has pending bindings"));
                }
                Ok(format!("bound {:?}", t.inputs))
            }
            other => Err(format!("`{}` is not an assertion", other.name())),
        }
    }

    fn record(&mut self, line: usize, step: &str, passed: bool, detail: String) {
        let at = self.net.now();
        self.net
            .note(format!("line {line} {step}: {} {detail}", if passed { "ok" } else { "FAIL" }));
        self.outcomes.push(Outcome {
            line,
            step: step.to_string(),
            at,
            passed,
            detail,
        });
    }

    fn action(&mut self, line: usize, a: &Action) -> Result<(), ScriptError> {
        if let Some(at) = a.at {
            if at < self.net.now() {
                return Err(ScriptError::Invalid {
                    line,
                    detail: format!("`at` {at} is in the past (now {})", self.net.now()),
                });
            }
            self.net.run_until(at);
        }
        let name = a.step.name();
        if a.step.is_assertion() {
            self.net.drain();
        }
        let result = self.execute(&a.step);
        match (&a.expect_error, result) {
            (None, Ok(detail)) => {
                if a.step.is_assertion() {
                    self.record(line, name, true, detail.unwrap_or_default());
                } else {
                    self.net.note(format!("line {line} {name}"));
                }
            }
            (None, Err(e)) => self.record(line, name, false, e),
            (Some(code), Ok(_)) => self.record(line, name, false, format!("expected error {code}, step succeeded")),
            (Some(code), Err(e)) => {
                let passed = &e == code;
                self.record(line, name, passed, format!("rejected with {e}"));
            }
        }
        Ok(())
    }
}

fn expect_eq(what: &str, want: usize, got: usize) -> Result<(), String> {
    if want == got {
        Ok(())
    } else {
        Err(format!("expected {want} {what}, got {got}"))
    }
}

/// Equal JSON, with numbers compared to [`NUMERIC_TOLERANCE`] (relative).
pub fn same_value(got: &Value, want: &Value) -> bool {
    match (got, want) {
        (Value::Number(a), Value::Number(b)) => {
            let (a, b) = (a.as_f64().unwrap_or(f64::NAN), b.as_f64().unwrap_or(f64::NAN));
            (a - b).abs() <= NUMERIC_TOLERANCE * b.abs().max(1.0)
        }
        (Value::Array(a), Value::Array(b)) => a.len() == b.len() && a.iter().zip(b).all(|(x, y)| same_value(x, y)),
        (Value::Object(a), Value::Object(b)) => {
            a.len() == b.len() && a.iter().all(|(k, v)| b.get(k).is_some_and(|w| same_value(v, w)))
        }
        _ => got == want,
    }
}

fn matches(e: &ContextElement, m: &ElementMatch) -> bool {
    e.id() == m.id
        && e.entity_type() == m.entity_type
        && m
            .attrs
            .iter()
            .all(|(name, v)| e.attribute(name).is_some_and(|a| same_value(a.value(), v)))
}

fn contains_all(elements: &[ContextElement], wanted: &[ElementMatch]) -> Result<(), String> {
    for m in wanted {
        if !elements.iter().any(|e| matches(e, m)) {
            return Err(format!(
                "no element {}/{} with {}",
                m.entity_type,
                m.id,
                to_canonical_string(&m.attrs)
            ));
        }
    }
    Ok(())
}

/// Run a script to completion. Assertion failures are reported, not
/// returned as errors; only problems with the script itself are.
pub fn run_scenario(script: &Script) -> Result<ScenarioReport, ScriptError> {
    let mut run = Run::boot(script)?;
    for a in &script.actions {
        run.action(a.line, &a.item)?;
    }
    run.net.drain();
    let passed = run.outcomes.iter().all(|o| o.passed);
    Ok(ScenarioReport {
        name: script.name.clone(),
        passed,
        outcomes: run.outcomes,
        log: run.net.log(),
    })
}
