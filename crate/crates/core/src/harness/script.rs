//! Scenario scripts.
//!
//! A script declares nodes and a list of timed steps. Each step is a JSON
//! object with a `do` tag, an optional `at` time (ms, nondecreasing) and an
//! optional `expectError` code for steps that should be rejected. Nodes
//! are named; steps refer to nodes by name, wire bodies use `mem://name`
//! URLs.
//!
//! ```json
//! {
//!   "name": "tiny",
//!   "nodes": [{"kind": "broker", "name": "b"}, {"kind": "consumer", "name": "c"}],
//!   "steps": [
//!     {"do": "subscribe", "node": "b", "as": "s",
//!      "subscription": {"entities": [{"type": "Room", "id": ".*", "isPattern": true}],
//!                       "notifyEndpoint": "mem://c/notify"}},
//!     {"at": 10, "do": "publish", "node": "b", "elements": [...]},
//!     {"do": "expectNotification", "node": "c", "subscription": "s", "count": 2}
//!   ]
//! }
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::value::RawValue;
use serde_json::{Map, Value};
use thiserror::Error;

use crate::agent::DeviceMapping;
use crate::broker::QueryRequest;
use crate::datamodel::DataModel;
use crate::discovery::Registration;
use crate::history::RawQuery;
use crate::model::{ContextElement, Scope};
use crate::orchestrator::{TaskTopology, Tier};

use super::simnet::CLIENT;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScriptError {
    #[error("line {line}, column {column}: {detail}")]
    Syntax { line: usize, column: usize, detail: String },
    #[error("line {line}: {detail}")]
    Invalid { line: usize, detail: String },
    #[error("cannot read {path}: {detail}")]
    Io { path: String, detail: String },
}

impl ScriptError {
    /// 1-based line the error refers to, when it refers to one.
    pub fn line(&self) -> Option<usize> {
        match self {
            ScriptError::Syntax { line, .. } | ScriptError::Invalid { line, .. } => Some(*line),
            ScriptError::Io { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase", deny_unknown_fields)]
pub enum NodeSpec {
    Broker {
        name: String,
        /// Harmonize updates against the script's models.
        #[serde(default = "yes")]
        models: bool,
    },
    Discovery {
        name: String,
    },
    #[serde(rename_all = "camelCase")]
    Federation {
        name: String,
        #[serde(default)]
        broker: Option<String>,
        #[serde(default)]
        discovery: Option<String>,
        #[serde(default)]
        level: Option<u8>,
        #[serde(default)]
        registration_ttl: Option<u64>,
    },
    #[serde(rename_all = "camelCase")]
    Agent {
        name: String,
        broker: String,
        mapping: DeviceMapping,
        #[serde(default)]
        queue_capacity: Option<usize>,
    },
    History {
        name: String,
    },
    Worker {
        name: String,
        broker: String,
        discovery: String,
        tier: Tier,
        #[serde(default)]
        scopes: Vec<Scope>,
        capacity: u32,
    },
    Orchestrator {
        name: String,
        #[serde(default)]
        discovery: Option<String>,
        workers: Vec<String>,
    },
    /// Records whatever it is sent; stands in for applications.
    Consumer {
        name: String,
    },
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum NodeKind {
    Broker,
    Discovery,
    Federation,
    Agent,
    History,
    Worker,
    Orchestrator,
    Consumer,
}

impl NodeSpec {
    pub fn name(&self) -> &str {
        match self {
            NodeSpec::Broker { name, .. }
            | NodeSpec::Discovery { name }
            | NodeSpec::Federation { name, .. }
            | NodeSpec::Agent { name, .. }
            | NodeSpec::History { name }
            | NodeSpec::Worker { name, .. }
            | NodeSpec::Orchestrator { name, .. }
            | NodeSpec::Consumer { name } => name,
        }
    }

    pub fn kind(&self) -> NodeKind {
        match self {
            NodeSpec::Broker { .. } => NodeKind::Broker,
            NodeSpec::Discovery { .. } => NodeKind::Discovery,
            NodeSpec::Federation { .. } => NodeKind::Federation,
            NodeSpec::Agent { .. } => NodeKind::Agent,
            NodeSpec::History { .. } => NodeKind::History,
            NodeSpec::Worker { .. } => NodeKind::Worker,
            NodeSpec::Orchestrator { .. } => NodeKind::Orchestrator,
            NodeSpec::Consumer { .. } => NodeKind::Consumer,
        }
    }
}

/// Expected element: identity plus a subset of attribute values.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElementMatch {
    pub id: String,
    #[serde(rename = "type")]
    pub entity_type: String,
    #[serde(default)]
    pub attrs: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "do", rename_all = "camelCase", deny_unknown_fields)]
pub enum Step {
    Publish {
        node: String,
        /// Node the request originates from; the harness client if absent.
        #[serde(default)]
        from: Option<String>,
        elements: Vec<ContextElement>,
    },
    Register {
        node: String,
        registration: Registration,
    },
    Unregister {
        node: String,
        id: String,
    },
    Subscribe {
        node: String,
        /// Node the request originates from; the harness client if absent.
        #[serde(default)]
        from: Option<String>,
        subscription: Value,
        /// Label to refer to the returned subscription id.
        #[serde(default, rename = "as")]
        label: Option<String>,
    },
    Unsubscribe {
        node: String,
        /// Label or literal subscription id.
        subscription: String,
    },
    Query {
        node: String,
        /// Node the request originates from; the harness client if absent.
        #[serde(default)]
        from: Option<String>,
        query: QueryRequest,
    },
    Attach {
        node: String,
        parent: String,
    },
    Partition {
        nodes: Vec<String>,
        duration: u64,
    },
    Delay {
        from: String,
        to: String,
        ms: u64,
    },
    Advance {
        #[serde(default)]
        to: Option<u64>,
        #[serde(default)]
        by: Option<u64>,
    },
    Device {
        node: String,
        messages: Vec<Value>,
    },
    Submit {
        node: String,
        topology: TaskTopology,
        #[serde(default)]
        workers: Option<Vec<String>>,
    },
    Request {
        node: String,
        path: String,
        #[serde(default)]
        body: Value,
    },
    #[serde(rename_all = "camelCase")]
    ExpectNotification {
        node: String,
        #[serde(default)]
        subscription: Option<String>,
        #[serde(default)]
        count: Option<usize>,
        #[serde(default)]
        min_count: Option<usize>,
        #[serde(default)]
        element_count: Option<usize>,
        #[serde(default)]
        contains: Vec<ElementMatch>,
    },
    ExpectQuery {
        node: String,
        /// Node the request originates from; the harness client if absent.
        #[serde(default)]
        from: Option<String>,
        query: QueryRequest,
        #[serde(default)]
        elements: Vec<ElementMatch>,
        #[serde(default)]
        count: Option<usize>,
        #[serde(default)]
        partial: Option<Vec<String>>,
    },
    ExpectHistory {
        node: String,
        query: RawQuery,
        #[serde(default)]
        count: Option<usize>,
        #[serde(default)]
        values: Option<Vec<Value>>,
    },
    ExpectBinding {
        node: String,
        instance: String,
        inputs: Vec<Vec<String>>,
    },
}

impl Step {
    pub fn name(&self) -> &'static str {
        match self {
            Step::Publish { .. } => "publish",
            Step::Register { .. } => "register",
            Step::Unregister { .. } => "unregister",
            Step::Subscribe { .. } => "subscribe",
            Step::Unsubscribe { .. } => "unsubscribe",
            Step::Query { .. } => "query",
            Step::Attach { .. } => "attach",
            Step::Partition { .. } => "partition",
            Step::Delay { .. } => "delay",
            Step::Advance { .. } => "advance",
            Step::Device { .. } => "device",
            Step::Submit { .. } => "submit",
            Step::Request { .. } => "request",
            Step::ExpectNotification { .. } => "expectNotification",
            Step::ExpectQuery { .. } => "expectQuery",
            Step::ExpectHistory { .. } => "expectHistory",
            Step::ExpectBinding { .. } => "expectBinding",
        }
    }

    pub fn is_assertion(&self) -> bool {
        matches!(
            self,
            Step::ExpectNotification { .. }
                | Step::ExpectQuery { .. }
                | Step::ExpectHistory { .. }
                | Step::ExpectBinding { .. }
        )
    }

    /// Node references with the kinds they must have.
    fn references(&self) -> Vec<(&str, &'static [NodeKind])> {
        use NodeKind::*;
        const SERVING: &[NodeKind] = &[Broker, Federation];
        const ANY: &[NodeKind] = &[Broker, Discovery, Federation, Agent, History, Worker, Orchestrator, Consumer];
        match self {
            Step::Publish { node, from, .. }
            | Step::Subscribe { node, from, .. }
            | Step::Query { node, from, .. }
            | Step::ExpectQuery { node, from, .. } => {
                let mut v: Vec<(&str, &'static [NodeKind])> = vec![(node, SERVING)];
                v.extend(from.as_deref().map(|f| (f, ANY)));
                v
            }
            Step::Unsubscribe { node, .. } => vec![(node, SERVING)],
            Step::Register { node, .. } | Step::Unregister { node, .. } => vec![(node, &[Discovery])],
            Step::Attach { node, parent } => vec![(node, &[Federation]), (parent, &[Discovery])],
            Step::Partition { nodes, .. } => nodes.iter().map(|n| (n.as_str(), ANY)).collect(),
            Step::Delay { from, to, .. } => vec![(from, ANY), (to, ANY)],
            Step::Advance { .. } => Vec::new(),
            Step::Device { node, .. } => vec![(node, &[Agent])],
            Step::Submit { node, workers, .. } => {
                let mut v: Vec<(&str, &'static [NodeKind])> = vec![(node, &[Orchestrator])];
                v.extend(workers.iter().flatten().map(|w| (w.as_str(), &[Worker] as &'static [NodeKind])));
                v
            }
            Step::Request { node, .. } => vec![(node, ANY)],
            Step::ExpectNotification { node, .. } => vec![(node, &[Consumer])],
            Step::ExpectHistory { node, .. } => vec![(node, &[History])],
            Step::ExpectBinding { node, .. } => vec![(node, &[Worker])],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Located<T> {
    /// 1-based line where the item starts in the script.
    pub line: usize,
    pub item: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Action {
    pub at: Option<u64>,
    /// Error code the step must be rejected with.
    pub expect_error: Option<String>,
    pub step: Step,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Script {
    pub name: String,
    pub description: String,
    pub models: Vec<DataModel>,
    /// Directory of model files, resolved against `base_dir`.
    pub model_dir: Option<PathBuf>,
    pub base_dir: Option<PathBuf>,
    pub nodes: Vec<Located<NodeSpec>>,
    pub actions: Vec<Located<Action>>,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct RawScript<'a> {
    #[serde(default)]
    name: String,
    #[serde(default)]
    description: String,
    #[serde(default)]
    models: Vec<DataModel>,
    #[serde(default)]
    model_dir: Option<PathBuf>,
    #[serde(default, borrow)]
    nodes: Vec<&'a RawValue>,
    #[serde(default, borrow)]
    steps: Vec<&'a RawValue>,
}

fn line_of(text: &str, raw: &RawValue) -> usize {
    let offset = raw.get().as_ptr() as usize - text.as_ptr() as usize;
    text[..offset].matches('\n').count() + 1
}

fn invalid(line: usize, detail: impl Into<String>) -> ScriptError {
    ScriptError::Invalid {
        line,
        detail: detail.into(),
    }
}

impl Script {
    pub fn parse(text: &str) -> Result<Script, ScriptError> {
        if text.trim().is_empty() {
            return Ok(Script::default());
        }
        let raw: RawScript = serde_json::from_str(text).map_err(|e| ScriptError::Syntax {
            line: e.line(),
            column: e.column(),
            detail: e.to_string(),
        })?;
        let mut script = Script {
            name: raw.name,
            description: raw.description,
            models: raw.models,
            model_dir: raw.model_dir,
            base_dir: None,
            nodes: Vec::new(),
            actions: Vec::new(),
        };
        for r in raw.nodes {
            let line = line_of(text, r);
            let node: NodeSpec = serde_json::from_str(r.get())
                .map_err(|e| invalid(line + e.line() - 1, format!("bad node: {e}")))?;
            script.nodes.push(Located { line, item: node });
        }
        for r in raw.steps {
            let line = line_of(text, r);
            let mut obj: Map<String, Value> = serde_json::from_str(r.get())
                .map_err(|e| invalid(line + e.line() - 1, format!("a step must be an object: {e}")))?;
            let at = match obj.remove("at") {
                None => None,
                Some(v) => Some(v.as_u64().ok_or_else(|| invalid(line, "`at` must be a non-negative integer"))?),
            };
            let expect_error = match obj.remove("expectError") {
                None => None,
                Some(Value::String(s)) => Some(s),
                Some(_) => return Err(invalid(line, "`expectError` must be a string")),
            };
            let step: Step =
                serde_json::from_value(Value::Object(obj)).map_err(|e| invalid(line, format!("bad step: {e}")))?;
            script.actions.push(Located {
                line,
                item: Action { at, expect_error, step },
            });
        }
        script.check()?;
        Ok(script)
    }

    /// Read a script file; relative model directories resolve against it.
    pub fn load(path: &Path) -> Result<Script, ScriptError> {
        let text = fs::read_to_string(path).map_err(|e| ScriptError::Io {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        let mut s = Script::parse(&text)?;
        s.base_dir = path.parent().map(Path::to_path_buf);
        Ok(s)
    }

    pub fn model_dir(&self) -> Option<PathBuf> {
        let d = self.model_dir.as_ref()?;
        Some(match &self.base_dir {
            Some(base) if d.is_relative() => base.join(d),
            _ => d.clone(),
        })
    }

    pub fn node(&self, name: &str) -> Option<&NodeSpec> {
        self.nodes.iter().map(|n| &n.item).find(|n| n.name() == name)
    }

    fn check(&self) -> Result<(), ScriptError> {
        let mut kinds: BTreeMap<&str, NodeKind> = BTreeMap::new();
        for n in &self.nodes {
            let name = n.item.name();
            if name.is_empty() || name == CLIENT || name.contains('/') {
                return Err(invalid(n.line, format!("`{name}` is not a usable node name")));
            }
            if kinds.insert(name, n.item.kind()).is_some() {
                return Err(invalid(n.line, format!("node `{name}` declared twice")));
            }
        }
        let want = |line: usize, name: &str, allowed: &[NodeKind]| -> Result<(), ScriptError> {
            match kinds.get(name) {
                None => Err(invalid(line, format!("node `{name}` is not declared"))),
                Some(k) if !allowed.contains(k) => Err(invalid(
                    line,
                    format!("node `{name}` is a {k:?}; expected one of {allowed:?}"),
                )),
                Some(_) => Ok(()),
            }
        };
        for n in &self.nodes {
            let line = n.line;
            match &n.item {
                NodeSpec::Federation {
                    broker, discovery, level, ..
                } => {
                    if let Some(b) = broker {
                        want(line, b, &[NodeKind::Broker])?;
                    }
                    if let Some(d) = discovery {
                        want(line, d, &[NodeKind::Discovery])?;
                    }
                    if level.is_some_and(|l| !(1..=4).contains(&l)) {
                        return Err(invalid(line, "federation level must be 1 to 4"));
                    }
                }
                NodeSpec::Agent { broker, .. } => want(line, broker, &[NodeKind::Broker, NodeKind::Federation])?,
                NodeSpec::Worker {
                    broker,
                    discovery,
                    capacity,
                    ..
                } => {
                    want(line, broker, &[NodeKind::Broker])?;
                    want(line, discovery, &[NodeKind::Discovery])?;
                    if *capacity == 0 {
                        return Err(invalid(line, "worker capacity must be at least 1"));
                    }
                }
                NodeSpec::Orchestrator { discovery, workers, .. } => {
                    if let Some(d) = discovery {
                        want(line, d, &[NodeKind::Discovery])?;
                    }
                    for w in workers {
                        want(line, w, &[NodeKind::Worker])?;
                    }
                }
                _ => {}
            }
        }
        let mut labels = BTreeSet::new();
        let mut last_at = 0;
        for a in &self.actions {
            if let Some(at) = a.item.at {
                if at < last_at {
                    return Err(invalid(a.line, format!("`at` {at} is earlier than {last_at}")));
                }
                last_at = at;
            }
            for (name, allowed) in a.item.step.references() {
                want(a.line, name, allowed)?;
            }
            match &a.item.step {
                Step::Subscribe { label: Some(l), .. } => {
                    labels.insert(l.as_str());
                }
                Step::Advance { to, by } if to.is_some() == by.is_some() => {
                    return Err(invalid(a.line, "advance takes exactly one of `to` and `by`"));
                }
                Step::Advance { to: Some(t), .. } => {
                    if *t < last_at {
                        return Err(invalid(a.line, format!("advance to {t} is earlier than {last_at}")));
                    }
                    last_at = *t;
                }
                Step::ExpectNotification {
                    subscription: Some(s), ..
                } if !labels.contains(s.as_str()) => {
                    return Err(invalid(a.line, format!("subscription label `{s}` is not defined earlier")));
                }
                _ => {}
            }
        }
        Ok(())
    }
}
