//! Analytics task topologies over context streams.
//!
//! A topology is a set of tasks, each consuming entity types and producing
//! one. Edges are implied: a task whose input type is another task's output
//! type consumes that task's generated stream. The orchestrator validates
//! a topology, places task instances on workers and asks each worker to
//! run its share; workers bind inputs through discovery and republish
//! outputs to their broker.

mod operators;
mod worker;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub use operators::{
    fill_target, forecast_ratio, Operator, OperatorError, OperatorRegistry, Setpoint, ThresholdDetect, WindowAvg,
};
pub use worker::{TaskDeployment, TaskStatus, Worker, WorkerConfig};

use crate::client;
use crate::discovery::DiscoveryQuery;
use crate::model::{EntityRef, Scope};
use crate::net::{endpoint_url, to_value, ApiError, Request, Service, Transport, TransportError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OrchestratorError {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("task `{task}` uses unknown operator `{operator}`")]
    UnknownOperator { task: String, operator: String },
    #[error("task `{0}` consumes its own output type")]
    SelfLoop(String),
    #[error("topology has a cycle through {0:?}")]
    Cycle(Vec<String>),
    #[error("input type `{entity_type}` of task `{task}` has no possible source")]
    UnsatisfiableInput { task: String, entity_type: String },
    #[error("no worker can host `{0}`")]
    NoCapacity(String),
    #[error("deployment failed: {0}")]
    Deployment(String),
}

impl From<OrchestratorError> for ApiError {
    fn from(e: OrchestratorError) -> Self {
        let code = match &e {
            OrchestratorError::InvalidTopology(_) => "InvalidTopology",
            OrchestratorError::UnknownOperator { .. } => "UnknownOperator",
            OrchestratorError::SelfLoop(_) => "SelfLoop",
            OrchestratorError::Cycle(_) => "Cycle",
            OrchestratorError::UnsatisfiableInput { .. } => "UnsatisfiableInput",
            OrchestratorError::NoCapacity(_) => "NoCapacity",
            OrchestratorError::Deployment(_) => "DeploymentFailed",
        };
        ApiError::new(code, e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StreamSelector {
    pub entity_type: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scopes: Vec<Scope>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shuffle_key: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Granularity {
    #[default]
    Single,
    /// One instance per distinct scope named by the task's inputs.
    PerScope,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TaskSpec {
    pub name: String,
    pub operator: String,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub params: Value,
    pub inputs: Vec<StreamSelector>,
    pub output: String,
    #[serde(default)]
    pub granularity: Granularity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTopology {
    pub name: String,
    pub tasks: Vec<TaskSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Tier {
    Cloud,
    Edge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerNode {
    pub id: String,
    pub tier: Tier,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scopes: Vec<Scope>,
    pub capacity: u32,
    /// Where the worker daemon listens; needed only to deploy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Assignment {
    pub instance: String,
    pub task: String,
    pub worker: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scope: Option<Scope>,
    /// Input subscriptions the instance will hold.
    pub inputs: Vec<StreamSelector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentPlan {
    pub topology: String,
    pub assignments: Vec<Assignment>,
}

/// Does `served` fully contain `wanted`?
pub fn scope_covers(served: &Scope, wanted: &Scope) -> bool {
    match (served, wanted) {
        (Scope::GeoBox(a), Scope::GeoBox(b)) => a.covers(b),
        (Scope::StringMatch { target: t1, value: v1 }, Scope::StringMatch { target: t2, value: v2 }) => {
            t1 == t2 && v1 == v2
        }
        _ => false,
    }
}

/// Tasks in dependency order (Kahn, ties by declaration order), after
/// structural checks.
pub fn validate_topology(t: &TaskTopology, registry: &OperatorRegistry) -> Result<Vec<usize>, OrchestratorError> {
    if t.name.is_empty() {
        return Err(OrchestratorError::InvalidTopology("empty topology name".into()));
    }
    let mut names = BTreeSet::new();
    for task in &t.tasks {
        if task.name.is_empty() || !names.insert(task.name.as_str()) {
            return Err(OrchestratorError::InvalidTopology(format!(
                "task name `{}` is empty or repeated",
                task.name
            )));
        }
        if !registry.contains(&task.operator) {
            return Err(OrchestratorError::UnknownOperator {
                task: task.name.clone(),
                operator: task.operator.clone(),
            });
        }
        if task.inputs.is_empty() {
            return Err(OrchestratorError::InvalidTopology(format!("task `{}` has no inputs", task.name)));
        }
        if task.inputs.iter().any(|i| i.entity_type == task.output) {
            return Err(OrchestratorError::SelfLoop(task.name.clone()));
        }
        EntityRef::any_of_type(task.output.clone())
            .map_err(|e| OrchestratorError::InvalidTopology(format!("task `{}`: {e}", task.name)))?;
    }
    let n = t.tasks.len();
    let mut indegree = vec![0usize; n];
    let mut succ = vec![Vec::new(); n];
    for (i, a) in t.tasks.iter().enumerate() {
        for (j, b) in t.tasks.iter().enumerate() {
            if b.inputs.iter().any(|s| s.entity_type == a.output) {
                succ[i].push(j);
                indegree[j] += 1;
            }
        }
    }
    let mut ready: VecDeque<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = ready.pop_front() {
        order.push(i);
        for &j in &succ[i] {
            indegree[j] -= 1;
            if indegree[j] == 0 {
                ready.push_back(j);
            }
        }
    }
    if order.len() < n {
        let stuck = (0..n)
            .filter(|i| indegree[*i] > 0)
            .map(|i| t.tasks[i].name.clone())
            .collect();
        return Err(OrchestratorError::Cycle(stuck));
    }
    Ok(order)
}

/// Instances of one task: `(instance id, instance scope, inputs)`.
fn instances(topology: &str, task: &TaskSpec) -> Vec<(String, Option<Scope>, Vec<StreamSelector>)> {
    let base = format!("{topology}.{}", task.name);
    let mut scopes: Vec<Scope> = Vec::new();
    for i in &task.inputs {
        for s in &i.scopes {
            if !scopes.contains(s) {
                scopes.push(s.clone());
            }
        }
    }
    match task.granularity {
        Granularity::PerScope if !scopes.is_empty() => scopes
            .into_iter()
            .enumerate()
            .map(|(k, s)| {
                let inputs = task
                    .inputs
                    .iter()
                    .map(|i| StreamSelector {
                        scopes: if i.scopes.is_empty() { Vec::new() } else { vec![s.clone()] },
                        ..i.clone()
                    })
                    .collect();
                (format!("{base}.{k}"), Some(s), inputs)
            })
            .collect(),
        _ => {
            let scope = if scopes.len() == 1 { scopes.pop() } else { None };
            vec![(base, scope, task.inputs.clone())]
        }
    }
}

/// Place every task instance. `source_exists` reports whether discovery
/// currently knows a provider of an entity type.
pub fn plan(
    t: &TaskTopology,
    workers: &[WorkerNode],
    registry: &OperatorRegistry,
    source_exists: &dyn Fn(&str) -> bool,
) -> Result<DeploymentPlan, OrchestratorError> {
    let order = validate_topology(t, registry)?;
    if workers.is_empty() {
        return Err(OrchestratorError::NoCapacity("no workers given".into()));
    }
    if let Some(w) = workers.iter().find(|w| w.capacity == 0) {
        return Err(OrchestratorError::InvalidTopology(format!("worker `{}` has zero capacity", w.id)));
    }
    let outputs: BTreeSet<&str> = t.tasks.iter().map(|x| x.output.as_str()).collect();
    for task in &t.tasks {
        for i in &task.inputs {
            if !outputs.contains(i.entity_type.as_str()) && !source_exists(&i.entity_type) {
                return Err(OrchestratorError::UnsatisfiableInput {
                    task: task.name.clone(),
                    entity_type: i.entity_type.clone(),
                });
            }
        }
    }
    let mut load: BTreeMap<&str, u32> = workers.iter().map(|w| (w.id.as_str(), 0)).collect();
    let mut assignments = Vec::new();
    for idx in order {
        let task = &t.tasks[idx];
        for (instance, scope, inputs) in instances(&t.name, task) {
            let covering = |w: &WorkerNode| {
                w.tier == Tier::Edge && scope.as_ref().is_some_and(|s| w.scopes.iter().any(|ws| scope_covers(ws, s)))
            };
            let chosen = least_loaded(workers, &load, covering)
                .or_else(|| least_loaded(workers, &load, |w| w.tier == Tier::Cloud))
                .ok_or_else(|| OrchestratorError::NoCapacity(instance.clone()))?;
            *load.get_mut(chosen.id.as_str()).expect("known worker") += 1;
            assignments.push(Assignment {
                instance,
                task: task.name.clone(),
                worker: chosen.id.clone(),
                scope,
                inputs,
            });
        }
    }
    Ok(DeploymentPlan {
        topology: t.name.clone(),
        assignments,
    })
}

fn least_loaded<'w>(
    workers: &'w [WorkerNode],
    load: &BTreeMap<&str, u32>,
    eligible: impl Fn(&WorkerNode) -> bool,
) -> Option<&'w WorkerNode> {
    workers
        .iter()
        .filter(|w| eligible(w) && load[w.id.as_str()] < w.capacity)
        .min_by(|a, b| load[a.id.as_str()].cmp(&load[b.id.as_str()]).then(a.id.cmp(&b.id)))
}

#[derive(Debug, Clone, Deserialize)]
struct SubmitBody {
    topology: TaskTopology,
    #[serde(default)]
    workers: Option<Vec<WorkerNode>>,
}

/// Control loop: validates, plans and deploys topologies.
pub struct Orchestrator {
    workers: Vec<WorkerNode>,
    discovery: Option<String>,
    registry: OperatorRegistry,
    transport: Arc<dyn Transport>,
    plans: Mutex<BTreeMap<String, DeploymentPlan>>,
    /// Serializes submissions.
    control: Mutex<()>,
}

impl Orchestrator {
    pub fn new(workers: Vec<WorkerNode>, discovery: Option<String>, transport: Arc<dyn Transport>) -> Self {
        Orchestrator {
            workers,
            discovery,
            registry: OperatorRegistry::default(),
            transport,
            plans: Mutex::new(BTreeMap::new()),
            control: Mutex::new(()),
        }
    }

    fn source_exists(&self, entity_type: &str) -> bool {
        let Some(d) = &self.discovery else { return true };
        let Ok(pattern) = EntityRef::any_of_type(entity_type) else { return false };
        match client::discover(self.transport.as_ref(), d, &DiscoveryQuery::new(vec![pattern])) {
            Ok(regs) => !regs.is_empty(),
            Err(e) => {
                log::warn!("orchestrator: discovery unreachable ({e}); assuming `{entity_type}` may appear");
                true
            }
        }
    }

    /// Plan `t` and deploy every instance on its worker.
    pub fn submit(&self, t: &TaskTopology, workers: Option<&[WorkerNode]>) -> Result<DeploymentPlan, OrchestratorError> {
        let _serial = self.control.lock().expect("orchestrator control");
        let workers = workers.unwrap_or(&self.workers);
        let p = plan(t, workers, &self.registry, &|ty| self.source_exists(ty))?;
        let by_id: BTreeMap<&str, &WorkerNode> = workers.iter().map(|w| (w.id.as_str(), w)).collect();
        let specs: BTreeMap<&str, &TaskSpec> = t.tasks.iter().map(|x| (x.name.as_str(), x)).collect();
        for a in &p.assignments {
            let w = by_id[a.worker.as_str()];
            let endpoint = w
                .endpoint
                .as_deref()
                .ok_or_else(|| OrchestratorError::Deployment(format!("worker `{}` has no endpoint", w.id)))?;
            let spec = specs[a.task.as_str()];
            let d = TaskDeployment {
                instance: a.instance.clone(),
                task: TaskSpec {
                    inputs: a.inputs.clone(),
                    ..spec.clone()
                },
                scope: a.scope.clone(),
            };
            self.transport
                .request(&endpoint_url(endpoint, "/v1/worker/deploy"), &to_value(&d), &[])
                .map_err(|e| match e {
                    TransportError::Rejected(api) => OrchestratorError::Deployment(format!("{}: {}", a.instance, api)),
                    other => OrchestratorError::Deployment(format!("{} on {}: {other}", a.instance, w.id)),
                })?;
        }
        self.plans.lock().expect("plans").insert(p.topology.clone(), p.clone());
        Ok(p)
    }

    pub fn plans(&self) -> Vec<DeploymentPlan> {
        self.plans.lock().expect("plans").values().cloned().collect()
    }
}

impl Service for Orchestrator {
    fn handle(&self, req: &Request) -> Result<Value, ApiError> {
        match req.path.as_str() {
            "/v1/orchestrator/submit" => {
                let body: SubmitBody = req.parse()?;
                let p = self.submit(&body.topology, body.workers.as_deref())?;
                Ok(to_value(&p))
            }
            "/v1/orchestrator/plans" => Ok(json!({ "plans": self.plans() })),
            other => Err(ApiError::not_found(other)),
        }
    }
}
