//! Worker daemon: runs task instances in-process.
//!
//! Each input of an instance holds an availability subscription at
//! discovery and one data subscription per matching providing endpoint.
//! Operator outputs go to the worker's broker, and the instance's output
//! type is registered in discovery as a generated stream so downstream
//! tasks find it like any other source.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{OperatorError, OperatorRegistry, TaskSpec, Tier};
use crate::broker::{Notification, QueryRequest, Subscription, ThrottlePolicy};
use crate::client;
use crate::discovery::{AvailabilityNotification, AvailabilitySubscription, DiscoveryQuery, Registration};
use crate::federation::ProviderSet;
use crate::model::{ContextElement, EntityRef, Scope};
use crate::net::{endpoint_url, to_value, ApiError, Clock, Request, Service, Transport};

/// Delay before retrying a binding step that failed.
pub const RETRY_MS: u64 = 1_000;

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerConfig {
    pub id: String,
    /// Base URL this worker is reachable at.
    pub endpoint: String,
    /// Broker that receives task outputs.
    pub broker: String,
    pub discovery: String,
    pub tier: Tier,
    pub scopes: Vec<Scope>,
    pub capacity: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDeployment {
    pub instance: String,
    pub task: TaskSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scope: Option<Scope>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStatus {
    pub instance: String,
    pub task: String,
    /// Bound providing endpoints, per input.
    pub inputs: Vec<Vec<String>>,
    pub processed: u64,
    pub emitted: u64,
    pub restarts: u64,
    pub pending: bool,
}

struct Input {
    providers: ProviderSet,
    availability: Option<String>,
    discovered: bool,
}

struct Instance {
    deployment: TaskDeployment,
    op: Box<dyn super::Operator>,
    inputs: Vec<Input>,
    registered: bool,
    processed: u64,
    emitted: u64,
    restarts: u64,
    retry_due: Option<u64>,
}

impl Instance {
    fn complete(&self) -> bool {
        self.registered
            && self.inputs.iter().all(|i| {
                i.discovered
                    && i.availability.is_some()
                    && i.providers.endpoints().all(|ep| i.providers.bound().iter().any(|(b, _)| b == ep))
            })
    }
}

type Shared = Arc<Mutex<Instance>>;

pub struct Worker {
    cfg: WorkerConfig,
    registry: OperatorRegistry,
    clock: Arc<dyn Clock>,
    transport: Arc<dyn Transport>,
    instances: Mutex<BTreeMap<String, Shared>>,
}

fn lock(i: &Shared) -> MutexGuard<'_, Instance> {
    i.lock().expect("task instance lock")
}

fn selector(ty: &str) -> Vec<EntityRef> {
    vec![EntityRef::any_of_type(ty).expect("validated type")]
}

impl Worker {
    pub fn new(cfg: WorkerConfig, clock: Arc<dyn Clock>, transport: Arc<dyn Transport>) -> Self {
        Worker {
            cfg,
            registry: OperatorRegistry::default(),
            clock,
            transport,
            instances: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn with_registry(mut self, registry: OperatorRegistry) -> Self {
        self.registry = registry;
        self
    }

    pub fn config(&self) -> &WorkerConfig {
        &self.cfg
    }

    fn instance(&self, id: &str) -> Option<Shared> {
        self.instances.lock().expect("worker lock").get(id).cloned()
    }

    fn data_url(&self, inst: &str) -> String {
        endpoint_url(&self.cfg.endpoint, &format!("/v1/task/{inst}/data"))
    }

    pub fn deploy(&self, d: TaskDeployment) -> Result<(), ApiError> {
        let op = self
            .registry
            .instantiate(&d.task.operator, &d.task.params, &d.task.output)
            .map_err(op_error)?;
        let shared = {
            let mut map = self.instances.lock().expect("worker lock");
            if let Some(existing) = map.get(&d.instance) {
                if lock(existing).deployment == d {
                    return Ok(());
                }
                return Err(ApiError::new(
                    "InvariantViolation",
                    format!("instance `{}` is already deployed differently", d.instance),
                ));
            }
            if map.len() >= self.cfg.capacity as usize {
                return Err(ApiError::new("NoCapacity", format!("worker `{}` is full", self.cfg.id)));
            }
            let inputs = d
                .task
                .inputs
                .iter()
                .map(|_| Input {
                    providers: ProviderSet::new(),
                    availability: None,
                    discovered: false,
                })
                .collect();
            let shared = Arc::new(Mutex::new(Instance {
                deployment: d.clone(),
                op,
                inputs,
                registered: false,
                processed: 0,
                emitted: 0,
                restarts: 0,
                retry_due: None,
            }));
            map.insert(d.instance.clone(), shared.clone());
            shared
        };
        log::info!("{}: deployed {} ({})", self.cfg.id, d.instance, d.task.operator);
        self.advance(&d.instance, &shared);
        Ok(())
    }

    /// Run every binding step still outstanding for an instance.
    fn advance(&self, inst: &str, shared: &Shared) {
        let (d, registered) = {
            let i = lock(shared);
            (i.deployment.clone(), i.registered)
        };
        if !registered {
            let mut reg = Registration::new(selector(&d.task.output), self.cfg.broker.clone());
            reg.id = format!("gen-{inst}");
            reg.scopes = d.scope.iter().cloned().collect();
            match client::register(self.transport.as_ref(), &self.cfg.discovery, &reg) {
                Ok(_) => lock(shared).registered = true,
                Err(e) => log::warn!("{}: cannot register output of {inst}: {e}", self.cfg.id),
            }
        }
        for (idx, sel) in d.task.inputs.iter().enumerate() {
            let q = DiscoveryQuery {
                entities: selector(&sel.entity_type),
                attributes: Vec::new(),
                scopes: sel.scopes.clone(),
            };
            let discovered = lock(shared).inputs[idx].discovered;
            if !discovered {
                match client::discover(self.transport.as_ref(), &self.cfg.discovery, &q) {
                    Ok(regs) => {
                        let claimed = {
                            let mut i = lock(shared);
                            i.inputs[idx].discovered = true;
                            i.inputs[idx].providers.observe(&regs, &[])
                        };
                        self.bind_all(inst, shared, idx, claimed);
                    }
                    Err(e) => log::warn!("{}: discovery for {inst} input {idx} failed: {e}", self.cfg.id),
                }
            } else {
                let claimed = lock(shared).inputs[idx].providers.claim_unbound();
                self.bind_all(inst, shared, idx, claimed);
            }
            if lock(shared).inputs[idx].availability.is_none() {
                let s = AvailabilitySubscription {
                    entities: q.entities.clone(),
                    attributes: Vec::new(),
                    scopes: q.scopes.clone(),
                    notify_endpoint: endpoint_url(&self.cfg.endpoint, &format!("/v1/task/{inst}/availability/{idx}")),
                    expires: None,
                };
                match client::subscribe_availability(self.transport.as_ref(), &self.cfg.discovery, &s) {
                    Ok(id) => lock(shared).inputs[idx].availability = Some(id),
                    Err(e) => log::warn!("{}: availability subscription for {inst} failed: {e}", self.cfg.id),
                }
            }
        }
        let mut i = lock(shared);
        i.retry_due = if i.complete() {
            None
        } else {
            Some(self.clock.now_ms() + RETRY_MS)
        };
    }

    fn bind_all(&self, inst: &str, shared: &Shared, idx: usize, claimed: Vec<String>) {
        for ep in claimed {
            let sel = lock(shared).deployment.task.inputs[idx].clone();
            let sub = Subscription {
                entities: selector(&sel.entity_type),
                attributes: Vec::new(),
                scopes: sel.scopes.clone(),
                notify_endpoint: self.data_url(inst),
                throttling: 0,
                policy: ThrottlePolicy::Drop,
                expires: None,
                skip_initial: false,
            };
            let outcome = match client::subscribe(self.transport.as_ref(), &ep, &sub, &[]) {
                Ok(id) => Some(id),
                Err(e) => {
                    log::warn!("{}: {inst} cannot subscribe at {ep}: {e}", self.cfg.id);
                    None
                }
            };
            let stale = lock(shared).inputs[idx].providers.bind(&ep, outcome);
            if let Some(sid) = stale {
                let _ = client::unsubscribe(self.transport.as_ref(), &ep, &sid);
            }
        }
        let mut i = lock(shared);
        if !i.complete() && i.retry_due.is_none() {
            i.retry_due = Some(self.clock.now_ms() + RETRY_MS);
        }
    }

    fn availability(&self, inst: &str, idx: usize, n: AvailabilityNotification) -> Result<(), ApiError> {
        let shared = self.instance(inst).ok_or_else(|| unknown(inst))?;
        let (claimed, released) = {
            let mut i = lock(&shared);
            let input = i
                .inputs
                .get_mut(idx)
                .ok_or_else(|| ApiError::new("NotFound", format!("{inst} has no input {idx}")))?;
            let released = input.providers.remove_registrations(&n.removed);
            (input.providers.observe(&n.registrations, &[]), released)
        };
        for (ep, sid) in released {
            if let Some(sid) = sid {
                let _ = client::unsubscribe(self.transport.as_ref(), &ep, &sid);
            }
        }
        self.bind_all(inst, &shared, idx, claimed);
        Ok(())
    }

    fn publish(&self, outputs: Vec<ContextElement>) {
        if outputs.is_empty() {
            return;
        }
        self.transport.send(
            &endpoint_url(&self.cfg.broker, "/v1/updateContext"),
            json!({ "elements": outputs }),
        );
    }

    /// Feed a data notification through the instance's operator. A failing
    /// operator is restarted from scratch and primed with the latest values
    /// its providers hold.
    fn data(&self, inst: &str, n: Notification) -> Result<(), ApiError> {
        let shared = self.instance(inst).ok_or_else(|| unknown(inst))?;
        let mut outputs = Vec::new();
        let failed = {
            let mut i = lock(&shared);
            let mut failed = None;
            for e in &n.elements {
                i.processed += 1;
                match i.op.on_input(e) {
                    Ok(out) => outputs.extend(out),
                    Err(err) => {
                        failed = Some(err);
                        break;
                    }
                }
            }
            i.emitted += outputs.len() as u64;
            failed
        };
        self.publish(outputs);
        if let Some(err) = failed {
            self.restart(inst, &shared, &err);
        }
        Ok(())
    }

    fn restart(&self, inst: &str, shared: &Shared, err: &OperatorError) {
        log::warn!("{}: {inst} failed ({err}); restarting", self.cfg.id);
        let (task, sources) = {
            let mut i = lock(shared);
            i.restarts += 1;
            let t = i.deployment.task.clone();
            match self.registry.instantiate(&t.operator, &t.params, &t.output) {
                Ok(op) => i.op = op,
                Err(e) => {
                    log::error!("{}: cannot re-instantiate {inst}: {e}", self.cfg.id);
                    return;
                }
            }
            let sources: Vec<Vec<String>> = i
                .inputs
                .iter()
                .map(|x| x.providers.bound().into_iter().map(|(ep, _)| ep).collect())
                .collect();
            (t, sources)
        };
        let mut replay = Vec::new();
        for (sel, eps) in task.inputs.iter().zip(sources) {
            let q = QueryRequest {
                entities: selector(&sel.entity_type),
                attributes: Vec::new(),
                scopes: sel.scopes.clone(),
            };
            for ep in eps {
                match client::query(self.transport.as_ref(), &ep, &q, &[]) {
                    Ok(resp) => replay.extend(resp.elements),
                    Err(e) => log::warn!("{}: replay query at {ep} failed: {e}", self.cfg.id),
                }
            }
        }
        let mut outputs = Vec::new();
        {
            let mut i = lock(shared);
            for e in &replay {
                match i.op.on_input(e) {
                    Ok(out) => outputs.extend(out),
                    Err(e) => log::warn!("{}: {inst} skipped a replayed input: {e}", self.cfg.id),
                }
            }
            i.emitted += outputs.len() as u64;
        }
        self.publish(outputs);
    }

    pub fn status(&self) -> Vec<TaskStatus> {
        let map: Vec<Shared> = self.instances.lock().expect("worker lock").values().cloned().collect();
        map.iter()
            .map(|s| {
                let i = lock(s);
                TaskStatus {
                    instance: i.deployment.instance.clone(),
                    task: i.deployment.task.name.clone(),
                    inputs: i
                        .inputs
                        .iter()
                        .map(|x| x.providers.bound().into_iter().map(|(ep, _)| ep).collect())
                        .collect(),
                    processed: i.processed,
                    emitted: i.emitted,
                    restarts: i.restarts,
                    pending: !i.complete(),
                }
            })
            .collect()
    }
}

fn unknown(inst: &str) -> ApiError {
    ApiError::new("NotFound", format!("no task instance `{inst}`"))
}

fn op_error(e: OperatorError) -> ApiError {
    let code = match e {
        OperatorError::Unknown(_) => "UnknownOperator",
        OperatorError::InvalidParams { .. } => "InvalidParams",
        OperatorError::Failed { .. } => "OperatorFailed",
    };
    ApiError::new(code, e.to_string())
}

impl Service for Worker {
    fn handle(&self, req: &Request) -> Result<Value, ApiError> {
        match req.path.as_str() {
            "/v1/worker/deploy" => {
                let d: TaskDeployment = req.parse()?;
                self.deploy(d)?;
                Ok(json!({}))
            }
            "/v1/worker/bindings" => Ok(json!({ "tasks": to_value(&self.status()) })),
            path => {
                let rest = path.strip_prefix("/v1/task/").ok_or_else(|| ApiError::not_found(path))?;
                let (inst, tail) = rest.split_once('/').ok_or_else(|| ApiError::not_found(path))?;
                if tail == "data" {
                    self.data(inst, req.parse()?)?;
                } else if let Some(idx) = tail.strip_prefix("availability/") {
                    let idx: usize = idx.parse().map_err(|_| ApiError::not_found(path))?;
                    self.availability(inst, idx, req.parse()?)?;
                } else {
                    return Err(ApiError::not_found(path));
                }
                Ok(json!({}))
            }
        }
    }

    fn next_timer(&self) -> Option<u64> {
        let map = self.instances.lock().expect("worker lock");
        map.values().filter_map(|s| lock(s).retry_due).min()
    }

    fn on_timer(&self, now: u64) {
        let due: Vec<(String, Shared)> = {
            let map = self.instances.lock().expect("worker lock");
            map.iter()
                .filter(|(_, s)| lock(s).retry_due.is_some_and(|t| t <= now))
                .map(|(k, s)| (k.clone(), s.clone()))
                .collect()
        };
        for (inst, s) in due {
            lock(&s).retry_due = None;
            self.advance(&inst, &s);
        }
    }
}
