//! Transparent federation of brokers.
//!
//! A [`FederationNode`] speaks the broker API. Queries are resolved by
//! asking the node's discovery which providers match, fanning out to them
//! (and to the node's own broker, if it has one) and merging the results.
//! Subscriptions are relayed: the node subscribes at every matching
//! provider, follows provider churn through an availability subscription
//! and forwards what it receives through its own throttle gate.
//!
//! Nodes form a hierarchy by attaching to a parent discovery, where they
//! advertise a summary of what they can serve.

mod binding;
mod merge;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub use binding::{BindState, ProviderSet};
pub use merge::{merge_elements, MergePolicy};

use crate::broker::{
    subscription_id_of, Aggregation, Emission, GateOutcome, Notification, QueryRequest, QueryResponse, Subscription,
    ThrottlePolicy, ThrottleState,
};
use crate::client;
use crate::discovery::{AvailabilityNotification, AvailabilitySubscription, DiscoveryQuery, Registration};
use crate::model::{EntityRef, ANY_TYPE};
use crate::net::{endpoint_url, to_value, ApiError, Clock, Request, Service, Transport, TransportError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FederationError {
    #[error("parent discovery `{0}` is unreachable")]
    ParentUnreachable(String),
    #[error("this node has no local broker")]
    NoLocalBroker,
    #[error("unknown subscription `{0}`")]
    UnknownSubscription(String),
}

impl From<FederationError> for ApiError {
    fn from(e: FederationError) -> Self {
        let code = match e {
            FederationError::ParentUnreachable(_) => "ParentUnreachable",
            FederationError::NoLocalBroker => "NoLocalBroker",
            FederationError::UnknownSubscription(_) => "UnknownSubscription",
        };
        ApiError::new(code, e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FederationConfig {
    pub node_id: String,
    /// Base URL this node is reachable at.
    pub endpoint: String,
    pub local_broker: Option<String>,
    pub discovery: Option<String>,
    /// Lifetime of the registration held at the parent; renewed every half.
    pub registration_ttl: u64,
}

impl FederationConfig {
    pub fn new(node_id: impl Into<String>, endpoint: impl Into<String>) -> Self {
        FederationConfig {
            node_id: node_id.into(),
            endpoint: endpoint.into(),
            local_broker: None,
            discovery: None,
            registration_ttl: 30_000,
        }
    }

    pub fn with_broker(mut self, broker: impl Into<String>) -> Self {
        self.local_broker = Some(broker.into());
        self
    }

    pub fn with_discovery(mut self, discovery: impl Into<String>) -> Self {
        self.discovery = Some(discovery.into());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum AttachStatus {
    Attached,
    /// The parent was unreachable; registration is retried in the background.
    Deferred,
}

#[derive(Debug)]
struct FedSub {
    sub: Subscription,
    throttle: ThrottleState,
    providers: ProviderSet,
    availability: Option<String>,
    trace: Vec<String>,
}

#[derive(Debug)]
struct ParentLink {
    discovery: String,
    registration_id: String,
    registered: bool,
    due: u64,
    failures: u32,
}

#[derive(Debug, Default)]
struct FedState {
    subs: BTreeMap<String, FedSub>,
    next_sub: u64,
    parent: Option<ParentLink>,
}

pub struct FederationNode {
    cfg: FederationConfig,
    clock: Arc<dyn Clock>,
    transport: Arc<dyn Transport>,
    state: Mutex<FedState>,
}

const RELAY_PREFIX: &str = "/v1/relay/";
const AVAILABILITY_SUFFIX: &str = "/availability";

impl FederationNode {
    pub fn new(cfg: FederationConfig, clock: Arc<dyn Clock>, transport: Arc<dyn Transport>) -> Self {
        FederationNode {
            cfg,
            clock,
            transport,
            state: Mutex::new(FedState::default()),
        }
    }

    pub fn config(&self) -> &FederationConfig {
        &self.cfg
    }

    fn state(&self) -> MutexGuard<'_, FedState> {
        self.state.lock().expect("federation lock")
    }

    fn extend_trace(&self, trace: &[String]) -> (bool, Vec<String>) {
        let visited = trace.iter().any(|n| n == &self.cfg.node_id);
        let mut next = trace.to_vec();
        if !visited {
            next.push(self.cfg.node_id.clone());
        }
        (visited, next)
    }

    /// Providing endpoints matching `q`, excluding this node. `Err` carries
    /// the discovery endpoint when it could not be consulted.
    fn providers(&self, q: &DiscoveryQuery) -> Result<Vec<Registration>, String> {
        let Some(d) = &self.cfg.discovery else {
            return Ok(Vec::new());
        };
        client::discover(self.transport.as_ref(), d, q)
            .map(|regs| {
                regs.into_iter()
                    .filter(|r| r.providing_endpoint != self.cfg.endpoint)
                    .collect()
            })
            .map_err(|e| {
                log::warn!("{}: discovery {d} failed: {e}", self.cfg.node_id);
                d.clone()
            })
    }

    /// Resolve `q` across the federation. A node already on `trace` answers
    /// from its own broker only.
    pub fn federated_query(&self, q: &QueryRequest, trace: &[String]) -> QueryResponse {
        let (visited, trace) = self.extend_trace(trace);
        let mut endpoints: Vec<String> = self.cfg.local_broker.iter().cloned().collect();
        let mut partial = BTreeSet::new();
        if !visited {
            let dq = DiscoveryQuery {
                entities: q.entities.clone(),
                attributes: q.attributes.clone(),
                scopes: q.scopes.clone(),
            };
            match self.providers(&dq) {
                Ok(regs) => {
                    for r in regs {
                        if !endpoints.contains(&r.providing_endpoint) {
                            endpoints.push(r.providing_endpoint);
                        }
                    }
                }
                Err(d) => {
                    partial.insert(d);
                }
            }
        }
        let body = to_value(q);
        let calls: Vec<(String, Value)> = endpoints
            .iter()
            .map(|e| (endpoint_url(e, "/v1/queryContext"), body.clone()))
            .collect();
        let results = self.transport.request_all(&calls, &trace);
        let mut groups = Vec::with_capacity(endpoints.len());
        for (ep, r) in endpoints.into_iter().zip(results) {
            match r.and_then(|v| {
                crate::model::from_value_typed::<QueryResponse>(v).map_err(|e| TransportError::Protocol(e.to_string()))
            }) {
                Ok(resp) => {
                    partial.extend(resp.partial);
                    groups.push((ep, resp.elements));
                }
                Err(e) => {
                    log::warn!("{}: provider {ep} failed: {e}", self.cfg.node_id);
                    partial.insert(ep);
                }
            }
        }
        QueryResponse {
            elements: merge_elements(&groups, MergePolicy),
            partial: partial.into_iter().collect(),
        }
    }

    fn relay_url(&self, id: &str) -> String {
        endpoint_url(&self.cfg.endpoint, &format!("{RELAY_PREFIX}{id}"))
    }

    fn upstream_sub(&self, id: &str, sub: &Subscription, skip_initial: bool) -> Subscription {
        Subscription {
            entities: sub.entities.clone(),
            attributes: sub.attributes.clone(),
            scopes: sub.scopes.clone(),
            notify_endpoint: self.relay_url(id),
            throttling: 0,
            policy: ThrottlePolicy::Drop,
            expires: sub.expires,
            skip_initial,
        }
    }

    fn emit(&self, id: &str, sub: &Subscription, em: Emission, now: u64) {
        let n = Notification {
            subscription_id: id.to_string(),
            aggregation: em.aggregation,
            elements: em.elements,
            emitted_at: now,
        };
        self.transport.send(&sub.notify_endpoint, to_value(&n));
    }

    /// Subscribe at every claimed endpoint and record the outcome.
    fn bind_all(&self, id: &str, claimed: Vec<String>, skip_initial: bool) {
        for ep in claimed {
            let (upstream, trace) = {
                let st = self.state();
                let Some(fs) = st.subs.get(id) else { return };
                (self.upstream_sub(id, &fs.sub, skip_initial), fs.trace.clone())
            };
            let result = client::subscribe(self.transport.as_ref(), &ep, &upstream, &trace);
            let outcome = match result {
                Ok(sid) => Some(sid),
                Err(e) => {
                    log::warn!("{}: cannot subscribe at {ep}: {e}", self.cfg.node_id);
                    None
                }
            };
            let stale = {
                let mut st = self.state();
                match st.subs.get_mut(id) {
                    Some(fs) => fs.providers.bind(&ep, outcome),
                    None => outcome,
                }
            };
            if let Some(sid) = stale {
                let _ = client::unsubscribe(self.transport.as_ref(), &ep, &sid);
            }
        }
    }

    pub fn federated_subscribe(&self, sub: Subscription, trace: &[String]) -> Result<String, ApiError> {
        let now = self.clock.now_ms();
        sub.validate(now).map_err(ApiError::from)?;
        let (visited, next_trace) = self.extend_trace(trace);
        let id = {
            let mut st = self.state();
            st.next_sub += 1;
            let id = format!("{}-fsub-{}", self.cfg.node_id, st.next_sub);
            let mut providers = ProviderSet::new();
            if let Some(b) = &self.cfg.local_broker {
                providers.pin(b);
            }
            st.subs.insert(
                id.clone(),
                FedSub {
                    sub: sub.clone(),
                    throttle: ThrottleState::default(),
                    providers,
                    availability: None,
                    trace: next_trace.clone(),
                },
            );
            id
        };

        if !sub.skip_initial {
            let q = QueryRequest {
                entities: sub.entities.clone(),
                attributes: sub.attributes.clone(),
                scopes: sub.scopes.clone(),
            };
            let resp = self.federated_query(&q, trace);
            let mut st = self.state();
            if let Some(fs) = st.subs.get_mut(&id) {
                fs.throttle.record_emit(now);
                let em = Emission {
                    elements: resp.elements,
                    aggregation: Aggregation::None,
                };
                self.emit(&id, &sub, em, now);
            }
        }

        let mut claimed = Vec::new();
        if !visited {
            let dq = DiscoveryQuery {
                entities: sub.entities.clone(),
                attributes: sub.attributes.clone(),
                scopes: sub.scopes.clone(),
            };
            let regs = self.providers(&dq).unwrap_or_default();
            let mut st = self.state();
            if let Some(fs) = st.subs.get_mut(&id) {
                claimed = fs.providers.observe(&regs, &[&self.cfg.endpoint]);
            }
        } else {
            let mut st = self.state();
            if let Some(fs) = st.subs.get_mut(&id) {
                claimed = fs.providers.claim_unbound();
            }
        }
        self.bind_all(&id, claimed, true);

        if !visited {
            if let Some(d) = &self.cfg.discovery {
                let avail = AvailabilitySubscription {
                    entities: sub.entities.clone(),
                    attributes: sub.attributes.clone(),
                    scopes: sub.scopes.clone(),
                    notify_endpoint: format!("{}{AVAILABILITY_SUFFIX}", self.relay_url(&id)),
                    expires: sub.expires,
                };
                match client::subscribe_availability(self.transport.as_ref(), d, &avail) {
                    Ok(aid) => {
                        if let Some(fs) = self.state().subs.get_mut(&id) {
                            fs.availability = Some(aid);
                        }
                    }
                    Err(e) => log::warn!("{}: availability subscription at {d} failed: {e}", self.cfg.node_id),
                }
            }
        }
        Ok(id)
    }

    pub fn federated_unsubscribe(&self, id: &str) -> Result<(), FederationError> {
        let now = self.clock.now_ms();
        let mut fs = self
            .state()
            .subs
            .remove(id)
            .ok_or_else(|| FederationError::UnknownSubscription(id.to_string()))?;
        if let Some(em) = fs.throttle.flush(fs.sub.policy, now) {
            self.emit(id, &fs.sub, em, now);
        }
        self.release(fs);
        Ok(())
    }

    fn release(&self, fs: FedSub) {
        for (ep, sid) in fs.providers.bound() {
            if let Err(e) = client::unsubscribe(self.transport.as_ref(), &ep, &sid) {
                log::debug!("{}: unsubscribe at {ep} failed: {e}", self.cfg.node_id);
            }
        }
        if let (Some(d), Some(aid)) = (&self.cfg.discovery, &fs.availability) {
            let _ = client::unsubscribe_availability(self.transport.as_ref(), d, aid);
        }
    }

    /// Upstream notification for relay `id`.
    fn relay(&self, id: &str, n: Notification) -> Result<(), FederationError> {
        let now = self.clock.now_ms();
        let mut st = self.state();
        let fs = st
            .subs
            .get_mut(id)
            .ok_or_else(|| FederationError::UnknownSubscription(id.to_string()))?;
        if fs.sub.expires.is_some_and(|t| t <= now) {
            let mut fs = st.subs.remove(id).expect("present");
            drop(st);
            if let Some(em) = fs.throttle.flush(fs.sub.policy, now) {
                self.emit(id, &fs.sub, em, now);
            }
            self.release(fs);
            return Ok(());
        }
        if n.elements.is_empty() {
            return Ok(());
        }
        if fs.sub.throttling == 0 {
            fs.throttle.record_emit(now);
            let em = Emission {
                elements: n.elements,
                aggregation: Aggregation::None,
            };
            self.emit(id, &fs.sub, em, now);
            return Ok(());
        }
        for e in n.elements {
            if let GateOutcome::EmitNow(em) = fs.throttle.gate(fs.sub.throttling, fs.sub.policy, e, now) {
                self.emit(id, &fs.sub, em, now);
            }
        }
        Ok(())
    }

    fn availability(&self, id: &str, n: AvailabilityNotification) -> Result<(), FederationError> {
        let (claimed, released) = {
            let mut st = self.state();
            let fs = st
                .subs
                .get_mut(id)
                .ok_or_else(|| FederationError::UnknownSubscription(id.to_string()))?;
            let released = fs.providers.remove_registrations(&n.removed);
            let claimed = fs.providers.observe(&n.registrations, &[&self.cfg.endpoint]);
            (claimed, released)
        };
        for (ep, sid) in released {
            if let Some(sid) = sid {
                let _ = client::unsubscribe(self.transport.as_ref(), &ep, &sid);
            }
        }
        self.bind_all(id, claimed, false);
        Ok(())
    }

    /// Endpoints currently bound for relay `id`.
    pub fn relay_providers(&self, id: &str) -> Vec<String> {
        self.state()
            .subs
            .get(id)
            .map(|fs| fs.providers.bound().into_iter().map(|(ep, _)| ep).collect())
            .unwrap_or_default()
    }

    /// Patterns this node can serve: everything registered in its discovery
    /// plus one type wildcard per entity type in its broker.
    pub fn summary(&self) -> Vec<EntityRef> {
        let mut out: Vec<EntityRef> = Vec::new();
        let all = EntityRef::any_of_type(ANY_TYPE).expect("wildcard is valid");
        if let Some(d) = &self.cfg.discovery {
            match client::discover(self.transport.as_ref(), d, &DiscoveryQuery::new(vec![all.clone()])) {
                Ok(regs) => {
                    for r in regs.into_iter().filter(|r| r.providing_endpoint != self.cfg.endpoint) {
                        for e in r.entities {
                            if !out.contains(&e) {
                                out.push(e);
                            }
                        }
                    }
                }
                Err(e) => log::warn!("{}: cannot summarize discovery: {e}", self.cfg.node_id),
            }
        }
        if let Some(b) = &self.cfg.local_broker {
            match client::query(self.transport.as_ref(), b, &QueryRequest::new(vec![all]), &[]) {
                Ok(resp) => {
                    let types: BTreeSet<String> = resp.elements.iter().map(|e| e.entity_type().to_string()).collect();
                    for t in types {
                        let p = EntityRef::any_of_type(t).expect("stored types are literal");
                        if !out.contains(&p) {
                            out.push(p);
                        }
                    }
                }
                Err(e) => log::warn!("{}: cannot summarize broker: {e}", self.cfg.node_id),
            }
        }
        out
    }

    /// Advertise this node at `parent` and keep the registration alive.
    pub fn attach_parent(&self, parent: &str) -> AttachStatus {
        let now = self.clock.now_ms();
        {
            let mut st = self.state();
            st.parent = Some(ParentLink {
                discovery: parent.to_string(),
                registration_id: format!("fed-{}", self.cfg.node_id),
                registered: false,
                due: now,
                failures: 0,
            });
        }
        match self.renew(now) {
            Ok(()) => AttachStatus::Attached,
            Err(_) => AttachStatus::Deferred,
        }
    }

    fn renew(&self, now: u64) -> Result<(), FederationError> {
        let (parent, reg_id) = {
            let st = self.state();
            let Some(p) = &st.parent else { return Ok(()) };
            (p.discovery.clone(), p.registration_id.clone())
        };
        let mut reg = Registration::new(self.summary(), self.cfg.endpoint.clone());
        reg.id = reg_id;
        reg.expires = Some(now + self.cfg.registration_ttl);
        let result = client::register(self.transport.as_ref(), &parent, &reg);
        let mut st = self.state();
        let Some(p) = st.parent.as_mut() else { return Ok(()) };
        let half = (self.cfg.registration_ttl / 2).max(1);
        match result {
            Ok(id) => {
                p.registration_id = id;
                p.registered = true;
                p.failures = 0;
                p.due = now + half;
                Ok(())
            }
            Err(e) => {
                log::warn!("{}: registration at parent {parent} failed: {e}", self.cfg.node_id);
                p.failures += 1;
                let backoff = 1_000u64.saturating_mul(1 << (p.failures - 1).min(16));
                p.due = now + backoff.min(half);
                Err(FederationError::ParentUnreachable(parent))
            }
        }
    }

    /// Whether the parent currently holds a registration from this node.
    pub fn parent_registered(&self) -> bool {
        self.state().parent.as_ref().is_some_and(|p| p.registered)
    }
}

impl Service for FederationNode {
    fn handle(&self, req: &Request) -> Result<Value, ApiError> {
        match req.path.as_str() {
            "/v1/queryContext" => {
                let q: QueryRequest = req.parse()?;
                Ok(to_value(&self.federated_query(&q, &req.trace)))
            }
            "/v1/subscribeContext" => {
                let sub: Subscription = req.parse()?;
                let id = self.federated_subscribe(sub, &req.trace)?;
                Ok(json!({ "subscriptionId": id }))
            }
            "/v1/unsubscribeContext" => {
                let id = subscription_id_of(&req.body)?;
                self.federated_unsubscribe(&id)?;
                Ok(json!({}))
            }
            "/v1/updateContext" => {
                let b = self.cfg.local_broker.as_ref().ok_or(FederationError::NoLocalBroker)?;
                self.transport
                    .request(&endpoint_url(b, "/v1/updateContext"), &req.body, &[])
                    .map_err(|e| match e {
                        TransportError::Rejected(api) => api,
                        other => ApiError::new("Unavailable", other.to_string()),
                    })
            }
            "/v1/attachParent" => {
                let parent = req
                    .body
                    .get("parentDiscovery")
                    .and_then(Value::as_str)
                    .ok_or_else(|| ApiError::new("MalformedJson", "expected {\"parentDiscovery\":URL}"))?;
                if url::Url::parse(parent).is_err() {
                    return Err(ApiError::new("InvariantViolation", format!("`{parent}` is not a URL")));
                }
                Ok(json!({ "status": self.attach_parent(parent) }))
            }
            path if path.starts_with(RELAY_PREFIX) => {
                let rest = &path[RELAY_PREFIX.len()..];
                if let Some(id) = rest.strip_suffix(AVAILABILITY_SUFFIX) {
                    let n: AvailabilityNotification = req.parse()?;
                    self.availability(id, n)?;
                } else {
                    let n: Notification = req.parse()?;
                    self.relay(rest, n)?;
                }
                Ok(json!({}))
            }
            other => Err(ApiError::not_found(other)),
        }
    }

    fn next_timer(&self) -> Option<u64> {
        let st = self.state();
        let throttles = st.subs.values().filter_map(|s| s.throttle.timer_due());
        throttles.chain(st.parent.as_ref().map(|p| p.due)).min()
    }

    fn on_timer(&self, now: u64) {
        let emissions: Vec<(String, Subscription, Emission)> = {
            let mut st = self.state();
            st.subs
                .iter_mut()
                .filter_map(|(id, fs)| {
                    fs.throttle
                        .fire(fs.sub.policy, now)
                        .map(|em| (id.clone(), fs.sub.clone(), em))
                })
                .collect()
        };
        for (id, sub, em) in emissions {
            self.emit(&id, &sub, em, now);
        }
        let renew = self.state().parent.as_ref().is_some_and(|p| p.due <= now);
        if renew {
            let _ = self.renew(now);
        }
    }
}
