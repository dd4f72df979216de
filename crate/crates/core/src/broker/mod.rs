//! Latest-value context broker.
//!
//! [`BrokerCore`] holds the entity store and the subscription table and is
//! driven with explicit timestamps; [`Broker`] wraps it as a network
//! [`Service`] with a clock and an outbound transport.

mod throttle;

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub use throttle::{aggregate_fn, AggregateFn, Aggregation, Emission, GateOutcome, ThrottlePolicy, ThrottleState};

use crate::datamodel::{harmonize, ModelCatalog};
use crate::model::{element_from_value, scope_matches, ContextElement, EntityRef, Scope};
use crate::net::{deliver_with_retry, to_value, ApiError, Clock, DeliveryFailed, Request, RetryPolicy, Service, Transport};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BrokerError {
    #[error("invalid subscription: {0}")]
    InvalidSubscription(String),
    #[error("unknown subscription `{0}`")]
    UnknownSubscription(String),
}

impl From<BrokerError> for ApiError {
    fn from(e: BrokerError) -> Self {
        match &e {
            BrokerError::InvalidSubscription(_) => ApiError::new("InvalidSubscription", e.to_string()),
            BrokerError::UnknownSubscription(_) => ApiError::new("UnknownSubscription", e.to_string()),
        }
    }
}

/// Standing request for notifications. The id is assigned by the server and
/// is not part of this body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Subscription {
    pub entities: Vec<EntityRef>,
    #[serde(default)]
    pub attributes: Vec<String>,
    #[serde(default)]
    pub scopes: Vec<Scope>,
    pub notify_endpoint: String,
    #[serde(default)]
    pub throttling: u64,
    #[serde(default)]
    pub policy: ThrottlePolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expires: Option<u64>,
    /// Suppress the initial notification; used by relaying federation nodes
    /// that bootstrap from a query instead.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub skip_initial: bool,
}

impl Subscription {
    pub fn new(entities: Vec<EntityRef>, notify_endpoint: impl Into<String>) -> Self {
        Subscription {
            entities,
            attributes: Vec::new(),
            scopes: Vec::new(),
            notify_endpoint: notify_endpoint.into(),
            throttling: 0,
            policy: ThrottlePolicy::Drop,
            expires: None,
            skip_initial: false,
        }
    }

    pub fn validate(&self, now: u64) -> Result<(), BrokerError> {
        if self.entities.is_empty() {
            return Err(BrokerError::InvalidSubscription("no entity patterns".into()));
        }
        if url::Url::parse(&self.notify_endpoint).is_err() {
            return Err(BrokerError::InvalidSubscription(format!(
                "notify endpoint `{}` is not a URL",
                self.notify_endpoint
            )));
        }
        if self.expires.is_some_and(|t| t <= now) {
            return Err(BrokerError::InvalidSubscription("expiry is not in the future".into()));
        }
        Ok(())
    }

    pub fn matches_entity(&self, e: &ContextElement) -> bool {
        self.entities.iter().any(|p| p.matches(e.id(), e.entity_type()))
            && self.scopes.iter().all(|s| scope_matches(s, e))
    }

    fn triggered_by(&self, changed: &[String]) -> bool {
        self.attributes.is_empty() || changed.is_empty() || self.attributes.iter().any(|a| changed.contains(a))
    }

    fn expired(&self, now: u64) -> bool {
        self.expires.is_some_and(|t| t <= now)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Notification {
    pub subscription_id: String,
    pub aggregation: Aggregation,
    pub elements: Vec<ContextElement>,
    #[serde(default)]
    pub emitted_at: u64,
}

/// A notification addressed to its subscriber.
#[derive(Debug, Clone, PartialEq)]
pub struct Outbound {
    pub url: String,
    pub notification: Notification,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct QueryRequest {
    pub entities: Vec<EntityRef>,
    #[serde(default)]
    pub attributes: Vec<String>,
    #[serde(default)]
    pub scopes: Vec<Scope>,
}

impl QueryRequest {
    pub fn new(entities: Vec<EntityRef>) -> Self {
        QueryRequest {
            entities,
            ..Default::default()
        }
    }
}

/// Query response shared by brokers and federation nodes. `partial` lists
/// providers that could not be reached; a plain broker always returns it empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub elements: Vec<ContextElement>,
    #[serde(default)]
    pub partial: Vec<String>,
}

#[derive(Debug, Clone)]
struct Stored {
    element: ContextElement,
    /// Logical update sequence number per attribute.
    updated: BTreeMap<String, u64>,
}

#[derive(Debug, Clone)]
struct SubEntry {
    sub: Subscription,
    throttle: ThrottleState,
}

#[derive(Debug, Default)]
pub struct BrokerCore {
    /// Keyed by `(type, id)` so iteration yields query order.
    store: BTreeMap<(String, String), Stored>,
    subs: BTreeMap<String, SubEntry>,
    next_sub: u64,
    seq: u64,
    prefix: String,
}

impl BrokerCore {
    pub fn new(node_id: &str) -> Self {
        BrokerCore {
            prefix: format!("{node_id}-sub-"),
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    pub fn subscription_ids(&self) -> impl Iterator<Item = &str> {
        self.subs.keys().map(String::as_str)
    }

    /// Attribute-level merge of each element into the store; matching
    /// subscriptions see the merged state through their throttle gate.
    pub fn update_context(&mut self, elements: Vec<ContextElement>, now: u64) -> Vec<Outbound> {
        let mut out = Vec::new();
        for e in elements {
            self.seq += 1;
            let key = (e.entity_type().to_string(), e.id().to_string());
            let changed: Vec<String> = e.attributes().iter().map(|a| a.name().to_string()).collect();
            let (entity, attrs) = e.into_parts();
            let stored = self.store.entry(key).or_insert_with(|| Stored {
                element: ContextElement::new(entity, Vec::new()).expect("validated on decode"),
                updated: BTreeMap::new(),
            });
            for a in attrs {
                stored.updated.insert(a.name().to_string(), self.seq);
                stored.element.upsert(a);
            }
            let merged = stored.element.clone();
            self.feed(&merged, &changed, now, &mut out);
        }
        out
    }

    fn feed(&mut self, merged: &ContextElement, changed: &[String], now: u64, out: &mut Vec<Outbound>) {
        let mut expired = Vec::new();
        for (id, entry) in self.subs.iter_mut() {
            if !entry.sub.triggered_by(changed) || !entry.sub.matches_entity(merged) {
                continue;
            }
            if entry.sub.expired(now) {
                expired.push(id.clone());
                continue;
            }
            let snapshot = merged.project(&entry.sub.attributes);
            if let GateOutcome::EmitNow(em) = entry.throttle.gate(entry.sub.throttling, entry.sub.policy, snapshot, now) {
                out.push(outbound(id, &entry.sub, em, now));
            }
        }
        for id in expired {
            out.extend(self.remove(&id, now));
        }
    }

    pub fn query_context(&self, q: &QueryRequest) -> Vec<ContextElement> {
        self.store
            .values()
            .map(|s| &s.element)
            .filter(|e| q.entities.iter().any(|p| p.matches(e.id(), e.entity_type())))
            .filter(|e| q.scopes.iter().all(|s| scope_matches(s, e)))
            .map(|e| e.project(&q.attributes))
            .collect()
    }

    /// Register a subscription and emit its initial notification (unless
    /// suppressed). The initial notification counts as an emission.
    pub fn subscribe(&mut self, sub: Subscription, now: u64) -> Result<(String, Vec<Outbound>), BrokerError> {
        sub.validate(now)?;
        self.next_sub += 1;
        let id = format!("{}{}", self.prefix, self.next_sub);
        let mut entry = SubEntry {
            sub,
            throttle: ThrottleState::default(),
        };
        let mut out = Vec::new();
        if !entry.sub.skip_initial {
            let q = QueryRequest {
                entities: entry.sub.entities.clone(),
                attributes: entry.sub.attributes.clone(),
                scopes: entry.sub.scopes.clone(),
            };
            let elements = self.query_context(&q);
            entry.throttle.record_emit(now);
            out.push(outbound(
                &id,
                &entry.sub,
                Emission {
                    elements,
                    aggregation: Aggregation::None,
                },
                now,
            ));
        }
        self.subs.insert(id.clone(), entry);
        Ok((id, out))
    }

    /// Remove a subscription, flushing anything still buffered.
    pub fn unsubscribe(&mut self, id: &str, now: u64) -> Result<Vec<Outbound>, BrokerError> {
        if !self.subs.contains_key(id) {
            return Err(BrokerError::UnknownSubscription(id.to_string()));
        }
        Ok(self.remove(id, now).into_iter().collect())
    }

    fn remove(&mut self, id: &str, now: u64) -> Option<Outbound> {
        let mut entry = self.subs.remove(id)?;
        entry
            .throttle
            .flush(entry.sub.policy, now)
            .map(|em| outbound(id, &entry.sub, em, now))
    }

    pub fn next_timer(&self) -> Option<u64> {
        self.subs.values().filter_map(|e| e.throttle.timer_due()).min()
    }

    pub fn fire_timers(&mut self, now: u64) -> Vec<Outbound> {
        let mut out = Vec::new();
        let mut expired = Vec::new();
        for (id, entry) in self.subs.iter_mut() {
            if entry.throttle.timer_due().is_none_or(|d| d > now) {
                continue;
            }
            if entry.sub.expired(now) {
                expired.push(id.clone());
                continue;
            }
            if let Some(em) = entry.throttle.fire(entry.sub.policy, now) {
                out.push(outbound(id, &entry.sub, em, now));
            }
        }
        for id in expired {
            out.extend(self.remove(&id, now));
        }
        out
    }
}

fn outbound(id: &str, sub: &Subscription, em: Emission, now: u64) -> Outbound {
    Outbound {
        url: sub.notify_endpoint.clone(),
        notification: Notification {
            subscription_id: id.to_string(),
            aggregation: em.aggregation,
            elements: em.elements,
            emitted_at: now,
        },
    }
}

/// POST a notification with bounded retries.
pub fn deliver(
    transport: &dyn Transport,
    n: &Notification,
    endpoint: &str,
    policy: &RetryPolicy,
    sleep: &mut dyn FnMut(u64),
) -> Result<u32, DeliveryFailed> {
    deliver_with_retry(transport, endpoint, &to_value(n), policy, sleep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "camelCase")]
pub enum UpdateStatus {
    Ok,
    Error {
        #[serde(rename = "error")]
        code: String,
        detail: String,
    },
}

/// Decode each element of an update body independently.
pub fn decode_update(body: &Value) -> Result<Vec<Result<ContextElement, ApiError>>, ApiError> {
    let items = body
        .get("elements")
        .and_then(Value::as_array)
        .ok_or_else(|| ApiError::new("MalformedJson", "expected {\"elements\":[...]}"))?;
    Ok(items
        .iter()
        .map(|v| element_from_value(v.clone()).map_err(ApiError::from))
        .collect())
}

/// The broker as a network service.
pub struct Broker {
    core: Mutex<BrokerCore>,
    models: ModelCatalog,
    clock: Arc<dyn Clock>,
    transport: Arc<dyn Transport>,
}

impl Broker {
    pub fn new(node_id: &str, clock: Arc<dyn Clock>, transport: Arc<dyn Transport>) -> Self {
        Self::with_models(node_id, ModelCatalog::default(), clock, transport)
    }

    /// Updates whose entity type names a model are harmonized before storage.
    pub fn with_models(
        node_id: &str,
        models: ModelCatalog,
        clock: Arc<dyn Clock>,
        transport: Arc<dyn Transport>,
    ) -> Self {
        Broker {
            core: Mutex::new(BrokerCore::new(node_id)),
            models,
            clock,
            transport,
        }
    }

    fn dispatch(&self, out: Vec<Outbound>) {
        for o in out {
            self.transport.send(&o.url, to_value(&o.notification));
        }
    }

    fn prepare(&self, e: ContextElement) -> Result<ContextElement, ApiError> {
        match self.models.get(e.entity_type()) {
            Some(m) => harmonize(&e, m).map_err(|err| ApiError::new("SynonymCollision", err.to_string())),
            None => Ok(e),
        }
    }

    pub fn update(&self, body: &Value) -> Result<Value, ApiError> {
        let decoded = decode_update(body)?;
        let mut statuses = Vec::with_capacity(decoded.len());
        let mut valid = Vec::new();
        for d in decoded {
            match d.and_then(|e| self.prepare(e)) {
                Ok(e) => {
                    valid.push(e);
                    statuses.push(UpdateStatus::Ok);
                }
                Err(err) => statuses.push(UpdateStatus::Error {
                    code: err.code,
                    detail: err.detail,
                }),
            }
        }
        let out = {
            let mut core = self.core.lock().expect("broker lock");
            core.update_context(valid, self.clock.now_ms())
        };
        self.dispatch(out);
        Ok(json!({ "results": statuses }))
    }
}

impl Service for Broker {
    fn handle(&self, req: &Request) -> Result<Value, ApiError> {
        match req.path.as_str() {
            "/v1/updateContext" => self.update(&req.body),
            "/v1/queryContext" => {
                let q: QueryRequest = req.parse()?;
                let elements = self.core.lock().expect("broker lock").query_context(&q);
                Ok(to_value(&QueryResponse {
                    elements,
                    partial: Vec::new(),
                }))
            }
            "/v1/subscribeContext" => {
                let sub: Subscription = req.parse()?;
                let (id, out) = {
                    let mut core = self.core.lock().expect("broker lock");
                    core.subscribe(sub, self.clock.now_ms())?
                };
                self.dispatch(out);
                Ok(json!({ "subscriptionId": id }))
            }
            "/v1/unsubscribeContext" => {
                let id = subscription_id_of(&req.body)?;
                let out = {
                    let mut core = self.core.lock().expect("broker lock");
                    core.unsubscribe(&id, self.clock.now_ms())?
                };
                self.dispatch(out);
                Ok(json!({}))
            }
            other => Err(ApiError::not_found(other)),
        }
    }

    fn next_timer(&self) -> Option<u64> {
        self.core.lock().expect("broker lock").next_timer()
    }

    fn on_timer(&self, now: u64) {
        let out = self.core.lock().expect("broker lock").fire_timers(now);
        self.dispatch(out);
    }
}

pub(crate) fn subscription_id_of(body: &Value) -> Result<String, ApiError> {
    body.get("id")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| ApiError::new("MalformedJson", "expected {\"id\":...}"))
}
