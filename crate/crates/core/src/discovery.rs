//! Context availability registry.
//!
//! Providers register which entities and attributes they can serve, under
//! which scope, and optionally which real-world things their sensors
//! observe. Consumers discover providers by pattern, attribute and scope,
//! or subscribe to be told when matching providers appear or disappear.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::broker::subscription_id_of;
use crate::model::{EntityRef, ModelError, Scope};
use crate::net::{to_value, ApiError, Clock, Request, Service, Transport};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DiscoveryError {
    #[error("invariant violated: {0}")]
    InvariantViolation(String),
    #[error("unknown subscription `{0}`")]
    UnknownSubscription(String),
    #[error("unknown registration `{0}`")]
    UnknownRegistration(String),
}

impl From<DiscoveryError> for ApiError {
    fn from(e: DiscoveryError) -> Self {
        let code = match &e {
            DiscoveryError::InvariantViolation(_) => "InvariantViolation",
            DiscoveryError::UnknownSubscription(_) => "UnknownSubscription",
            DiscoveryError::UnknownRegistration(_) => "UnknownRegistration",
        };
        ApiError::new(code, e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeDecl {
    pub name: String,
    #[serde(rename = "type", default)]
    pub attr_type: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Registration {
    /// Empty on first registration; set to renew an existing one.
    #[serde(default)]
    pub id: String,
    pub entities: Vec<EntityRef>,
    #[serde(default)]
    pub attributes: Vec<AttributeDecl>,
    pub providing_endpoint: String,
    /// Scope metadata: coverage boxes and named values such as `streetName`.
    #[serde(default)]
    pub scopes: Vec<Scope>,
    /// Things observed by this resource.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub things: Vec<EntityRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expires: Option<u64>,
}

impl Registration {
    pub fn new(entities: Vec<EntityRef>, providing_endpoint: impl Into<String>) -> Self {
        Registration {
            id: String::new(),
            entities,
            attributes: Vec::new(),
            providing_endpoint: providing_endpoint.into(),
            scopes: Vec::new(),
            things: Vec::new(),
            expires: None,
        }
    }

    fn validate(&self, now: u64) -> Result<(), DiscoveryError> {
        if self.providing_endpoint.trim().is_empty() {
            return Err(DiscoveryError::InvariantViolation("providingEndpoint is empty".into()));
        }
        if url::Url::parse(&self.providing_endpoint).is_err() {
            return Err(DiscoveryError::InvariantViolation(format!(
                "providingEndpoint `{}` is not a URL",
                self.providing_endpoint
            )));
        }
        if self.expires.is_some_and(|t| t <= now) {
            return Err(DiscoveryError::InvariantViolation("expires is not after registration time".into()));
        }
        Ok(())
    }

    fn alive(&self, now: u64) -> bool {
        self.expires.is_none_or(|t| t > now)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DiscoveryQuery {
    pub entities: Vec<EntityRef>,
    #[serde(default)]
    pub attributes: Vec<String>,
    #[serde(default)]
    pub scopes: Vec<Scope>,
}

impl DiscoveryQuery {
    pub fn new(entities: Vec<EntityRef>) -> Self {
        DiscoveryQuery {
            entities,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AvailabilitySubscription {
    pub entities: Vec<EntityRef>,
    #[serde(default)]
    pub attributes: Vec<String>,
    #[serde(default)]
    pub scopes: Vec<Scope>,
    pub notify_endpoint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expires: Option<u64>,
}

impl AvailabilitySubscription {
    pub fn query(&self) -> DiscoveryQuery {
        DiscoveryQuery {
            entities: self.entities.clone(),
            attributes: self.attributes.clone(),
            scopes: self.scopes.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AvailabilityNotification {
    pub subscription_id: String,
    pub registrations: Vec<Registration>,
    #[serde(default)]
    pub removed: Vec<String>,
}

/// A query scope is satisfied when the registration declares no scope of
/// the same kind (unscoped providers may serve anything) or one of its
/// declared scopes overlaps the query.
fn scope_satisfied(query: &Scope, declared: &[Scope]) -> bool {
    match query {
        Scope::GeoBox(q) => {
            let mut boxes = declared.iter().filter_map(|s| match s {
                Scope::GeoBox(b) => Some(b),
                _ => None,
            });
            let mut any = false;
            let hit = boxes.any(|b| {
                any = true;
                b.intersects(q)
            });
            hit || !any
        }
        Scope::StringMatch { target, value } => {
            let named: Vec<&String> = declared
                .iter()
                .filter_map(|s| match s {
                    Scope::StringMatch { target: t, value: v } if t == target => Some(v),
                    _ => None,
                })
                .collect();
            named.is_empty() || named.iter().any(|v| v.contains(value.as_str()))
        }
    }
}

pub fn registration_matches(reg: &Registration, q: &DiscoveryQuery) -> bool {
    let entities = reg
        .entities
        .iter()
        .any(|r| q.entities.iter().any(|p| p.intersects(r)));
    let attributes = q.attributes.is_empty()
        || reg.attributes.is_empty()
        || reg.attributes.iter().any(|a| q.attributes.contains(&a.name));
    entities && attributes && q.scopes.iter().all(|s| scope_satisfied(s, &reg.scopes))
}

/// Outbound availability notification.
#[derive(Debug, Clone, PartialEq)]
pub struct AvailabilityOutbound {
    pub url: String,
    pub notification: AvailabilityNotification,
}

#[derive(Debug, Default)]
pub struct DiscoveryCore {
    regs: BTreeMap<String, Registration>,
    subs: BTreeMap<String, AvailabilitySubscription>,
    next_reg: u64,
    next_sub: u64,
}

impl DiscoveryCore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, mut r: Registration, now: u64) -> Result<(String, Vec<AvailabilityOutbound>), DiscoveryError> {
        r.validate(now)?;
        if r.id.is_empty() {
            self.next_reg += 1;
            r.id = format!("r-{}", self.next_reg);
        }
        let previous = self.regs.insert(r.id.clone(), r.clone());
        let mut out = Vec::new();
        for (sid, s) in &self.subs {
            if s.expires.is_some_and(|t| t <= now) {
                continue;
            }
            let q = s.query();
            let was = previous.as_ref().is_some_and(|p| p.alive(now) && registration_matches(p, &q));
            if registration_matches(&r, &q) {
                out.push(avail(sid, s, vec![r.clone()], vec![]));
            } else if was {
                out.push(avail(sid, s, vec![], vec![r.id.clone()]));
            }
        }
        Ok((r.id, out))
    }

    pub fn unregister(&mut self, id: &str, now: u64) -> Result<Vec<AvailabilityOutbound>, DiscoveryError> {
        let r = self
            .regs
            .remove(id)
            .ok_or_else(|| DiscoveryError::UnknownRegistration(id.to_string()))?;
        Ok(self.removal(&r, now))
    }

    fn removal(&self, r: &Registration, now: u64) -> Vec<AvailabilityOutbound> {
        self.subs
            .iter()
            .filter(|(_, s)| s.expires.is_none_or(|t| t > now))
            .filter(|(_, s)| registration_matches(r, &s.query()))
            .map(|(sid, s)| avail(sid, s, vec![], vec![r.id.clone()]))
            .collect()
    }

    /// Unexpired matching registrations, ordered by id.
    pub fn discover(&self, q: &DiscoveryQuery, now: u64) -> Vec<Registration> {
        self.regs
            .values()
            .filter(|r| r.alive(now) && registration_matches(r, q))
            .cloned()
            .collect()
    }

    pub fn subscribe(
        &mut self,
        s: AvailabilitySubscription,
        now: u64,
    ) -> Result<(String, AvailabilityOutbound), DiscoveryError> {
        if s.entities.is_empty() {
            return Err(DiscoveryError::InvariantViolation("no entity patterns".into()));
        }
        if url::Url::parse(&s.notify_endpoint).is_err() {
            return Err(DiscoveryError::InvariantViolation("notifyEndpoint is not a URL".into()));
        }
        if s.expires.is_some_and(|t| t <= now) {
            return Err(DiscoveryError::InvariantViolation("expires is not in the future".into()));
        }
        self.next_sub += 1;
        let id = format!("as-{}", self.next_sub);
        let initial = avail(&id, &s, self.discover(&s.query(), now), vec![]);
        self.subs.insert(id.clone(), s);
        Ok((id, initial))
    }

    pub fn unsubscribe(&mut self, id: &str) -> Result<(), DiscoveryError> {
        self.subs
            .remove(id)
            .map(|_| ())
            .ok_or_else(|| DiscoveryError::UnknownSubscription(id.to_string()))
    }

    /// Sensors observing `thing`.
    pub fn resolve_thing(&self, thing: &EntityRef, now: u64) -> Vec<Registration> {
        self.regs
            .values()
            .filter(|r| r.alive(now))
            .filter(|r| r.things.iter().any(|t| t.matches(thing.id(), thing.entity_type())))
            .cloned()
            .collect()
    }

    pub fn next_timer(&self) -> Option<u64> {
        let regs = self.regs.values().filter_map(|r| r.expires);
        let subs = self.subs.values().filter_map(|s| s.expires);
        regs.chain(subs).min()
    }

    /// Drop expired entries; subscribers get one `removed` notification per
    /// lapsed registration.
    pub fn expire(&mut self, now: u64) -> Vec<AvailabilityOutbound> {
        self.subs.retain(|_, s| s.expires.is_none_or(|t| t > now));
        let lapsed: Vec<String> = self
            .regs
            .values()
            .filter(|r| !r.alive(now))
            .map(|r| r.id.clone())
            .collect();
        let mut out = Vec::new();
        for id in lapsed {
            let r = self.regs.remove(&id).expect("listed above");
            out.extend(self.removal(&r, now));
        }
        out
    }
}

fn avail(sid: &str, s: &AvailabilitySubscription, regs: Vec<Registration>, removed: Vec<String>) -> AvailabilityOutbound {
    AvailabilityOutbound {
        url: s.notify_endpoint.clone(),
        notification: AvailabilityNotification {
            subscription_id: sid.to_string(),
            registrations: regs,
            removed,
        },
    }
}

pub struct Discovery {
    core: Mutex<DiscoveryCore>,
    clock: Arc<dyn Clock>,
    transport: Arc<dyn Transport>,
}

impl Discovery {
    pub fn new(clock: Arc<dyn Clock>, transport: Arc<dyn Transport>) -> Self {
        Discovery {
            core: Mutex::new(DiscoveryCore::new()),
            clock,
            transport,
        }
    }

    fn dispatch(&self, out: Vec<AvailabilityOutbound>) {
        for o in out {
            self.transport.send(&o.url, to_value(&o.notification));
        }
    }

    fn core(&self) -> std::sync::MutexGuard<'_, DiscoveryCore> {
        self.core.lock().expect("discovery lock")
    }
}

impl Service for Discovery {
    fn handle(&self, req: &Request) -> Result<Value, ApiError> {
        let now = self.clock.now_ms();
        match req.path.as_str() {
            "/v1/registerContext" => {
                let r: Registration = req.parse()?;
                let (id, out) = self.core().register(r, now)?;
                self.dispatch(out);
                Ok(json!({ "registrationId": id }))
            }
            "/v1/unregisterContext" => {
                let id = subscription_id_of(&req.body)?;
                let out = self.core().unregister(&id, now)?;
                self.dispatch(out);
                Ok(json!({}))
            }
            "/v1/discoverContextAvailability" => {
                let q: DiscoveryQuery = req.parse()?;
                Ok(json!({ "registrations": self.core().discover(&q, now) }))
            }
            "/v1/subscribeContextAvailability" => {
                let s: AvailabilitySubscription = req.parse()?;
                let (id, initial) = self.core().subscribe(s, now)?;
                self.dispatch(vec![initial]);
                Ok(json!({ "subscriptionId": id }))
            }
            "/v1/unsubscribeContextAvailability" => {
                let id = subscription_id_of(&req.body)?;
                self.core().unsubscribe(&id)?;
                Ok(json!({}))
            }
            "/v1/resolveThing" => {
                let thing: EntityRef = req.parse::<ThingQuery>()?.thing;
                if thing.is_pattern() {
                    return Err(ModelError::violation("thing", "must be a literal reference").into());
                }
                Ok(json!({ "registrations": self.core().resolve_thing(&thing, now) }))
            }
            other => Err(ApiError::not_found(other)),
        }
    }

    fn next_timer(&self) -> Option<u64> {
        self.core().next_timer()
    }

    fn on_timer(&self, now: u64) {
        let out = self.core().expire(now);
        self.dispatch(out);
    }
}

#[derive(Deserialize)]
struct ThingQuery {
    thing: EntityRef,
}
