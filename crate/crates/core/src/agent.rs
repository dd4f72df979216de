//! Southbound device adapter.
//!
//! Devices speak a flat `{device, ts, fields}` message. A [`DeviceMapping`]
//! turns each message into a context element of the mapped entity, tagged
//! with unit and timestamp metadata and checked against the entity's data
//! model. Translated updates are posted to a broker in arrival order.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::datamodel::{harmonize, validate, ModelCatalog};
use crate::model::{from_value_typed, ContextAttribute, ContextElement, EntityRef, Metadatum, ModelError};
use crate::net::{endpoint_url, to_value, ApiError, Clock, Request, Service, Transport};

/// Inbound queue bound used when none is configured.
pub const DEFAULT_QUEUE_CAPACITY: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AgentError {
    #[error("unknown device `{0}`")]
    UnknownDevice(String),
    #[error("device `{device}` maps to unknown data model `{model}`")]
    UnknownModel { device: String, model: String },
    #[error("validation failed for `{entity}`: missing {missing:?}, mistyped {mistyped:?}")]
    ValidationFailed {
        entity: String,
        missing: Vec<String>,
        mistyped: Vec<String>,
    },
    #[error("malformed device message: {0}")]
    Malformed(String),
    #[error("invalid mapping: {0}")]
    InvalidMapping(String),
}

impl From<AgentError> for ApiError {
    fn from(e: AgentError) -> Self {
        let code = match &e {
            AgentError::UnknownDevice(_) => "UnknownDevice",
            AgentError::UnknownModel { .. } => "UnknownModel",
            AgentError::ValidationFailed { .. } => "ValidationFailed",
            AgentError::Malformed(_) => "MalformedJson",
            AgentError::InvalidMapping(_) => "InvalidMapping",
        };
        ApiError::new(code, e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FieldMapping {
    pub attribute: String,
    #[serde(rename = "type")]
    pub attr_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum TimestampSource {
    /// The message's `ts`, falling back to arrival time when absent.
    #[default]
    Message,
    Arrival,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DeviceSpec {
    pub entity_id: String,
    pub entity_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub fields: BTreeMap<String, FieldMapping>,
    #[serde(default)]
    pub timestamp: TimestampSource,
}

/// Device id to entity mapping, as loaded from a mapping file.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceMapping {
    #[serde(deserialize_with = "unique_devices")]
    pub devices: BTreeMap<String, DeviceSpec>,
}

fn unique_devices<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<String, DeviceSpec>, D::Error> {
    struct Unique;
    impl<'de> Visitor<'de> for Unique {
        type Value = BTreeMap<String, DeviceSpec>;
        fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
            f.write_str("a map of device ids to device specs")
        }
        fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
            let mut out = BTreeMap::new();
            while let Some((k, v)) = map.next_entry::<String, DeviceSpec>()? {
                if out.insert(k.clone(), v).is_some() {
                    return Err(serde::de::Error::custom(format!("duplicate device id `{k}`")));
                }
            }
            Ok(out)
        }
    }
    d.deserialize_map(Unique)
}

impl DeviceMapping {
    pub fn from_json(text: &str) -> Result<Self, AgentError> {
        serde_json::from_str(text).map_err(|e| AgentError::InvalidMapping(e.to_string()))
    }

    /// Check the mapping against the loaded models: referenced models exist,
    /// mapped attribute names are canonical and every device id is non-empty.
    pub fn check(&self, models: &ModelCatalog) -> Result<(), AgentError> {
        for (id, spec) in &self.devices {
            if id.is_empty() {
                return Err(AgentError::InvalidMapping("empty device id".into()));
            }
            EntityRef::new(spec.entity_id.clone(), spec.entity_type.clone())
                .map_err(|e| AgentError::InvalidMapping(format!("device `{id}`: {e}")))?;
            let Some(name) = &spec.model else { continue };
            let m = models.get(name).ok_or_else(|| AgentError::UnknownModel {
                device: id.clone(),
                model: name.clone(),
            })?;
            for f in spec.fields.values() {
                if m.canonical(&f.attribute) != f.attribute {
                    return Err(AgentError::InvalidMapping(format!(
                        "device `{id}` maps to `{}`, a synonym of `{}`",
                        f.attribute,
                        m.canonical(&f.attribute)
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceMessage {
    pub device: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ts: Option<u64>,
    #[serde(default)]
    pub fields: Map<String, Value>,
}

impl DeviceMessage {
    pub fn parse(value: Value) -> Result<Self, AgentError> {
        let m: DeviceMessage = from_value_typed(value).map_err(|e| AgentError::Malformed(e.to_string()))?;
        if m.device.is_empty() {
            return Err(AgentError::Malformed("device is empty".into()));
        }
        if let Some((k, _)) = m.fields.iter().find(|(_, v)| v.is_object() || v.is_array()) {
            return Err(AgentError::Malformed(format!("field `{k}` is not a scalar")));
        }
        Ok(m)
    }

    pub fn parse_line(line: &str) -> Result<Self, AgentError> {
        let v: Value = serde_json::from_str(line).map_err(|e| AgentError::Malformed(e.to_string()))?;
        Self::parse(v)
    }
}

/// Result of a successful translation.
#[derive(Debug, Clone, PartialEq)]
pub struct Translation {
    pub element: ContextElement,
    /// Message fields with no mapping; dropped.
    pub unmapped: Vec<String>,
}

/// Pure translation of one device message.
pub fn translate(
    msg: &DeviceMessage,
    mapping: &DeviceMapping,
    models: &ModelCatalog,
    arrival: u64,
) -> Result<Translation, AgentError> {
    let spec = mapping
        .devices
        .get(&msg.device)
        .ok_or_else(|| AgentError::UnknownDevice(msg.device.clone()))?;
    let ts = match spec.timestamp {
        TimestampSource::Message => msg.ts.unwrap_or(arrival),
        TimestampSource::Arrival => arrival,
    };
    let mut attrs = Vec::new();
    let mut unmapped = Vec::new();
    for (field, value) in &msg.fields {
        let Some(f) = spec.fields.get(field) else {
            unmapped.push(field.clone());
            continue;
        };
        let mut md = Vec::with_capacity(2);
        if let Some(u) = &f.unit {
            md.push(Metadatum::unit(u.clone()));
        }
        md.push(Metadatum::timestamp(ts));
        attrs.push(ContextAttribute::with_metadata(f.attribute.clone(), f.attr_type.clone(), value.clone(), md).map_err(malformed)?);
    }
    let mistyped: Vec<String> = attrs
        .iter()
        .filter(|a| !value_conforms(a.attr_type(), a.value()))
        .map(|a| a.name().to_string())
        .collect();
    if !mistyped.is_empty() {
        return Err(AgentError::ValidationFailed {
            entity: spec.entity_id.clone(),
            missing: Vec::new(),
            mistyped,
        });
    }
    let element = ContextElement::build(&spec.entity_id, &spec.entity_type, attrs).map_err(malformed)?;
    let element = match &spec.model {
        None => element,
        Some(name) => {
            let m = models.get(name).ok_or_else(|| AgentError::UnknownModel {
                device: msg.device.clone(),
                model: name.clone(),
            })?;
            let h = harmonize(&element, m).map_err(|e| AgentError::InvalidMapping(e.to_string()))?;
            let report = validate(&h, m);
            if !report.is_ok() {
                return Err(AgentError::ValidationFailed {
                    entity: spec.entity_id.clone(),
                    missing: report.missing,
                    mistyped: report.type_mismatches,
                });
            }
            h
        }
    };
    Ok(Translation { element, unmapped })
}

/// Whether a scalar fits the declared attribute type. Types outside the
/// basic set accept any value.
fn value_conforms(attr_type: &str, v: &Value) -> bool {
    match attr_type {
        "Number" => v.is_number(),
        "Text" | "String" => v.is_string(),
        "Boolean" => v.is_boolean(),
        _ => true,
    }
}

fn malformed(e: ModelError) -> AgentError {
    AgentError::Malformed(e.to_string())
}

/// Bounded FIFO that evicts the oldest entry when full.
#[derive(Debug)]
pub struct AgentQueue<T> {
    items: VecDeque<T>,
    capacity: usize,
    dropped: u64,
}

impl<T> AgentQueue<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "queue capacity must be positive");
        AgentQueue {
            items: VecDeque::new(),
            capacity,
            dropped: 0,
        }
    }

    /// Enqueue; returns true if the oldest pending item was dropped.
    pub fn push(&mut self, item: T) -> bool {
        let evicted = self.items.len() >= self.capacity;
        if evicted {
            self.items.pop_front();
            self.dropped += 1;
        }
        self.items.push_back(item);
        evicted
    }

    pub fn pop(&mut self) -> Option<T> {
        self.items.pop_front()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }
}

#[derive(Debug, Default)]
struct Counters {
    received: AtomicU64,
    forwarded: AtomicU64,
    failed: AtomicU64,
    unmapped_fields: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AgentMetrics {
    pub received: u64,
    pub forwarded: u64,
    pub failed: u64,
    pub unmapped_fields: u64,
    pub dropped: u64,
}

/// The agent as a service: messages arrive at `/v1/device` (one message or
/// `{"messages":[...]}`) and are forwarded to the broker.
pub struct Agent {
    mapping: DeviceMapping,
    models: ModelCatalog,
    broker: String,
    clock: Arc<dyn Clock>,
    transport: Arc<dyn Transport>,
    queue: Mutex<AgentQueue<(DeviceMessage, u64)>>,
    counters: Counters,
    /// Serializes draining so per-device order is kept.
    pump: Mutex<()>,
}

impl Agent {
    pub fn new(
        mapping: DeviceMapping,
        models: ModelCatalog,
        broker: impl Into<String>,
        clock: Arc<dyn Clock>,
        transport: Arc<dyn Transport>,
    ) -> Result<Self, AgentError> {
        mapping.check(&models)?;
        Ok(Agent {
            mapping,
            models,
            broker: broker.into(),
            clock,
            transport,
            queue: Mutex::new(AgentQueue::new(DEFAULT_QUEUE_CAPACITY)),
            counters: Counters::default(),
            pump: Mutex::new(()),
        })
    }

    pub fn with_capacity(self, capacity: usize) -> Self {
        *self.queue.lock().expect("agent queue") = AgentQueue::new(capacity);
        self
    }

    /// Accept a message without processing it.
    pub fn enqueue(&self, msg: DeviceMessage) {
        self.counters.received.fetch_add(1, Ordering::Relaxed);
        let now = self.clock.now_ms();
        if self.queue.lock().expect("agent queue").push((msg, now)) {
            log::warn!("agent queue full; dropped the oldest message");
        }
    }

    /// Translate and forward everything queued. Returns the number forwarded.
    pub fn pump(&self) -> usize {
        let _serial = self.pump.lock().expect("agent pump");
        let url = endpoint_url(&self.broker, "/v1/updateContext");
        let mut n = 0;
        loop {
            let next = self.queue.lock().expect("agent queue").pop();
            let Some((msg, arrival)) = next else { break };
            match translate(&msg, &self.mapping, &self.models, arrival) {
                Ok(t) => {
                    self.counters
                        .unmapped_fields
                        .fetch_add(t.unmapped.len() as u64, Ordering::Relaxed);
                    self.transport.send(&url, json!({ "elements": [t.element] }));
                    self.counters.forwarded.fetch_add(1, Ordering::Relaxed);
                    n += 1;
                }
                Err(e) => {
                    log::warn!("agent: {e}");
                    self.counters.failed.fetch_add(1, Ordering::Relaxed);
                }
            }
        }
        n
    }

    pub fn metrics(&self) -> AgentMetrics {
        AgentMetrics {
            received: self.counters.received.load(Ordering::Relaxed),
            forwarded: self.counters.forwarded.load(Ordering::Relaxed),
            failed: self.counters.failed.load(Ordering::Relaxed),
            unmapped_fields: self.counters.unmapped_fields.load(Ordering::Relaxed),
            dropped: self.queue.lock().expect("agent queue").dropped(),
        }
    }

    pub fn pending(&self) -> usize {
        self.queue.lock().expect("agent queue").len()
    }
}

impl Service for Agent {
    fn handle(&self, req: &Request) -> Result<Value, ApiError> {
        match req.path.as_str() {
            "/v1/device" => {
                let msgs = match req.body.get("messages") {
                    Some(Value::Array(items)) => items.clone(),
                    Some(_) => return Err(ApiError::new("MalformedJson", "`messages` must be a list")),
                    None => vec![req.body.clone()],
                };
                let parsed = msgs
                    .into_iter()
                    .map(DeviceMessage::parse)
                    .collect::<Result<Vec<_>, _>>()?;
                let accepted = parsed.len();
                for m in parsed {
                    self.enqueue(m);
                }
                self.pump();
                Ok(json!({ "accepted": accepted }))
            }
            "/v1/agent/metrics" => Ok(to_value(&self.metrics())),
            other => Err(ApiError::not_found(other)),
        }
    }
}

/// Parse a replay file: one device message per line, blank lines ignored.
/// Errors carry the 1-based line number.
pub fn read_replay(text: &str) -> Result<Vec<DeviceMessage>, (usize, AgentError)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| DeviceMessage::parse_line(l).map_err(|e| (i + 1, e)))
        .collect()
}

/// Release instants for replayed messages: embedded timestamps are
/// replayed relative to the first one, compressed by `speed`, starting at
/// `start`. Messages without a timestamp follow their predecessor.
pub fn replay_schedule(messages: &[DeviceMessage], speed: f64, start: u64) -> Vec<u64> {
    let speed = if speed > 0.0 { speed } else { 1.0 };
    let base = messages.iter().find_map(|m| m.ts);
    let mut last = start;
    messages
        .iter()
        .map(|m| {
            if let (Some(ts), Some(b)) = (m.ts, base) {
                let at = start + (ts.saturating_sub(b) as f64 / speed).round() as u64;
                last = last.max(at);
            }
            last
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{DataModel, RequiredAttribute};
    use crate::harness::{Recorder, SimNet};
    use proptest::prelude::*;

    fn models() -> ModelCatalog {
        let wb = DataModel::new(
            "WaterBuffer",
            vec![RequiredAttribute {
                name: "fillLevel".into(),
                attr_type: "Number".into(),
            }],
            [("fill_level".to_string(), "fillLevel".to_string())].into_iter().collect(),
        )
        .unwrap();
        ModelCatalog::new([wb])
    }

    fn mapping() -> DeviceMapping {
        DeviceMapping::from_json(
            r#"{"devices":{
                "rb-1":{"entityId":"buffer-1","entityType":"WaterBuffer","model":"WaterBuffer",
                        "fields":{"fill":{"attribute":"fillLevel","type":"Number","unit":"ratio"},
                                  "cap":{"attribute":"capacity","type":"Number","unit":"m3"}}},
                "t-1":{"entityId":"room-1","entityType":"Room",
                        "fields":{"t":{"attribute":"temperature","type":"Number","unit":"celsius"}}}
            }}"#,
        )
        .unwrap()
    }

    fn msg(v: Value) -> DeviceMessage {
        DeviceMessage::parse(v).unwrap()
    }

    #[test]
    fn water_buffer_translation() {
        let t = translate(&msg(json!({"device":"rb-1","fields":{"fill":0.6}})), &mapping(), &models(), 42).unwrap();
        let e = t.element;
        assert_eq!(e.entity_type(), "WaterBuffer");
        assert_eq!(e.id(), "buffer-1");
        let a = e.attribute("fillLevel").unwrap();
        assert_eq!(a.value(), &json!(0.6));
        assert_eq!(a.metadatum("unit").unwrap().value(), &json!("ratio"));
        assert_eq!(a.timestamp(), Some(42));
    }

    #[test]
    fn message_timestamp_preferred() {
        let t = translate(&msg(json!({"device":"t-1","ts":7,"fields":{"t":20}})), &mapping(), &models(), 42).unwrap();
        assert_eq!(t.element.attribute("temperature").unwrap().timestamp(), Some(7));
    }

    #[test]
    fn errors() {
        let m = mapping();
        assert_eq!(
            translate(&msg(json!({"device":"zz","fields":{}})), &m, &models(), 0),
            Err(AgentError::UnknownDevice("zz".into()))
        );
        match translate(&msg(json!({"device":"rb-1","fields":{"cap":5}})), &m, &models(), 0) {
            Err(AgentError::ValidationFailed { missing, .. }) => assert_eq!(missing, vec!["fillLevel".to_string()]),
            other => panic!("{other:?}"),
        }
        match translate(&msg(json!({"device":"rb-1","fields":{"fill":"high"}})), &m, &models(), 0) {
            Err(AgentError::ValidationFailed { mistyped, .. }) => assert_eq!(mistyped, vec!["fillLevel".to_string()]),
            other => panic!("{other:?}"),
        }
        assert!(DeviceMessage::parse(json!({"device":"","fields":{}})).is_err());
        assert!(DeviceMessage::parse(json!({"device":"a","fields":{"x":[1]}})).is_err());
    }

    #[test]
    fn unmapped_fields_dropped_and_reported() {
        let t = translate(&msg(json!({"device":"t-1","fields":{"t":1,"battery":90}})), &mapping(), &models(), 0).unwrap();
        assert_eq!(t.unmapped, vec!["battery".to_string()]);
        assert_eq!(t.element.attributes().len(), 1);
    }

    #[test]
    fn mapping_checks() {
        let dup = r#"{"devices":{"a":{"entityId":"x","entityType":"T","fields":{}},"a":{"entityId":"y","entityType":"T","fields":{}}}}"#;
        assert!(matches!(DeviceMapping::from_json(dup), Err(AgentError::InvalidMapping(_))));
        let synonym = DeviceMapping::from_json(
            r#"{"devices":{"a":{"entityId":"x","entityType":"WaterBuffer","model":"WaterBuffer","fields":{"f":{"attribute":"fill_level","type":"Number"}}}}}"#,
        )
        .unwrap();
        assert!(synonym.check(&models()).is_err());
        let missing_model = DeviceMapping::from_json(
            r#"{"devices":{"a":{"entityId":"x","entityType":"T","model":"Nope","fields":{}}}}"#,
        )
        .unwrap();
        assert!(matches!(missing_model.check(&models()), Err(AgentError::UnknownModel { .. })));
        assert!(mapping().check(&models()).is_ok());
    }

    #[test]
    fn queue_overflow_drops_exactly_one() {
        let mut q = AgentQueue::new(DEFAULT_QUEUE_CAPACITY);
        for i in 0..DEFAULT_QUEUE_CAPACITY {
            assert!(!q.push(i));
        }
        assert!(q.push(DEFAULT_QUEUE_CAPACITY));
        assert_eq!(q.dropped(), 1);
        assert_eq!(q.len(), DEFAULT_QUEUE_CAPACITY);
        assert_eq!(q.pop(), Some(1));
    }

    #[test]
    fn replay_counts_and_per_device_order() {
        let net = SimNet::default();
        let broker = Arc::new(Recorder::new(net.clock_arc()));
        net.add_node("b", broker.clone());
        let agent = Agent::new(mapping(), models(), "mem://b", net.clock_arc(), net.transport("a")).unwrap();
        net.add_node("a", Arc::new(agent));
        let lines: String = (0..100)
            .map(|i| {
                let dev = if i % 2 == 0 { "t-1" } else { "rb-1" };
                let field = if i % 2 == 0 { "t" } else { "fill" };
                format!("{{\"device\":\"{dev}\",\"ts\":{},\"fields\":{{\"{field}\":{i}}}}}\n", i * 10)
            })
            .collect();
        let msgs = read_replay(&lines).unwrap();
        let at = replay_schedule(&msgs, 2.0, 1_000);
        assert_eq!(at[1], 1_005);
        for (m, t) in msgs.iter().zip(at) {
            net.run_until(t);
            net.request_from("replay", "mem://a/v1/device", &to_value(m)).unwrap();
        }
        net.run_until(10_000);
        let got = broker.bodies();
        assert_eq!(got.len(), 100);
        let mut per_device: BTreeMap<String, Vec<i64>> = BTreeMap::new();
        for b in got {
            let e = &b["elements"][0];
            let v = e["attributes"][0]["value"].as_f64().unwrap() as i64;
            per_device.entry(e["entity"]["id"].as_str().unwrap().into()).or_default().push(v);
        }
        for seq in per_device.values() {
            assert!(seq.windows(2).all(|w| w[0] < w[1]));
            assert_eq!(seq.len(), 50);
        }
    }

    #[test]
    fn broker_down_briefly_is_retried_in_order() {
        let net = SimNet::default();
        let broker = Arc::new(Recorder::new(net.clock_arc()));
        net.add_node("b", broker.clone());
        let agent = Arc::new(Agent::new(mapping(), models(), "mem://b", net.clock_arc(), net.transport("a")).unwrap());
        net.add_node("a", agent.clone());
        net.partition(["b".to_string()], 50);
        for i in 0..5 {
            agent.enqueue(msg(json!({"device":"t-1","fields":{"t":i}})));
        }
        agent.pump();
        net.run_until(5_000);
        let vals: Vec<f64> = broker
            .bodies()
            .iter()
            .map(|b| b["elements"][0]["attributes"][0]["value"].as_f64().unwrap())
            .collect();
        assert_eq!(vals, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(agent.metrics().forwarded, 5);
    }

    #[test]
    fn bad_replay_line_reports_line_number() {
        let err = read_replay("{\"device\":\"a\"}\n\n{oops\n").unwrap_err();
        assert_eq!(err.0, 3);
    }

    proptest! {
        #[test]
        fn translation_is_total_and_pure(fill in proptest::option::of(-1.0e6f64..1.0e6), cap in proptest::option::of(0i64..1000),
                                         junk in proptest::option::of("[a-z]{1,6}"), arrival in 0u64..1_000_000) {
            let mut fields = Map::new();
            if let Some(f) = fill { fields.insert("fill".into(), json!(f)); }
            if let Some(c) = cap { fields.insert("cap".into(), json!(c)); }
            if let Some(j) = junk { fields.insert(format!("x_{j}"), json!(1)); }
            let m = DeviceMessage { device: "rb-1".into(), ts: None, fields };
            let a = translate(&m, &mapping(), &models(), arrival);
            let b = translate(&m, &mapping(), &models(), arrival);
            prop_assert_eq!(&a, &b);
            match a {
                Ok(t) => {
                    prop_assert!(fill.is_some());
                    prop_assert!(validate(&t.element, models().get("WaterBuffer").unwrap()).is_ok());
                }
                Err(AgentError::ValidationFailed { missing, .. }) => {
                    prop_assert!(fill.is_none());
                    prop_assert_eq!(missing, vec!["fillLevel".to_string()]);
                }
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
        }
    }
}
