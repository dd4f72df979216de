//! Reference stream operators.
//!
//! An operator sees one input element at a time and returns zero or more
//! output elements of the task's output type. Outputs carry the timestamp
//! of the input that caused them, never the wall clock, so a recorded
//! trace always replays to byte-identical output.

use std::collections::{BTreeMap, VecDeque};

use serde::Deserialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::model::{ContextAttribute, ContextElement, Metadatum, UNIT};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OperatorError {
    #[error("unknown operator `{0}`")]
    Unknown(String),
    #[error("invalid parameters for `{op}`: {detail}")]
    InvalidParams { op: String, detail: String },
    #[error("operator failed on `{entity}`: {detail}")]
    Failed { entity: String, detail: String },
}

pub trait Operator: Send {
    fn on_input(&mut self, e: &ContextElement) -> Result<Vec<ContextElement>, OperatorError>;
}

type Factory = fn(&Value, &str) -> Result<Box<dyn Operator>, OperatorError>;

/// Operators addressable by name.
#[derive(Clone)]
pub struct OperatorRegistry {
    factories: BTreeMap<String, Factory>,
}

impl Default for OperatorRegistry {
    fn default() -> Self {
        let mut r = OperatorRegistry {
            factories: BTreeMap::new(),
        };
        r.register("threshold_detect", |p, out| Ok(Box::new(ThresholdDetect::new(p, out)?)));
        r.register("window_avg", |p, out| Ok(Box::new(WindowAvg::new(p, out)?)));
        r.register("setpoint", |p, out| Ok(Box::new(Setpoint::new(p, out)?)));
        r
    }
}

impl OperatorRegistry {
    pub fn register(&mut self, name: &str, f: Factory) {
        self.factories.insert(name.to_string(), f);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    /// Fresh operator state for `name`, emitting elements of `output_type`.
    pub fn instantiate(&self, name: &str, params: &Value, output_type: &str) -> Result<Box<dyn Operator>, OperatorError> {
        let f = self
            .factories
            .get(name)
            .ok_or_else(|| OperatorError::Unknown(name.to_string()))?;
        f(params, output_type)
    }
}

fn params<T: for<'de> Deserialize<'de>>(op: &str, p: &Value) -> Result<T, OperatorError> {
    let p = if p.is_null() { json!({}) } else { p.clone() };
    serde_json::from_value(p).map_err(|e| OperatorError::InvalidParams {
        op: op.to_string(),
        detail: e.to_string(),
    })
}

fn number<'a>(e: &'a ContextElement, attr: &str) -> Result<Option<(f64, &'a ContextAttribute)>, OperatorError> {
    let Some(a) = e.attribute(attr) else { return Ok(None) };
    let v = a.value().as_f64().ok_or_else(|| OperatorError::Failed {
        entity: e.id().to_string(),
        detail: format!("`{attr}` is not numeric"),
    })?;
    Ok(Some((v, a)))
}

fn stamped(name: &str, attr_type: &str, value: Value, ts: Option<u64>, unit: Option<&Metadatum>) -> ContextAttribute {
    let mut md = Vec::new();
    if let Some(u) = unit {
        md.push(u.clone());
    }
    if let Some(t) = ts {
        md.push(Metadatum::timestamp(t));
    }
    ContextAttribute::with_metadata(name, attr_type, value, md).expect("distinct metadata names")
}

fn output(id: &str, ty: &str, attrs: Vec<ContextAttribute>) -> ContextElement {
    ContextElement::build(id, ty, attrs).expect("operator outputs are well-formed")
}

/// Emits one alarm each time `attribute` rises to `threshold` or above;
/// re-arms once it drops below. State is kept per input entity.
pub struct ThresholdDetect {
    attribute: String,
    threshold: f64,
    output_type: String,
    armed: BTreeMap<(String, String), bool>,
}

#[derive(Deserialize)]
struct ThresholdParams {
    attribute: String,
    threshold: f64,
}

impl ThresholdDetect {
    pub fn new(p: &Value, output_type: &str) -> Result<Self, OperatorError> {
        let p: ThresholdParams = params("threshold_detect", p)?;
        Ok(ThresholdDetect {
            attribute: p.attribute,
            threshold: p.threshold,
            output_type: output_type.to_string(),
            armed: BTreeMap::new(),
        })
    }
}

impl Operator for ThresholdDetect {
    fn on_input(&mut self, e: &ContextElement) -> Result<Vec<ContextElement>, OperatorError> {
        let Some((v, a)) = number(e, &self.attribute)? else { return Ok(Vec::new()) };
        let armed = self
            .armed
            .entry((e.entity_type().to_string(), e.id().to_string()))
            .or_insert(true);
        if v < self.threshold {
            *armed = true;
            return Ok(Vec::new());
        }
        if !*armed {
            return Ok(Vec::new());
        }
        *armed = false;
        let ts = a.timestamp();
        Ok(vec![output(
            e.id(),
            &self.output_type,
            vec![
                stamped(&self.attribute, "Number", a.value().clone(), ts, a.metadatum(UNIT)),
                stamped("threshold", "Number", json!(self.threshold), ts, None),
                stamped("source", "Text", json!(e.id()), ts, None),
            ],
        )])
    }
}

/// Rolling mean of `attribute` over the last `window` ms (by timestamp),
/// per input entity.
pub struct WindowAvg {
    attribute: String,
    window: u64,
    output_type: String,
    samples: BTreeMap<(String, String), VecDeque<(u64, f64)>>,
}

#[derive(Deserialize)]
struct WindowParams {
    attribute: String,
    window: u64,
}

impl WindowAvg {
    pub fn new(p: &Value, output_type: &str) -> Result<Self, OperatorError> {
        let p: WindowParams = params("window_avg", p)?;
        if p.window == 0 {
            return Err(OperatorError::InvalidParams {
                op: "window_avg".into(),
                detail: "window must be positive".into(),
            });
        }
        Ok(WindowAvg {
            attribute: p.attribute,
            window: p.window,
            output_type: output_type.to_string(),
            samples: BTreeMap::new(),
        })
    }
}

impl Operator for WindowAvg {
    fn on_input(&mut self, e: &ContextElement) -> Result<Vec<ContextElement>, OperatorError> {
        let Some((v, a)) = number(e, &self.attribute)? else { return Ok(Vec::new()) };
        let t = a.timestamp().unwrap_or(0);
        let q = self
            .samples
            .entry((e.entity_type().to_string(), e.id().to_string()))
            .or_default();
        q.push_back((t, v));
        while q.front().is_some_and(|(s, _)| s + self.window <= t) {
            q.pop_front();
        }
        let mean = q.iter().map(|(_, x)| x).sum::<f64>() / q.len() as f64;
        Ok(vec![output(
            e.id(),
            &self.output_type,
            vec![stamped(&self.attribute, "Number", json!(mean), a.timestamp(), a.metadatum(UNIT))],
        )])
    }
}

/// Fill targets for water buffers from a precipitation forecast:
/// `target = clamp(capacity * (1 - ratio), 0, capacity)` with
/// `ratio = clamp(forecast / scale, 0, 1)`.
pub struct Setpoint {
    p: SetpointParams,
    output_type: String,
    buffers: BTreeMap<String, (f64, Option<Metadatum>, Option<u64>)>,
    ratio: Option<(f64, Option<u64>)>,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct SetpointParams {
    #[serde(default = "default_buffer_type")]
    buffer_type: String,
    #[serde(default = "default_capacity")]
    capacity_attribute: String,
    #[serde(default = "default_forecast")]
    forecast_attribute: String,
    #[serde(default = "default_scale")]
    scale: f64,
}

fn default_buffer_type() -> String {
    "WaterBuffer".into()
}
fn default_capacity() -> String {
    "capacity".into()
}
fn default_forecast() -> String {
    "forecastRatio".into()
}
fn default_scale() -> f64 {
    1.0
}

/// The setpoint formula on its own.
pub fn fill_target(capacity: f64, ratio: f64) -> f64 {
    (capacity * (1.0 - ratio)).clamp(0.0, capacity.max(0.0))
}

pub fn forecast_ratio(forecast: f64, scale: f64) -> f64 {
    (forecast / scale).clamp(0.0, 1.0)
}

impl Setpoint {
    pub fn new(p: &Value, output_type: &str) -> Result<Self, OperatorError> {
        let p: SetpointParams = params("setpoint", p)?;
        if !(p.scale > 0.0) {
            return Err(OperatorError::InvalidParams {
                op: "setpoint".into(),
                detail: "scale must be positive".into(),
            });
        }
        Ok(Setpoint {
            p,
            output_type: output_type.to_string(),
            buffers: BTreeMap::new(),
            ratio: None,
        })
    }

    fn target(&self, id: &str, ratio: f64, ratio_ts: Option<u64>) -> ContextElement {
        let (capacity, unit, cap_ts) = &self.buffers[id];
        let ts = match (cap_ts, ratio_ts) {
            (Some(a), Some(b)) => Some(*a.max(&b)),
            (a, b) => a.or(b),
        };
        output(
            id,
            &self.output_type,
            vec![
                stamped("targetFill", "Number", json!(fill_target(*capacity, ratio)), ts, unit.as_ref()),
                stamped("capacity", "Number", json!(capacity), ts, unit.as_ref()),
                stamped("forecastRatio", "Number", json!(ratio), ts, None),
            ],
        )
    }
}

impl Operator for Setpoint {
    fn on_input(&mut self, e: &ContextElement) -> Result<Vec<ContextElement>, OperatorError> {
        if e.entity_type() == self.p.buffer_type {
            let Some((cap, a)) = number(e, &self.p.capacity_attribute)? else { return Ok(Vec::new()) };
            self.buffers
                .insert(e.id().to_string(), (cap, a.metadatum(UNIT).cloned(), a.timestamp()));
            return Ok(match self.ratio {
                Some((r, ts)) => vec![self.target(e.id(), r, ts)],
                None => Vec::new(),
            });
        }
        let Some((f, a)) = number(e, &self.p.forecast_attribute)? else { return Ok(Vec::new()) };
        let r = forecast_ratio(f, self.p.scale);
        self.ratio = Some((r, a.timestamp()));
        Ok(self
            .buffers
            .keys()
            .map(|id| self.target(id, r, a.timestamp()))
            .collect())
    }
}
