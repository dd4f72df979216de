//! Per-subscription throttling state machine.
//!
//! `Drop` forwards an event only when at least the throttling period has
//! passed since the previous emission and discards it otherwise. The
//! aggregating policies never discard: events arriving inside the window are
//! buffered and released as one notification when the window, anchored at
//! the last emission, closes.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::model::ContextElement;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregateFn {
    Avg,
    Min,
    Max,
    Last,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ThrottlePolicy {
    #[default]
    Drop,
    AggregateSet,
    AggregateFn(AggregateFn),
}

/// How the elements of a notification were produced.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    None,
    Set,
    Avg,
    Min,
    Max,
    Last,
}

impl From<AggregateFn> for Aggregation {
    fn from(f: AggregateFn) -> Self {
        match f {
            AggregateFn::Avg => Aggregation::Avg,
            AggregateFn::Min => Aggregation::Min,
            AggregateFn::Max => Aggregation::Max,
            AggregateFn::Last => Aggregation::Last,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Emission {
    pub elements: Vec<ContextElement>,
    pub aggregation: Aggregation,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GateOutcome {
    EmitNow(Emission),
    Buffered,
    Dropped,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ThrottleState {
    last_emit: Option<u64>,
    buffer: Vec<(ContextElement, u64)>,
    timer_due: Option<u64>,
}

impl ThrottleState {
    pub fn last_emit(&self) -> Option<u64> {
        self.last_emit
    }

    pub fn timer_due(&self) -> Option<u64> {
        self.timer_due
    }

    pub fn buffered(&self) -> &[(ContextElement, u64)] {
        &self.buffer
    }

    /// Note an emission made outside the gate (the initial notification).
    pub fn record_emit(&mut self, now: u64) {
        self.last_emit = Some(now);
    }

    fn window_open(&self, throttling: u64, now: u64) -> bool {
        self.last_emit
            .is_none_or(|last| now.saturating_sub(last) >= throttling)
    }

    pub fn gate(
        &mut self,
        throttling: u64,
        policy: ThrottlePolicy,
        ev: ContextElement,
        now: u64,
    ) -> GateOutcome {
        if throttling == 0 {
            self.last_emit = Some(now);
            return GateOutcome::EmitNow(singleton(ev));
        }
        match policy {
            ThrottlePolicy::Drop => {
                if self.window_open(throttling, now) {
                    self.last_emit = Some(now);
                    GateOutcome::EmitNow(singleton(ev))
                } else {
                    GateOutcome::Dropped
                }
            }
            ThrottlePolicy::AggregateSet | ThrottlePolicy::AggregateFn(_) => {
                if self.buffer.is_empty() && self.window_open(throttling, now) {
                    self.last_emit = Some(now);
                    return GateOutcome::EmitNow(singleton(ev));
                }
                self.buffer.push((ev, now));
                if self.timer_due.is_some_and(|due| due <= now) {
                    // The timer is late; release everything at once.
                    return match self.take(policy, now) {
                        Some(e) => GateOutcome::EmitNow(e),
                        None => GateOutcome::Buffered,
                    };
                }
                let last = self.last_emit.unwrap_or(now);
                self.timer_due = Some(last + throttling);
                GateOutcome::Buffered
            }
        }
    }

    /// Timer expiry: emit the buffered events if the window has closed.
    pub fn fire(&mut self, policy: ThrottlePolicy, now: u64) -> Option<Emission> {
        match self.timer_due {
            Some(due) if due <= now => self.take(policy, now),
            _ => None,
        }
    }

    /// Release whatever is buffered regardless of the window (unsubscribe, expiry).
    pub fn flush(&mut self, policy: ThrottlePolicy, now: u64) -> Option<Emission> {
        self.take(policy, now)
    }

    fn take(&mut self, policy: ThrottlePolicy, now: u64) -> Option<Emission> {
        self.timer_due = None;
        if self.buffer.is_empty() {
            return None;
        }
        let events: Vec<ContextElement> = self.buffer.drain(..).map(|(e, _)| e).collect();
        self.last_emit = Some(now);
        Some(match policy {
            ThrottlePolicy::AggregateFn(f) => aggregate_fn(&events, f),
            _ => Emission {
                elements: events,
                aggregation: Aggregation::Set,
            },
        })
    }
}

fn singleton(ev: ContextElement) -> Emission {
    Emission {
        elements: vec![ev],
        aggregation: Aggregation::None,
    }
}

/// One synthetic element per entity: each attribute carries `f` over its
/// buffered values, keeping type and metadata of the latest snapshot.
/// Attributes with any non-numeric value fall back to the latest value and
/// the notification is labelled `last`.
pub fn aggregate_fn(events: &[ContextElement], f: AggregateFn) -> Emission {
    let mut entities: Vec<&crate::model::EntityRef> = Vec::new();
    for e in events {
        if !entities.contains(&e.entity()) {
            entities.push(e.entity());
        }
    }
    let mut fell_back = false;
    let mut elements = Vec::with_capacity(entities.len());
    for entity in entities {
        let snapshots: Vec<&ContextElement> = events.iter().filter(|e| e.entity() == entity).collect();
        let mut names: Vec<&str> = Vec::new();
        for s in &snapshots {
            for a in s.attributes() {
                if !names.contains(&a.name()) {
                    names.push(a.name());
                }
            }
        }
        let mut attrs = Vec::with_capacity(names.len());
        for name in names {
            let series: Vec<_> = snapshots.iter().filter_map(|s| s.attribute(name)).collect();
            let latest = (*series.last().expect("name came from a snapshot")).clone();
            let values: Vec<&Value> = series.iter().map(|a| a.value()).collect();
            let value = match fold_numeric(&values, f) {
                Some(v) => v,
                None => {
                    fell_back = true;
                    latest.value().clone()
                }
            };
            attrs.push(latest.with_value(value));
        }
        elements.push(
            ContextElement::new(entity.clone(), attrs).expect("names are deduplicated per entity"),
        );
    }
    Emission {
        elements,
        aggregation: if fell_back { Aggregation::Last } else { f.into() },
    }
}

fn fold_numeric(values: &[&Value], f: AggregateFn) -> Option<Value> {
    let nums: Vec<f64> = values.iter().map(|v| v.as_f64()).collect::<Option<_>>()?;
    if nums.is_empty() {
        return None;
    }
    Some(match f {
        AggregateFn::Avg => Value::from(nums.iter().sum::<f64>() / nums.len() as f64),
        AggregateFn::Last => (*values.last()?).clone(),
        AggregateFn::Min => pick(values, &nums, |a, b| a < b),
        AggregateFn::Max => pick(values, &nums, |a, b| a > b),
    })
}

fn pick(values: &[&Value], nums: &[f64], better: impl Fn(f64, f64) -> bool) -> Value {
    let mut best = 0;
    for i in 1..nums.len() {
        if better(nums[i], nums[best]) {
            best = i;
        }
    }
    values[best].clone()
}
