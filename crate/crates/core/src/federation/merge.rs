//! Deterministic merge of per-provider query results.

use std::collections::BTreeMap;

use crate::model::{ContextAttribute, ContextElement, EntityRef};

/// Conflict resolution between providers reporting the same attribute:
/// the latest `timestamp` metadatum wins (missing ranks as 0), ties go to
/// the lexicographically smallest providing endpoint, then to the earlier
/// candidate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MergePolicy;

impl MergePolicy {
    /// Whether `(ts, endpoint)` beats the current best `(best_ts, best_endpoint)`.
    pub fn beats(&self, ts: u64, endpoint: &str, best_ts: u64, best_endpoint: &str) -> bool {
        ts > best_ts || (ts == best_ts && endpoint < best_endpoint)
    }
}

/// One element per `(type, id)`, ordered by `(type, id)`; per attribute the
/// winning candidate under `policy`. Attribute order follows first
/// appearance, scanning providers in endpoint order.
pub fn merge_elements(groups: &[(String, Vec<ContextElement>)], policy: MergePolicy) -> Vec<ContextElement> {
    let mut order: Vec<&(String, Vec<ContextElement>)> = groups.iter().collect();
    order.sort_by(|a, b| a.0.cmp(&b.0));

    struct Slot<'a> {
        entity: &'a EntityRef,
        names: Vec<&'a str>,
        best: BTreeMap<&'a str, (u64, &'a str, &'a ContextAttribute)>,
    }
    let mut slots: BTreeMap<(&str, &str), Slot> = BTreeMap::new();
    for (endpoint, elements) in order {
        for e in elements {
            let slot = slots.entry((e.entity_type(), e.id())).or_insert_with(|| Slot {
                entity: e.entity(),
                names: Vec::new(),
                best: BTreeMap::new(),
            });
            for a in e.attributes() {
                let ts = a.timestamp().unwrap_or(0);
                match slot.best.get(a.name()) {
                    None => {
                        slot.names.push(a.name());
                        slot.best.insert(a.name(), (ts, endpoint.as_str(), a));
                    }
                    Some(&(bts, bep, _)) if policy.beats(ts, endpoint, bts, bep) => {
                        slot.best.insert(a.name(), (ts, endpoint.as_str(), a));
                    }
                    Some(_) => {}
                }
            }
        }
    }
    slots
        .into_values()
        .map(|s| {
            let attrs = s.names.iter().map(|n| s.best[n].2.clone()).collect();
            ContextElement::new(s.entity.clone(), attrs).expect("one candidate per attribute name")
        })
        .collect()
}
