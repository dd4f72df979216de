//! Book-keeping for subscriptions held at a changing set of providers.
//!
//! Providers come and go through availability notifications. Each
//! providing endpoint is bound at most once, no matter how many
//! registrations point at it; it is released when its last registration
//! disappears. Pinned endpoints (a node's own broker) are never released.

use std::collections::{BTreeMap, BTreeSet};

use crate::discovery::Registration;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BindState {
    Unbound,
    /// A subscribe call is in flight.
    Pending,
    Bound(String),
}

#[derive(Debug, Clone)]
struct Provider {
    state: BindState,
    registrations: BTreeSet<String>,
    pinned: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ProviderSet {
    providers: BTreeMap<String, Provider>,
    owner: BTreeMap<String, String>,
}

impl ProviderSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Track an endpoint that is never released by availability changes.
    pub fn pin(&mut self, endpoint: &str) {
        self.entry(endpoint).pinned = true;
    }

    fn entry(&mut self, endpoint: &str) -> &mut Provider {
        self.providers.entry(endpoint.to_string()).or_insert_with(|| Provider {
            state: BindState::Unbound,
            registrations: BTreeSet::new(),
            pinned: false,
        })
    }

    /// Record registrations and claim every endpoint that still needs a
    /// subscription. Claimed endpoints move to `Pending`.
    pub fn observe(&mut self, regs: &[Registration], exclude: &[&str]) -> Vec<String> {
        for r in regs {
            if exclude.contains(&r.providing_endpoint.as_str()) {
                continue;
            }
            if let Some(prev) = self.owner.get(&r.id).cloned() {
                if prev != r.providing_endpoint {
                    self.forget(&r.id);
                }
            }
            self.owner.insert(r.id.clone(), r.providing_endpoint.clone());
            self.entry(&r.providing_endpoint).registrations.insert(r.id.clone());
        }
        self.claim_unbound()
    }

    /// Claim every known endpoint without a subscription.
    pub fn claim_unbound(&mut self) -> Vec<String> {
        let mut claimed = Vec::new();
        for (ep, p) in self.providers.iter_mut() {
            if p.state == BindState::Unbound {
                p.state = BindState::Pending;
                claimed.push(ep.clone());
            }
        }
        claimed
    }

    /// Outcome of a claimed subscribe call. A provider released while the
    /// call was in flight is reported back so the caller can cancel it.
    pub fn bind(&mut self, endpoint: &str, upstream: Option<String>) -> Option<String> {
        match (self.providers.get_mut(endpoint), upstream) {
            (Some(p), Some(id)) => {
                p.state = BindState::Bound(id);
                None
            }
            (Some(p), None) => {
                p.state = BindState::Unbound;
                None
            }
            (None, id) => id,
        }
    }

    fn forget(&mut self, reg_id: &str) -> Option<(String, BindState)> {
        let ep = self.owner.remove(reg_id)?;
        let p = self.providers.get_mut(&ep)?;
        p.registrations.remove(reg_id);
        if p.registrations.is_empty() && !p.pinned {
            let p = self.providers.remove(&ep)?;
            return Some((ep, p.state));
        }
        None
    }

    /// Drop registrations; returns released endpoints with their upstream
    /// subscription id, if bound.
    pub fn remove_registrations(&mut self, ids: &[String]) -> Vec<(String, Option<String>)> {
        ids.iter()
            .filter_map(|id| self.forget(id))
            .map(|(ep, st)| match st {
                BindState::Bound(sub) => (ep, Some(sub)),
                _ => (ep, None),
            })
            .collect()
    }

    /// Every endpoint with its upstream subscription id, if bound.
    pub fn bound(&self) -> Vec<(String, String)> {
        self.providers
            .iter()
            .filter_map(|(ep, p)| match &p.state {
                BindState::Bound(id) => Some((ep.clone(), id.clone())),
                _ => None,
            })
            .collect()
    }

    pub fn endpoints(&self) -> impl Iterator<Item = &str> {
        self.providers.keys().map(String::as_str)
    }

    pub fn state(&self, endpoint: &str) -> Option<&BindState> {
        self.providers.get(endpoint).map(|p| &p.state)
    }
}
