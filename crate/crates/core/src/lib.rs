//! Federated context brokering for IoT data.
//!
//! The crate provides the services of a context-management data plane:
//!
//! - [`broker`]: latest-value store with throttled subscriptions,
//! - [`discovery`]: registry of which provider serves which context,
//! - [`federation`]: transparent routing across brokers in a hierarchy,
//! - [`agent`]: southbound device ingestion with model harmonization,
//! - [`history`]: metadata-preserving time series storage,
//! - [`orchestrator`]: discovery-driven placement and binding of analytics tasks,
//! - [`harness`]: a deterministic simulated network and scenario runner.
//!
//! Every service implements [`net::Service`] and is equally at home behind
//! an HTTP listener or inside the simulated network.

pub mod agent;
pub mod broker;
pub mod client;
pub mod datamodel;
pub mod discovery;
pub mod federation;
pub mod harness;
pub mod history;
pub mod model;
pub mod net;
pub mod orchestrator;

pub use model::{ContextAttribute, ContextElement, EntityRef, Metadatum, Scope};
