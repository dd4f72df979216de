//! Deterministic multi-node runs: simulated network, scenario scripts and
//! the scenario runner.

pub mod runner;
pub mod script;
pub mod simnet;

pub use runner::{run_scenario, same_value, Outcome, ScenarioReport, NUMERIC_TOLERANCE};
pub use script::{Action, ElementMatch, Located, NodeKind, NodeSpec, Script, ScriptError, Step};
pub use simnet::{Recorder, SimNet, CLIENT};
