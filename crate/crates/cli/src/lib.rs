//! Scenario-driven front end for `tweezer-core`.
//!
//! A scenario is one JSON file describing the device, optics, trap layouts
//! and the runs to perform. [`run_scenario`] executes the requested stages in
//! dependency order and writes every artifact plus a `report.json` holding
//! all metrics, the status of each stage and a SHA-256 manifest of the
//! written files. Reports depend only on the scenario and its seed.

pub mod error;
pub mod run;
pub mod scenario;

pub use error::{ErrorKind, ScenarioError, StageError};
pub use run::{run_scenario, Report, RunOptions, RunOutcome, StageStatus, REPORT_FILE};
pub use scenario::{Scenario, Stage};
