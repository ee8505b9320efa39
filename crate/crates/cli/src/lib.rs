//! Scenario documents and the commands behind the `pathwig` binary.

pub mod document;
pub mod error;
pub mod report;
pub mod run;

pub use document::{parse_scenario, ScenarioDocument};
pub use error::CliError;
pub use report::RunReport;
