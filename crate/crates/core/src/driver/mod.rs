//! Problem assembly and the optimization loops.

pub mod audit;
pub mod compliance;
pub mod diversity;
pub mod model;
pub mod schedule;
pub mod shape_match;
pub mod state;
pub mod verify;

pub use compliance::{run_compliance, ComplianceOptions, ComplianceRun, HistoryRow, StopReason};
pub use diversity::diversity_penalty;
pub use model::{MicroField, MicroModel};
pub use schedule::Schedules;
pub use state::{variable_count, DesignState};
