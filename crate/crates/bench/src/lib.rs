//! Desk-scale downlink traffic benchmark: drives publishers and
//! subscribers against an in-process broker on a virtual clock and
//! compares the bytes sent to subscribers with the analytical model.
pub mod model;
pub mod report;
pub mod run;
pub mod scenario;

pub use model::{predict_bytes, Prediction, TrafficModel};
pub use report::{emit_report, ReportRow};
pub use run::{run_scenario, BenchError, Measurement};
pub use scenario::{Mode, PayloadKind, ScenarioConfig};
