//! Scenario definition, input profiles, the event engine and result export.

pub mod engine;
pub mod profile;
pub mod result;
pub mod scenario;

pub use engine::{
    consistent_snapshot, run_simulation, run_simulation_detailed, EngineOptions, RunOutput,
    SimError, TraceRow,
};
pub use profile::{Interpolation, Profile, ProfileError, ProfileUnit, SyntheticSpec};
pub use result::{export_csv, CsvTable, ResultError, ResultRow, RunSummary, TimeSeriesResult};
pub use scenario::{load_scenario, resolve_scenario, Scenario, ScenarioError, ScenarioSpec};
