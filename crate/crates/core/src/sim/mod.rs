//! Closed-loop experiments: configuration, the lap driver, metrics and
//! file output.

pub mod config;
pub mod export;
pub mod metrics;
pub mod run;

pub use config::SimConfig;
pub use export::{
    export, export_sweep, read_trace_csv, write_trace_csv, MetricsReport, TRACE_COLUMNS,
};
pub use metrics::{compute_metrics, tracking_cost, LapMetrics, LapTiming};
pub use run::{
    friction_sweep, initial_plant_state, run_closed_loop, SimResult, SweepScenario, TraceRecord,
};
