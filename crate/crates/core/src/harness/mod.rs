//! Experiment orchestration: configuration, step cost model, runs and reports.

pub mod config;
pub mod cost;
pub mod report;
pub mod run;

pub use config::{
    Experiment, ExperimentConfig, HardwareProfile, LatencyMode, RefreshPolicy, SweepAxis,
    DESK_MEMORY_DIVISOR,
};
pub use cost::{analyze_step, compute_energy, latency_model, step_cost, StepAnalysis, StepCost};
pub use report::{finite_or_inf, to_csv, write_report, CsvTable, TtaEta};
pub use run::{
    build_model, run_compare, run_lifetime, run_sweep, run_train, CompareCell, ComparisonReport,
    LayerRow, LifetimeRun, SweepReport, SweepRow, TrainRun,
};
