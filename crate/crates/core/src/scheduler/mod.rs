//! Pseudo-instruction schedules, access traces and data lifetimes.

pub mod dims;
pub mod schedule;

pub use dims::{
    layer_dims_from_spec, op_workload, ConvDims, LayerDims, MacConvention, Operator, Time,
};
pub use schedule::{
    backward_schedule, emit_backward_schedule, emit_forward_schedule, forward_schedule,
    training_step_schedule, BackbonePlacement, Buffer, Instruction, NetworkShape, Opcode, Pass,
    Schedule, Storage, Topology,
};
pub mod replay;
pub mod trace;

pub use replay::replay;
pub use trace::{
    closed_form_lifetimes, formula_lifetimes, live_ranges, measure_lifetimes, measured_lifetimes,
    peak_memory, peak_transient_elements, simulate_trace, Access, AccessEvent, AccessTrace,
    FormulaLifetimes, FormulaTerms, LatencyModel, LayerLifetimes, LifetimeReport, LiveRange,
};
