//! On-chip memory model: retention and refresh, bank allocation, read faults,
//! utilization and access energy.

pub mod accounting;
pub mod banks;
pub mod faults;
pub mod retention;

pub use accounting::{
    memory_energy, refresh_ledger, refresh_ledger_with_minimum, spill_latency_us, utilization,
    MemoryEnergy, RefreshLedger,
};
pub use banks::{
    allocate, stored_buffers, Allocation, BankConfig, BankKind, MemoryConfig, Placement,
    StoredBuffer, EDRAM_LEAKAGE_RATIO,
};
pub use faults::{read_with_faults, FaultInjector, FaultModel};
pub use retention::{refreshes_required, RetentionModel};
