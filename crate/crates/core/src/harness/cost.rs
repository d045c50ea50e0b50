//! Modeled time and energy of one training step on a hardware profile.

use serde::{Deserialize, Serialize};

use super::config::{HardwareProfile, LatencyMode, RefreshPolicy};
use crate::duplex::model::{DuDnnSpec, Variant};
use crate::error::Result;
use crate::memory::{
    allocate, memory_energy, refresh_ledger_with_minimum, spill_latency_us, stored_buffers,
    utilization, Allocation, MemoryEnergy, RefreshLedger, StoredBuffer,
};
use crate::scheduler::{
    live_ranges, training_step_schedule, LatencyModel, MacConvention, NetworkShape, Schedule,
    Storage, Time,
};
use crate::systolic::{conv_job, expected_stats, job_energy, MatmulJob};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepCost {
    pub variant: Variant,
    pub profile: String,
    pub batch: usize,
    pub cycles: f64,
    pub compute_us: f64,
    pub spill_us: f64,
    pub step_us: f64,
    /// PE energy already converted to memory-energy units.
    pub pe_energy: f64,
    pub memory: MemoryEnergy,
    pub step_energy: f64,
    /// Longest write-to-last-read gap of any transient buffer, µs.
    pub t_data_us: f64,
    pub retention_us: f64,
    pub peak_transient_bytes: u64,
    pub spilled_bytes: u64,
    pub utilization: f64,
    pub max_refreshes: u64,
    pub refresh_events: u64,
    /// Transient buffers in eDRAM that outlive retention.
    pub expiring_buffers: Vec<String>,
}

/// Everything behind a [`StepCost`], for reports that need the detail.
#[derive(Debug, Clone)]
pub struct StepAnalysis {
    pub cost: StepCost,
    pub schedule: Schedule,
    pub buffers: Vec<StoredBuffer>,
    pub allocation: Allocation,
    /// Refreshes actually issued under the profile's policy.
    pub ledger: RefreshLedger,
}

fn as_f64(t: &Time) -> f64 {
    *t.numer() as f64 / *t.denom() as f64
}

pub fn latency_model(profile: &HardwareProfile, convention: MacConvention) -> LatencyModel {
    match profile.latency {
        LatencyMode::Analytical => LatencyModel::Analytical {
            macs_per_unit: profile.array.macs_per_cycle(),
            convention,
        },
        LatencyMode::Detailed => LatencyModel::Detailed {
            array: profile.array,
        },
    }
}

/// PE energy of every matrix product in `schedule`, in memory-energy units.
pub fn compute_energy(schedule: &Schedule, profile: &HardwareProfile) -> Result<f64> {
    let mut total = 0.0;
    for ins in &schedule.instructions {
        let Some(op) = ins.opcode.operator() else {
            continue;
        };
        let dims = &schedule.shape.layers[ins.layer.max(1) - 1];
        let Some(conv) = dims.conv(op) else { continue };
        let job = MatmulJob {
            zero_group_fraction: profile.zero_group_fraction,
            zero_mantissa_fraction: profile.zero_mantissa_fraction,
            ..conv_job(conv, dims.batch, ins.opcode, profile.array.group_size)?
        };
        total += job_energy(&expected_stats(&profile.array, &job)?, &profile.energy);
    }
    Ok(total * profile.pe_energy_scale)
}

/// Cost one training step of `spec` at `batch` on `profile`. Instruction
/// latencies follow `convention`; PE energy always counts every MAC.
pub fn analyze_step(
    spec: &DuDnnSpec,
    profile: &HardwareProfile,
    batch: usize,
    convention: MacConvention,
) -> Result<StepAnalysis> {
    profile.validate()?;
    let shape = NetworkShape::from_spec(spec, batch);
    let schedule = training_step_schedule(&shape)?;
    let latency = latency_model(profile, convention);
    let ranges = live_ranges(&schedule, &latency)?;
    let cycles = ranges
        .iter()
        .map(|r| as_f64(&r.released))
        .fold(0.0, f64::max);
    let us_per_cycle = 1e6 / profile.array.clock_hz;
    let buffers = stored_buffers(&ranges, profile.bytes_per_element, us_per_cycle, 0.0);
    let allocation = allocate(&buffers, &profile.memory)?;
    let retention_us = profile.retention.retention_at(profile.temperature_c)?;

    let required =
        refresh_ledger_with_minimum(&buffers, &allocation, &profile.memory, retention_us, 0)?;
    let expiring_buffers: Vec<String> = required.expiring().map(String::from).collect();
    let ledger = match profile.refresh {
        RefreshPolicy::Required => required,
        RefreshPolicy::AtLeast(n) => {
            refresh_ledger_with_minimum(&buffers, &allocation, &profile.memory, retention_us, n)?
        }
        RefreshPolicy::Disabled => RefreshLedger {
            per_buffer: required.per_buffer.keys().map(|k| (k.clone(), 0)).collect(),
            total_events: 0,
            energy: 0.0,
            ..required
        },
    };

    let compute_us = cycles * us_per_cycle;
    let spill_us = spill_latency_us(&buffers, &allocation, &profile.memory)?;
    let step_us = compute_us + spill_us;
    let memory = memory_energy(&buffers, &allocation, &ledger, &profile.memory, step_us)?;
    let pe_energy = compute_energy(&schedule, profile)?;
    let t_data_us = buffers
        .iter()
        .filter(|b| b.storage == Storage::Transient)
        .map(|b| b.lifetime_us())
        .fold(0.0, f64::max);
    let util = if step_us > 0.0 {
        utilization(&buffers, &allocation, &profile.memory, step_us)?
    } else {
        0.0
    };
    let peak_transient_bytes = crate::scheduler::peak_memory(&schedule, profile.bytes_per_element)?;

    let cost = StepCost {
        variant: spec.variant(),
        profile: profile.name.clone(),
        batch,
        cycles,
        compute_us,
        spill_us,
        step_us,
        pe_energy,
        step_energy: pe_energy + memory.total(),
        memory,
        t_data_us,
        retention_us,
        peak_transient_bytes,
        spilled_bytes: allocation.spilled_bytes,
        utilization: util,
        max_refreshes: ledger.max_refreshes(),
        refresh_events: ledger.total_events,
        expiring_buffers,
    };
    Ok(StepAnalysis {
        cost,
        schedule,
        buffers,
        allocation,
        ledger,
    })
}

/// [`analyze_step`] with the profile's own MAC convention.
pub fn step_cost(spec: &DuDnnSpec, profile: &HardwareProfile, batch: usize) -> Result<StepCost> {
    Ok(analyze_step(spec, profile, batch, profile.mac_convention)?.cost)
}
