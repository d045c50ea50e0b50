//! Refresh ledger, eDRAM utilization and memory energy for an allocation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::banks::{Allocation, BankKind, MemoryConfig, StoredBuffer};
use super::retention::refreshes_required;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefreshLedger {
    pub retention_us: f64,
    /// Most refreshes any version of the buffer needed.
    pub per_buffer: BTreeMap<String, u64>,
    /// Longest lifetime per buffer, µs.
    pub lifetimes_us: BTreeMap<String, f64>,
    /// Word refreshes summed over all versions.
    pub total_events: u64,
    pub energy: f64,
}

impl RefreshLedger {
    pub fn max_refreshes(&self) -> u64 {
        self.per_buffer.values().copied().max().unwrap_or(0)
    }

    /// Buffers whose data outlives retention.
    pub fn expiring(&self) -> impl Iterator<Item = &str> {
        self.per_buffer
            .iter()
            .filter(|(_, &c)| c > 0)
            .map(|(k, _)| k.as_str())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn check(requests: &[StoredBuffer], allocation: &Allocation) -> Result<()> {
    if allocation
        .placements
        .iter()
        .any(|p| p.request >= requests.len())
    {
        return Err(Error::Config(
            "allocation does not belong to these buffers".into(),
        ));
    }
    Ok(())
}

/// Refreshes for every buffer version held in eDRAM.
pub fn refresh_ledger(
    requests: &[StoredBuffer],
    allocation: &Allocation,
    memory: &MemoryConfig,
    retention_us: f64,
) -> Result<RefreshLedger> {
    refresh_ledger_with_minimum(requests, allocation, memory, retention_us, 0)
}

/// As [`refresh_ledger`], but every eDRAM version is refreshed at least
/// `minimum` times.
pub fn refresh_ledger_with_minimum(
    requests: &[StoredBuffer],
    allocation: &Allocation,
    memory: &MemoryConfig,
    retention_us: f64,
    minimum: u64,
) -> Result<RefreshLedger> {
    check(requests, allocation)?;
    let mut ledger = RefreshLedger {
        retention_us,
        per_buffer: BTreeMap::new(),
        lifetimes_us: BTreeMap::new(),
        total_events: 0,
        energy: 0.0,
    };
    for p in allocation
        .placements
        .iter()
        .filter(|p| p.kind == BankKind::Edram)
    {
        let r = &requests[p.request];
        let lifetime = r.lifetime_us().max(0.0);
        let count = refreshes_required(lifetime, retention_us)?.max(minimum);
        let entry = ledger.per_buffer.entry(r.id.clone()).or_insert(0);
        *entry = (*entry).max(count);
        let life = ledger.lifetimes_us.entry(r.id.clone()).or_insert(0.0);
        *life = life.max(lifetime);
        let events = count * memory.transient_bank.words_for(p.bytes);
        ledger.total_events += events;
        ledger.energy += events as f64 * memory.transient_bank.refresh_energy_per_word();
    }
    Ok(ledger)
}

/// Time-averaged fraction of the transient pool holding placed data over `[0, total_us]`.
pub fn utilization(
    requests: &[StoredBuffer],
    allocation: &Allocation,
    memory: &MemoryConfig,
    total_us: f64,
) -> Result<f64> {
    check(requests, allocation)?;
    if !(total_us > 0.0 && total_us.is_finite()) {
        return Err(Error::Config(format!(
            "total time must be positive, got {total_us}"
        )));
    }
    let byte_us: f64 = allocation
        .placements
        .iter()
        .filter(|p| p.kind == memory.transient_bank.kind)
        .map(|p| {
            let r = &requests[p.request];
            let held = (r.released_us.min(total_us) - r.claimed_us.max(0.0)).max(0.0);
            p.bytes as f64 * held
        })
        .sum();
    Ok(byte_us / (memory.transient_bytes() as f64 * total_us))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MemoryEnergy {
    pub sram_access: f64,
    pub edram_access: f64,
    pub dram_access: f64,
    pub refresh: f64,
    pub leakage: f64,
}

impl MemoryEnergy {
    pub fn dynamic(&self) -> f64 {
        self.sram_access + self.edram_access + self.dram_access + self.refresh
    }

    pub fn total(&self) -> f64 {
        self.dynamic() + self.leakage
    }

    pub fn add(&mut self, o: &MemoryEnergy) {
        self.sram_access += o.sram_access;
        self.edram_access += o.edram_access;
        self.dram_access += o.dram_access;
        self.refresh += o.refresh;
        self.leakage += o.leakage;
    }
}

/// Access energy of every placed version (one write plus its reads), the
/// ledger's refresh energy, and leakage of all on-chip banks for `total_us`.
pub fn memory_energy(
    requests: &[StoredBuffer],
    allocation: &Allocation,
    ledger: &RefreshLedger,
    memory: &MemoryConfig,
    total_us: f64,
) -> Result<MemoryEnergy> {
    check(requests, allocation)?;
    if !(total_us >= 0.0 && total_us.is_finite()) {
        return Err(Error::Config(format!(
            "total time must be non-negative, got {total_us}"
        )));
    }
    let mut e = MemoryEnergy::default();
    for p in &allocation.placements {
        let r = &requests[p.request];
        let bank = memory.bank(p.kind);
        let words = bank.words_for(p.bytes) as f64;
        let cost = words * (bank.write_energy + r.reads as f64 * bank.read_energy);
        match p.kind {
            BankKind::Sram => e.sram_access += cost,
            BankKind::Edram => e.edram_access += cost,
            BankKind::DramOffchip => e.dram_access += cost,
        }
    }
    e.refresh = ledger.energy;
    e.leakage = total_us
        * (memory.static_bytes() as f64 * memory.static_bank.leakage_per_byte_us
            + memory.transient_bytes() as f64 * memory.transient_bank.leakage_per_byte_us);
    Ok(e)
}

/// Extra modeled time from off-chip accesses of spilled buffers.
pub fn spill_latency_us(
    requests: &[StoredBuffer],
    allocation: &Allocation,
    memory: &MemoryConfig,
) -> Result<f64> {
    check(requests, allocation)?;
    Ok(allocation
        .placements
        .iter()
        .filter(|p| p.kind == BankKind::DramOffchip)
        .map(|p| {
            let accesses = 1 + requests[p.request].reads;
            memory.offchip.words_for(p.bytes) as f64
                * accesses as f64
                * memory.offchip.access_latency_us
        })
        .sum())
}
