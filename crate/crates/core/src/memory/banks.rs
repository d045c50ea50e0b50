//! Bank inventory and placement of buffers into SRAM, eDRAM and off-chip DRAM.
//!
//! Static data (weights, pooled injections, weight gradients) goes to SRAM.
//! Transient activations and gradients share one address space made of the
//! transient banks back to back; a buffer takes the lowest offset that no
//! buffer live at the same time occupies. What does not fit spills to DRAM.

use serde::{Deserialize, Serialize};

use crate::bfp::BfpConfig;
use crate::error::{Error, Result};
use crate::scheduler::{LiveRange, Storage, Time};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankKind {
    Edram,
    Sram,
    DramOffchip,
}

/// One bank type. Energies are per word in relative units; leakage is per
/// byte of capacity per µs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankConfig {
    pub kind: BankKind,
    pub capacity_bytes: u64,
    pub word_bits: u32,
    pub words: u32,
    pub read_energy: f64,
    pub write_energy: f64,
    pub leakage_per_byte_us: f64,
    /// Extra µs per word accessed, charged to modeled time.
    pub access_latency_us: f64,
}

/// SRAM leakage over eDRAM leakage.
pub const EDRAM_LEAKAGE_RATIO: f64 = 3.5;
const SRAM_LEAKAGE_PER_BYTE_US: f64 = 1e-3;

impl BankConfig {
    pub fn edram() -> Self {
        Self {
            kind: BankKind::Edram,
            capacity_bytes: 48 * 1024,
            word_bits: BfpConfig::default().encoded_size_bits() as u32,
            words: 1024,
            read_energy: 0.7,
            write_energy: 0.7,
            leakage_per_byte_us: SRAM_LEAKAGE_PER_BYTE_US / EDRAM_LEAKAGE_RATIO,
            access_latency_us: 0.0,
        }
    }

    pub fn sram() -> Self {
        Self {
            kind: BankKind::Sram,
            capacity_bytes: 8 * 1024,
            word_bits: BfpConfig::default().encoded_size_bits() as u32,
            words: 1024,
            read_energy: 1.0,
            write_energy: 1.0,
            leakage_per_byte_us: SRAM_LEAKAGE_PER_BYTE_US,
            access_latency_us: 0.0,
        }
    }

    pub fn dram() -> Self {
        Self {
            kind: BankKind::DramOffchip,
            capacity_bytes: 1 << 32,
            word_bits: 64,
            words: 1 << 26,
            read_energy: 100.0,
            write_energy: 100.0,
            leakage_per_byte_us: 0.0,
            access_latency_us: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.capacity_bytes == 0 || self.word_bits == 0 || self.words == 0 {
            return Err(Error::Config(format!(
                "{:?} bank needs positive capacity and geometry",
                self.kind
            )));
        }
        let energies = [
            self.read_energy,
            self.write_energy,
            self.leakage_per_byte_us,
            self.access_latency_us,
        ];
        if energies.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
            return Err(Error::Config(format!(
                "{:?} bank costs must be finite and non-negative",
                self.kind
            )));
        }
        Ok(())
    }

    /// A refresh reads a word and writes it back.
    pub fn refresh_energy_per_word(&self) -> f64 {
        self.read_energy + self.write_energy
    }

    pub fn words_for(&self, bytes: u64) -> u64 {
        (bytes * 8).div_ceil(self.word_bits as u64)
    }
}

/// On-chip pools plus off-chip overflow. Transient data lives in the
/// transient pool (eDRAM on the hybrid design, SRAM on an all-SRAM one).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryConfig {
    pub transient_bank: BankConfig,
    pub transient_banks: usize,
    pub static_bank: BankConfig,
    pub static_banks: usize,
    pub offchip: BankConfig,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            transient_bank: BankConfig::edram(),
            transient_banks: 12,
            static_bank: BankConfig::sram(),
            static_banks: 6,
            offchip: BankConfig::dram(),
        }
    }
}

impl MemoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.transient_bank.kind == BankKind::DramOffchip {
            return Err(Error::Config("transient pool must be on chip".into()));
        }
        if self.static_bank.kind != BankKind::Sram {
            return Err(Error::Config("static pool must be SRAM".into()));
        }
        if self.offchip.kind != BankKind::DramOffchip {
            return Err(Error::Config("overflow pool must be off-chip DRAM".into()));
        }
        for b in [&self.transient_bank, &self.static_bank, &self.offchip] {
            b.validate()?;
        }
        let group_bits = BfpConfig::default().encoded_size_bits() as u32;
        if self.transient_bank.kind == BankKind::Edram
            && self.transient_bank.word_bits != group_bits
        {
            return Err(Error::Config(format!(
                "eDRAM words must hold one {group_bits}-bit group, got {} bits",
                self.transient_bank.word_bits
            )));
        }
        if self.transient_banks == 0 || self.static_banks == 0 {
            return Err(Error::Config(
                "need at least one transient and one static bank".into(),
            ));
        }
        Ok(())
    }

    pub fn transient_bytes(&self) -> u64 {
        self.transient_bank.capacity_bytes * self.transient_banks as u64
    }

    pub fn static_bytes(&self) -> u64 {
        self.static_bank.capacity_bytes * self.static_banks as u64
    }

    pub fn bank(&self, kind: BankKind) -> &BankConfig {
        match kind {
            BankKind::DramOffchip => &self.offchip,
            k if k == self.transient_bank.kind => &self.transient_bank,
            _ => &self.static_bank,
        }
    }
}

/// One buffer version to place, timed in µs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredBuffer {
    pub id: String,
    pub bytes: u64,
    pub storage: Storage,
    pub claimed_us: f64,
    pub written_us: f64,
    pub last_read_us: f64,
    pub released_us: f64,
    pub reads: u64,
    /// Earlier version whose storage this one takes over in place.
    pub inherits: Option<usize>,
}

impl StoredBuffer {
    /// A buffer written at 0, read once at `end_us` and held throughout.
    pub fn resident(id: &str, bytes: u64, storage: Storage, end_us: f64) -> Self {
        Self {
            id: id.to_string(),
            bytes,
            storage,
            claimed_us: 0.0,
            written_us: 0.0,
            last_read_us: end_us,
            released_us: end_us,
            reads: 1,
            inherits: None,
        }
    }

    pub fn lifetime_us(&self) -> f64 {
        self.last_read_us - self.written_us
    }

    fn overlaps(&self, other: &StoredBuffer) -> bool {
        self.claimed_us < other.released_us && other.claimed_us < self.released_us
    }
}

/// Convert schedule live ranges, offset by `start_us`, into placement requests.
pub fn stored_buffers(
    ranges: &[LiveRange],
    bytes_per_element: f64,
    us_per_unit: f64,
    start_us: f64,
) -> Vec<StoredBuffer> {
    let us = |t: &Time| start_us + (*t.numer() as f64 / *t.denom() as f64) * us_per_unit;
    let mut inherits = vec![None; ranges.len()];
    for (i, r) in ranges.iter().enumerate() {
        if let Some(j) = r.handed_to {
            inherits[j] = Some(i);
        }
    }
    ranges
        .iter()
        .zip(inherits)
        .map(|(r, inherits)| StoredBuffer {
            id: r.buffer.clone(),
            bytes: (r.elements as f64 * bytes_per_element).ceil() as u64,
            storage: r.storage,
            claimed_us: us(&r.claimed),
            written_us: us(&r.written),
            last_read_us: us(&r.last_read),
            released_us: us(&r.released),
            reads: r.reads as u64,
            inherits,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub id: String,
    /// Index into the request list.
    pub request: usize,
    pub kind: BankKind,
    /// Byte offset in that kind's address space.
    pub offset: u64,
    pub bytes: u64,
    /// Banks touched, first to last.
    pub banks: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub placements: Vec<Placement>,
    pub static_bytes: u64,
    /// Most bytes of the on-chip transient pool in use at once.
    pub transient_peak_bytes: u64,
    pub spilled_bytes: u64,
    pub spilled_buffers: usize,
}

impl Allocation {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn bank_span(offset: u64, bytes: u64, bank_bytes: u64) -> (usize, usize) {
    let last = offset + bytes.max(1) - 1;
    ((offset / bank_bytes) as usize, (last / bank_bytes) as usize)
}

/// Place `requests` into the banks of `memory`. Static data that does not fit
/// in SRAM is a configuration error; transient overflow spills to DRAM.
pub fn allocate(requests: &[StoredBuffer], memory: &MemoryConfig) -> Result<Allocation> {
    memory.validate()?;
    for r in requests {
        if !(r.claimed_us <= r.written_us
            && r.written_us <= r.released_us
            && r.claimed_us.is_finite()
            && r.released_us.is_finite())
        {
            return Err(Error::Config(format!(
                "buffer '{}' has an inconsistent live range",
                r.id
            )));
        }
    }
    let mut placements: Vec<Option<Placement>> = vec![None; requests.len()];

    // Static data is resident for the whole run.
    let mut sram_top = 0u64;
    for (i, r) in requests
        .iter()
        .enumerate()
        .filter(|(_, r)| r.storage == Storage::Static)
    {
        placements[i] = Some(Placement {
            id: r.id.clone(),
            request: i,
            kind: BankKind::Sram,
            offset: sram_top,
            bytes: r.bytes,
            banks: bank_span(sram_top, r.bytes, memory.static_bank.capacity_bytes),
        });
        sram_top += r.bytes;
    }
    if sram_top > memory.static_bytes() {
        return Err(Error::Config(format!(
            "static data needs {sram_top} bytes but SRAM holds {}",
            memory.static_bytes()
        )));
    }

    let mut order: Vec<usize> = (0..requests.len())
        .filter(|&i| requests[i].storage == Storage::Transient)
        .collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (&requests[a], &requests[b]);
        ra.claimed_us
            .total_cmp(&rb.claimed_us)
            .then(rb.bytes.cmp(&ra.bytes))
            .then(a.cmp(&b))
    });
    let capacity = memory.transient_bytes();
    let pool = memory.transient_bank.kind;
    let mut in_edram: Vec<usize> = Vec::new();
    let mut dram_top = 0u64;
    let (mut spilled_bytes, mut spilled_buffers) = (0u64, 0usize);
    for i in order {
        let r = &requests[i];
        let inherited = r
            .inherits
            .and_then(|j| placements[j].as_ref())
            .filter(|p| p.kind == pool && p.bytes >= r.bytes);
        let offset = match inherited {
            Some(p) => Some(p.offset),
            None => {
                let mut busy: Vec<(u64, u64)> = in_edram
                    .iter()
                    .filter(|&&j| requests[j].overlaps(r))
                    .filter_map(|&j| {
                        placements[j]
                            .as_ref()
                            .map(|p| (p.offset, p.offset + p.bytes))
                    })
                    .collect();
                busy.sort_unstable();
                let mut cursor = 0u64;
                for (lo, hi) in busy {
                    if lo >= cursor + r.bytes {
                        break;
                    }
                    cursor = cursor.max(hi);
                }
                (cursor + r.bytes <= capacity).then_some(cursor)
            }
        };
        placements[i] = Some(match offset {
            Some(offset) => {
                in_edram.push(i);
                Placement {
                    id: r.id.clone(),
                    request: i,
                    kind: pool,
                    offset,
                    bytes: r.bytes,
                    banks: bank_span(offset, r.bytes, memory.transient_bank.capacity_bytes),
                }
            }
            None => {
                spilled_bytes += r.bytes;
                spilled_buffers += 1;
                let p = Placement {
                    id: r.id.clone(),
                    request: i,
                    kind: BankKind::DramOffchip,
                    offset: dram_top,
                    bytes: r.bytes,
                    banks: (0, 0),
                };
                dram_top += r.bytes;
                if dram_top > memory.offchip.capacity_bytes {
                    return Err(Error::Config("spilled data exceeds off-chip DRAM".into()));
                }
                p
            }
        });
    }

    let placements: Vec<Placement> = placements.into_iter().flatten().collect();
    let transient_peak_bytes = peak_bytes(requests, &placements, pool);
    Ok(Allocation {
        placements,
        static_bytes: sram_top,
        transient_peak_bytes,
        spilled_bytes,
        spilled_buffers,
    })
}

/// Most bytes of `kind` occupied at one instant.
fn peak_bytes(requests: &[StoredBuffer], placements: &[Placement], kind: BankKind) -> u64 {
    let mut edges: Vec<(f64, i64)> = Vec::new();
    for p in placements.iter().filter(|p| p.kind == kind) {
        let r = &requests[p.request];
        if r.released_us > r.claimed_us {
            edges.push((r.claimed_us, p.bytes as i64));
            edges.push((r.released_us, -(p.bytes as i64)));
        }
    }
    // Releases before claims at the same instant.
    edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let (mut live, mut peak) = (0i64, 0i64);
    for (_, d) in edges {
        live += d;
        peak = peak.max(live);
    }
    peak as u64
}
