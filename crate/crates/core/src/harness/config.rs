//! Experiment configuration. Every struct rejects unknown keys; missing
//! sections fall back to their defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::duplex::data::DataConfig;
use crate::duplex::model::{ModelConfig, Variant};
use crate::duplex::train::TrainConfig;
use crate::error::{Error, Result};
use crate::memory::{BankConfig, MemoryConfig, RetentionModel};
use crate::scheduler::MacConvention;
use crate::systolic::{ArrayConfig, EnergyConstants};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatencyMode {
    #[default]
    Analytical,
    Detailed,
}

/// How eDRAM refreshes are issued.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy", content = "count")]
pub enum RefreshPolicy {
    /// As many as each buffer's lifetime needs.
    #[default]
    Required,
    /// At least this many per buffer version.
    AtLeast(u64),
    /// None; data outliving retention reads back as noise.
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HardwareProfile {
    pub name: String,
    pub array: ArrayConfig,
    pub memory: MemoryConfig,
    pub retention: RetentionModel,
    pub energy: EnergyConstants,
    /// Memory-energy units per PE energy unit.
    pub pe_energy_scale: f64,
    pub temperature_c: f64,
    pub latency: LatencyMode,
    /// MAC counting for instruction latency. PE energy always counts every MAC.
    pub mac_convention: MacConvention,
    /// Storage per tensor element (58 bits per group of 9 by default).
    pub bytes_per_element: f64,
    pub zero_group_fraction: f64,
    pub zero_mantissa_fraction: f64,
    pub refresh: RefreshPolicy,
}

/// Transient pools of the full-size profiles divided by this give the
/// desk-scale ones: the largest power of two for which the default model's
/// reversible training step still fits in eDRAM at batch 32.
pub const DESK_MEMORY_DIVISOR: u64 = 16;

impl Default for HardwareProfile {
    fn default() -> Self {
        Self::hybrid_desk()
    }
}

impl HardwareProfile {
    /// 6×6 BFP array, twelve 48 KB eDRAM banks and six 8 KB SRAM banks.
    pub fn hybrid_full() -> Self {
        Self {
            name: "hybrid".into(),
            array: ArrayConfig::default(),
            memory: MemoryConfig::default(),
            retention: RetentionModel::default(),
            energy: EnergyConstants::default(),
            pe_energy_scale: 0.01,
            temperature_c: 100.0,
            latency: LatencyMode::Analytical,
            mac_convention: MacConvention::PerOutputChannel,
            bytes_per_element: 58.0 / 72.0,
            zero_group_fraction: 0.0,
            zero_mantissa_fraction: 0.0,
            refresh: RefreshPolicy::Required,
        }
    }

    /// 4×4 array with six 48 KB SRAM banks for transient data and two 24 KB
    /// SRAM banks for static data.
    pub fn sram_full() -> Self {
        let base = Self::hybrid_full();
        Self {
            name: "sram".into(),
            array: ArrayConfig {
                rows: 4,
                cols: 4,
                ..base.array
            },
            memory: MemoryConfig {
                transient_bank: BankConfig {
                    capacity_bytes: 48 * 1024,
                    ..BankConfig::sram()
                },
                transient_banks: 6,
                static_bank: BankConfig {
                    capacity_bytes: 24 * 1024,
                    ..BankConfig::sram()
                },
                static_banks: 2,
                offchip: BankConfig::dram(),
            },
            ..base
        }
    }

    /// Static pools keep their full size; the small model's static data
    /// fits either way.
    fn desk(full: Self) -> Self {
        let mut memory = full.memory;
        memory.transient_bank.capacity_bytes = memory
            .transient_bank
            .capacity_bytes
            .div_ceil(DESK_MEMORY_DIVISOR);
        Self {
            name: format!("{}-desk", full.name),
            memory,
            ..full
        }
    }

    pub fn hybrid_desk() -> Self {
        Self::desk(Self::hybrid_full())
    }

    pub fn sram_desk() -> Self {
        Self::desk(Self::sram_full())
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "hybrid" => Ok(Self::hybrid_full()),
            "sram" => Ok(Self::sram_full()),
            "hybrid-desk" => Ok(Self::hybrid_desk()),
            "sram-desk" => Ok(Self::sram_desk()),
            other => Err(Error::Config(format!("unknown hardware profile '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.array.validate()?;
        self.memory.validate()?;
        self.retention.validate()?;
        self.energy.validate()?;
        self.retention.retention_at(self.temperature_c)?;
        if !(self.pe_energy_scale >= 0.0 && self.pe_energy_scale.is_finite()) {
            return Err(Error::Config(
                "pe_energy_scale must be finite and non-negative".into(),
            ));
        }
        if !(self.bytes_per_element > 0.0 && self.bytes_per_element.is_finite()) {
            return Err(Error::Config("bytes_per_element must be positive".into()));
        }
        for f in [self.zero_group_fraction, self.zero_mantissa_fraction] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!(
                    "sparsity fractions must lie in [0, 1], got {f}"
                )));
            }
        }
        if self.array.group_size != crate::bfp::BfpConfig::default().group_size {
            return Err(Error::Config(
                "array group size must match the BFP group size".into(),
            ));
        }
        Ok(())
    }

    /// Array resized to `size`×`size` with on-chip memory scaled by area.
    pub fn with_array_size(&self, size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::Config("array size must be positive".into()));
        }
        let factor = (size * size) as f64 / (self.array.rows * self.array.cols) as f64;
        let scale = |n: usize| ((n as f64 * factor).round() as usize).max(1);
        Ok(Self {
            array: ArrayConfig {
                rows: size,
                cols: size,
                ..self.array
            },
            memory: MemoryConfig {
                transient_banks: scale(self.memory.transient_banks),
                static_banks: scale(self.memory.static_banks),
                ..self.memory
            },
            ..self.clone()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Temperature,
    ArraySize,
    ZeroFraction,
    RefreshCount,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Experiment {
    #[default]
    Lifetime,
    Train,
    Compare {
        variants: Vec<Variant>,
        profiles: Vec<HardwareProfile>,
        seeds: Vec<u64>,
    },
    Sweep {
        axis: SweepAxis,
        values: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds the model weights, the data and the training shuffle.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub hardware: HardwareProfile,
    #[serde(default = "default_target")]
    pub target_accuracy: f64,
    #[serde(default)]
    pub experiment: Experiment,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_target() -> f64 {
    0.9
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            hardware: HardwareProfile::default(),
            target_accuracy: default_target(),
            experiment: Experiment::default(),
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.hardware.validate()?;
        // Targets above 1 are allowed and simply never reached.
        if !(self.target_accuracy.is_finite() && self.target_accuracy >= 0.0) {
            return Err(Error::Config(
                "target_accuracy must be finite and non-negative".into(),
            ));
        }
        match &self.experiment {
            Experiment::Compare {
                variants,
                profiles,
                seeds,
            } => {
                if variants.len() * profiles.len() < 2 {
                    return Err(Error::Config(
                        "a comparison needs at least two cells".into(),
                    ));
                }
                if seeds.is_empty() {
                    return Err(Error::Config("a comparison needs at least one seed".into()));
                }
                for p in profiles {
                    p.validate()?;
                }
            }
            Experiment::Sweep { values, .. } if values.is_empty() => {
                return Err(Error::Config("a sweep needs at least one value".into()));
            }
            _ => {}
        }
        Ok(())
    }

    /// Copy of the configuration for one model variant.
    pub fn for_variant(&self, variant: Variant) -> Self {
        let mut c = self.clone();
        c.model.variant = variant;
        c
    }
}
