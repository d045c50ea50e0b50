//! The four experiment kinds: lifetime analysis, training, comparison, sweep.

use std::collections::hash_map::Entry;
use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{
    Experiment, ExperimentConfig, HardwareProfile, LatencyMode, RefreshPolicy, SweepAxis,
};
use super::cost::{analyze_step, latency_model, StepCost};
use super::report::{finite_or_inf, fmt, CsvTable, TtaEta};
use crate::duplex::data::generate;
use crate::duplex::model::{DuDnnSpec, ModelConfig, Variant};
use crate::duplex::train::{train, FaultConfig, TrainOutcome, TrajectoryPoint};
use crate::error::{Error, Result};
use crate::memory::RefreshLedger;
use crate::scheduler::{
    closed_form_lifetimes, formula_lifetimes, measure_lifetimes, MacConvention, NetworkShape, Time,
};

fn as_f64(t: &Time) -> f64 {
    *t.numer() as f64 / *t.denom() as f64
}

pub fn build_model(model: &ModelConfig, seed: u64) -> Result<DuDnnSpec> {
    DuDnnSpec::new(model, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRow {
    pub layer: usize,
    pub forward_stream1_us: f64,
    pub forward_stream2_us: f64,
    pub forward_backbone_us: f64,
    pub backward_stream1_us: f64,
    pub backward_stream2_us: f64,
    pub backward_grad1_us: f64,
    pub backward_grad2_us: f64,
    pub backward_recompute_us: f64,
}

impl CsvTable for LayerRow {
    fn header() -> Vec<&'static str> {
        vec![
            "layer",
            "forward_stream1_us",
            "forward_stream2_us",
            "forward_backbone_us",
            "backward_stream1_us",
            "backward_stream2_us",
            "backward_grad1_us",
            "backward_grad2_us",
            "backward_recompute_us",
        ]
    }

    fn row(&self) -> Vec<String> {
        let mut r = vec![self.layer.to_string()];
        r.extend(
            [
                self.forward_stream1_us,
                self.forward_stream2_us,
                self.forward_backbone_us,
                self.backward_stream1_us,
                self.backward_stream2_us,
                self.backward_grad1_us,
                self.backward_grad2_us,
                self.backward_recompute_us,
            ]
            .map(fmt),
        );
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LifetimeRun {
    pub variant: Variant,
    pub profile: String,
    pub batch: usize,
    pub mac_convention: MacConvention,
    pub latency: LatencyMode,
    pub us_per_cycle: f64,
    pub forward_us: BTreeMap<String, f64>,
    pub backward_us: BTreeMap<String, f64>,
    pub layers: Vec<LayerRow>,
    pub t_forward_us: f64,
    pub t_backward_us: f64,
    pub t_data_us: f64,
    /// The textbook per-layer expressions evaluated on the same latencies.
    pub formula_t_data_us: f64,
    /// Whether the schedule's closed forms reproduce the measurement; only
    /// decided for reversible branches in analytical mode.
    pub closed_form_agrees: Option<bool>,
    pub retention_us: f64,
    pub refresh: RefreshLedger,
    pub utilization: f64,
    pub peak_transient_bytes: u64,
    pub spilled_bytes: u64,
}

/// Lifetimes of every transient buffer, converted to µs, and what they cost
/// in refreshes on the configured hardware.
pub fn run_lifetime(cfg: &ExperimentConfig) -> Result<LifetimeRun> {
    cfg.validate()?;
    let hw = &cfg.hardware;
    let spec = build_model(&cfg.model, cfg.seed)?;
    let batch = cfg.train.batch_size;
    let shape = NetworkShape::from_spec(&spec, batch);
    let latency = latency_model(hw, hw.mac_convention);
    let measured = measure_lifetimes(&shape, &latency, hw.bytes_per_element)?;
    let us_per_cycle = 1e6 / hw.array.clock_hz;
    let us = |t: &Time| as_f64(t) * us_per_cycle;
    let closed_form_agrees = if shape.topology.reversible && hw.latency == LatencyMode::Analytical {
        let closed = closed_form_lifetimes(&shape, &latency)?;
        Some(
            closed.forward == measured.forward
                && closed.backward == measured.backward
                && closed.t_data == measured.t_data,
        )
    } else {
        None
    };
    let formula = formula_lifetimes(&shape, &latency)?;
    let step = analyze_step(&spec, hw, batch, hw.mac_convention)?;
    let to_us = |m: &BTreeMap<String, Time>| m.iter().map(|(k, v)| (k.clone(), us(v))).collect();
    Ok(LifetimeRun {
        variant: spec.variant(),
        profile: hw.name.clone(),
        batch,
        mac_convention: hw.mac_convention,
        latency: hw.latency,
        us_per_cycle,
        forward_us: to_us(&measured.forward),
        backward_us: to_us(&measured.backward),
        layers: measured
            .layers
            .iter()
            .map(|r| LayerRow {
                layer: r.layer,
                forward_stream1_us: us(&r.forward_stream1),
                forward_stream2_us: us(&r.forward_stream2),
                forward_backbone_us: us(&r.forward_backbone),
                backward_stream1_us: us(&r.backward_stream1),
                backward_stream2_us: us(&r.backward_stream2),
                backward_grad1_us: us(&r.backward_grad1),
                backward_grad2_us: us(&r.backward_grad2),
                backward_recompute_us: us(&r.backward_recompute),
            })
            .collect(),
        t_forward_us: us(&measured.t_forward),
        t_backward_us: us(&measured.t_backward),
        t_data_us: us(&measured.t_data),
        formula_t_data_us: us(&formula.t_data),
        closed_form_agrees,
        retention_us: step.cost.retention_us,
        refresh: step.ledger,
        utilization: step.cost.utilization,
        peak_transient_bytes: step.cost.peak_transient_bytes,
        spilled_bytes: step.cost.spilled_bytes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainRun {
    pub variant: Variant,
    pub profile: String,
    pub seed: u64,
    pub step: StepCost,
    /// Stored activations outlived retention with refresh disabled.
    pub stored_data_expired: bool,
    pub final_accuracy: f64,
    pub steps: usize,
    pub trajectory: Vec<TrajectoryPoint>,
    pub tta: TtaEta,
    pub values_read: u64,
    pub values_corrupted: u64,
}

/// Faults the training run sees on `hw` for a step whose expiring buffers are `expiring`.
fn fault_setting(
    cfg: &ExperimentConfig,
    hw: &HardwareProfile,
    expiring: bool,
) -> Option<FaultConfig> {
    let expired = hw.refresh == RefreshPolicy::Disabled && expiring;
    match (cfg.train.faults, expired) {
        (Some(f), _) => Some(FaultConfig {
            expire_stored_activations: f.expire_stored_activations || expired,
            ..f
        }),
        (None, true) => Some(FaultConfig {
            read_yield: 1.0,
            expire_stored_activations: true,
        }),
        (None, false) => None,
    }
}

fn train_model(
    cfg: &ExperimentConfig,
    seed: u64,
    faults: Option<FaultConfig>,
) -> Result<TrainOutcome> {
    let spec = build_model(&cfg.model, seed)?;
    if cfg.data.task.classes() != cfg.model.classes {
        return Err(Error::Config(format!(
            "task has {} classes but the model predicts {}",
            cfg.data.task.classes(),
            cfg.model.classes
        )));
    }
    let (train_set, val_set) = generate(
        &cfg.data,
        cfg.model.image_size,
        cfg.model.input_channels,
        seed,
    )?;
    let tc = crate::duplex::train::TrainConfig {
        seed,
        faults,
        ..cfg.train.clone()
    };
    train(&spec, &tc, &train_set, &val_set)
}

/// Train on the synthetic task and cost the run on the configured hardware.
pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainRun> {
    cfg.validate()?;
    let hw = &cfg.hardware;
    let spec = build_model(&cfg.model, cfg.seed)?;
    let step = analyze_step(&spec, hw, cfg.train.batch_size, hw.mac_convention)?.cost;
    let faults = fault_setting(cfg, hw, !step.expiring_buffers.is_empty());
    let out = train_model(cfg, cfg.seed, faults)?;
    let tta = TtaEta::from_trajectory(
        &out.trajectory,
        cfg.target_accuracy,
        step.step_us,
        step.step_energy,
    );
    Ok(TrainRun {
        variant: spec.variant(),
        profile: hw.name.clone(),
        seed: cfg.seed,
        stored_data_expired: faults.is_some_and(|f| f.expire_stored_activations),
        step,
        final_accuracy: out.final_accuracy,
        steps: out.steps,
        trajectory: out.trajectory,
        tta,
        values_read: out.values_read,
        values_corrupted: out.values_corrupted,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareCell {
    pub variant: Variant,
    pub profile: String,
    /// Every seed reached the target.
    pub reached: bool,
    pub mean_final_accuracy: f64,
    #[serde(serialize_with = "finite_or_inf")]
    pub tta_us: f64,
    #[serde(serialize_with = "finite_or_inf")]
    pub eta: f64,
    #[serde(serialize_with = "finite_or_inf")]
    pub tta_norm: f64,
    #[serde(serialize_with = "finite_or_inf")]
    pub eta_norm: f64,
    pub step_us: f64,
    pub step_energy: f64,
    pub max_refreshes: u64,
    pub refresh_events: u64,
    pub utilization: f64,
    pub peak_transient_bytes: u64,
    pub spilled_bytes: u64,
}

impl CsvTable for CompareCell {
    fn header() -> Vec<&'static str> {
        vec![
            "variant",
            "profile",
            "reached",
            "mean_final_accuracy",
            "tta_us",
            "eta",
            "tta_norm",
            "eta_norm",
            "step_us",
            "step_energy",
            "max_refreshes",
            "refresh_events",
            "utilization",
            "peak_transient_bytes",
            "spilled_bytes",
        ]
    }

    fn row(&self) -> Vec<String> {
        vec![
            self.variant.to_string(),
            self.profile.clone(),
            self.reached.to_string(),
            fmt(self.mean_final_accuracy),
            fmt(self.tta_us),
            fmt(self.eta),
            fmt(self.tta_norm),
            fmt(self.eta_norm),
            fmt(self.step_us),
            fmt(self.step_energy),
            self.max_refreshes.to_string(),
            self.refresh_events.to_string(),
            fmt(self.utilization),
            self.peak_transient_bytes.to_string(),
            self.spilled_bytes.to_string(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub target_accuracy: f64,
    pub seeds: Vec<u64>,
    pub cells: Vec<CompareCell>,
    /// False when a cell failed; `cells` then holds those finished before it.
    pub complete: bool,
    pub failure: Option<String>,
}

impl ComparisonReport {
    pub fn cell(&self, variant: Variant, profile: &str) -> Option<&CompareCell> {
        self.cells
            .iter()
            .find(|c| c.variant == variant && c.profile == profile)
    }
}

fn normalize(cells: &mut [CompareCell]) {
    let best = |f: fn(&CompareCell) -> f64| {
        cells
            .iter()
            .map(f)
            .filter(|v| v.is_finite())
            .fold(f64::INFINITY, f64::min)
    };
    let (tta, eta) = (best(|c| c.tta_us), best(|c| c.eta));
    for c in cells.iter_mut() {
        c.tta_norm = c.tta_us / tta;
        c.eta_norm = c.eta / eta;
    }
}

/// Every variant × profile cell, trained once per seed and costed per profile.
pub fn run_compare(cfg: &ExperimentConfig) -> Result<ComparisonReport> {
    cfg.validate()?;
    let Experiment::Compare {
        variants,
        profiles,
        seeds,
    } = &cfg.experiment
    else {
        return Err(Error::Config("experiment kind is not 'compare'".into()));
    };
    let mut report = ComparisonReport {
        target_accuracy: cfg.target_accuracy,
        seeds: seeds.clone(),
        cells: Vec::new(),
        complete: true,
        failure: None,
    };
    // Training does not depend on the profile unless faults differ.
    let mut trained: HashMap<(Variant, u64, bool), TrainOutcome> = HashMap::new();
    for &variant in variants {
        let vcfg = cfg.for_variant(variant);
        for hw in profiles {
            let cell = (|| -> Result<CompareCell> {
                let spec = build_model(&vcfg.model, cfg.seed)?;
                let step = analyze_step(&spec, hw, cfg.train.batch_size, hw.mac_convention)?.cost;
                let faults = fault_setting(&vcfg, hw, !step.expiring_buffers.is_empty());
                let expired = faults.is_some_and(|f| f.expire_stored_activations);
                let mut results = Vec::new();
                for &seed in seeds {
                    let key = (variant, seed, expired);
                    let out = match trained.entry(key) {
                        Entry::Occupied(e) => e.into_mut(),
                        Entry::Vacant(e) => e.insert(train_model(&vcfg, seed, faults)?),
                    };
                    results.push((
                        out.final_accuracy,
                        TtaEta::from_trajectory(
                            &out.trajectory,
                            cfg.target_accuracy,
                            step.step_us,
                            step.step_energy,
                        ),
                    ));
                }
                let n = results.len() as f64;
                let reached = results.iter().all(|(_, t)| t.reached);
                let mean =
                    |f: fn(&TtaEta) -> f64| results.iter().map(|(_, t)| f(t)).sum::<f64>() / n;
                Ok(CompareCell {
                    variant,
                    profile: hw.name.clone(),
                    reached,
                    mean_final_accuracy: results.iter().map(|(a, _)| a).sum::<f64>() / n,
                    tta_us: if reached {
                        mean(|t| t.tta_us)
                    } else {
                        f64::INFINITY
                    },
                    eta: if reached {
                        mean(|t| t.eta)
                    } else {
                        f64::INFINITY
                    },
                    tta_norm: f64::INFINITY,
                    eta_norm: f64::INFINITY,
                    step_us: step.step_us,
                    step_energy: step.step_energy,
                    max_refreshes: step.max_refreshes,
                    refresh_events: step.refresh_events,
                    utilization: step.utilization,
                    peak_transient_bytes: step.peak_transient_bytes,
                    spilled_bytes: step.spilled_bytes,
                })
            })();
            match cell {
                Ok(c) => report.cells.push(c),
                Err(e) => {
                    report.complete = false;
                    report.failure = Some(format!("{variant} on {}: {e}", hw.name));
                    normalize(&mut report.cells);
                    return Ok(report);
                }
            }
        }
    }
    normalize(&mut report.cells);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub retention_us: f64,
    pub t_data_us: f64,
    /// `t_data_us` over the first row's.
    pub lifetime_norm: f64,
    pub max_refreshes: u64,
    pub refresh_events: u64,
    pub step_us: f64,
    pub step_energy: f64,
    pub pe_energy: f64,
    pub utilization: f64,
    pub spilled_bytes: u64,
}

impl CsvTable for SweepRow {
    fn header() -> Vec<&'static str> {
        vec![
            "value",
            "retention_us",
            "t_data_us",
            "lifetime_norm",
            "max_refreshes",
            "refresh_events",
            "step_us",
            "step_energy",
            "pe_energy",
            "utilization",
            "spilled_bytes",
        ]
    }

    fn row(&self) -> Vec<String> {
        vec![
            fmt(self.value),
            fmt(self.retention_us),
            fmt(self.t_data_us),
            fmt(self.lifetime_norm),
            self.max_refreshes.to_string(),
            self.refresh_events.to_string(),
            fmt(self.step_us),
            fmt(self.step_energy),
            fmt(self.pe_energy),
            fmt(self.utilization),
            self.spilled_bytes.to_string(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub variant: Variant,
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

fn profile_at(base: &HardwareProfile, axis: SweepAxis, value: f64) -> Result<HardwareProfile> {
    let mut hw = base.clone();
    match axis {
        SweepAxis::Temperature => hw.temperature_c = value,
        SweepAxis::ArraySize => {
            if !(value >= 1.0 && value.fract() == 0.0) {
                return Err(Error::Config(format!(
                    "array size must be a positive integer, got {value}"
                )));
            }
            hw = hw.with_array_size(value as usize)?;
        }
        SweepAxis::ZeroFraction => hw.zero_group_fraction = value,
        SweepAxis::RefreshCount => {
            if !(value >= 0.0 && value.fract() == 0.0) {
                return Err(Error::Config(format!(
                    "refresh count must be a whole number, got {value}"
                )));
            }
            hw.refresh = RefreshPolicy::AtLeast(value as u64);
        }
    }
    hw.validate()?;
    Ok(hw)
}

/// Re-cost one training step at each value of a hardware axis.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    cfg.validate()?;
    let Experiment::Sweep { axis, values } = &cfg.experiment else {
        return Err(Error::Config("experiment kind is not 'sweep'".into()));
    };
    let spec = build_model(&cfg.model, cfg.seed)?;
    let mut rows: Vec<SweepRow> = Vec::new();
    for &value in values {
        let hw = profile_at(&cfg.hardware, *axis, value)?;
        let c = analyze_step(&spec, &hw, cfg.train.batch_size, hw.mac_convention)?.cost;
        let base = rows.first().map_or(c.t_data_us, |r| r.t_data_us);
        rows.push(SweepRow {
            value,
            retention_us: c.retention_us,
            t_data_us: c.t_data_us,
            lifetime_norm: c.t_data_us / base,
            max_refreshes: c.max_refreshes,
            refresh_events: c.refresh_events,
            step_us: c.step_us,
            step_energy: c.step_energy,
            pe_energy: c.pe_energy,
            utilization: c.utilization,
            spilled_bytes: c.spilled_bytes,
        });
    }
    Ok(SweepReport {
        variant: spec.variant(),
        axis: *axis,
        rows,
    })
}
