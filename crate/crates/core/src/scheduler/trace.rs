//! Serial execution of a schedule into a timed access trace, measured and
//! closed-form data lifetimes, and peak transient memory.

use std::collections::{BTreeMap, HashMap};

use num_traits::Zero;
use serde::{Deserialize, Serialize};

use super::dims::{op_workload, LayerDims, MacConvention, Operator, Time};
use super::schedule::{
    backward_schedule, forward_schedule, training_step_schedule, BackbonePlacement, NetworkShape,
    Opcode, Schedule, Storage,
};
use crate::error::{Error, Result};
use crate::systolic::ArrayConfig;

/// Time an instruction occupies the accelerator. Pooling, ReLU, additions and
/// head gradients take no time in every mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum LatencyModel {
    /// `T = N / R` with `R` MACs per time unit. Input and weight gradients
    /// cost as much as the forward convolution they belong to.
    Analytical {
        macs_per_unit: u64,
        #[serde(default)]
        convention: MacConvention,
    },
    /// Every convolution-type instruction takes `units`.
    Uniform { units: i64 },
    /// Cycle counts of the systolic array for each instruction's matrix product.
    Detailed { array: ArrayConfig },
}

impl LatencyModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            LatencyModel::Analytical { macs_per_unit, .. } if *macs_per_unit == 0 => {
                Err(Error::Config("throughput must be positive".into()))
            }
            LatencyModel::Uniform { units } if *units < 0 => {
                Err(Error::Config("latency must be non-negative".into()))
            }
            LatencyModel::Detailed { array } => array.validate(),
            _ => Ok(()),
        }
    }

    pub fn op_latency(&self, op: Opcode, dims: &LayerDims) -> Result<Time> {
        let Some(operator) = op.operator() else {
            return Ok(Time::zero());
        };
        Ok(match self {
            LatencyModel::Analytical {
                macs_per_unit,
                convention,
            } => Time::new(
                op_workload(dims, operator, *convention) as i128,
                *macs_per_unit as i128,
            ),
            LatencyModel::Uniform { units } => Time::from_integer(*units as i128),
            LatencyModel::Detailed { array } => {
                let Some(conv) = dims.conv(operator) else {
                    return Ok(Time::zero());
                };
                let job = crate::systolic::conv_job(conv, dims.batch, op, array.group_size)?;
                Time::from_integer(crate::systolic::detailed_cycles(array, &job)? as i128)
            }
        })
    }

    /// Latency of the forward convolution `which` at one block.
    pub fn operator_latency(&self, which: Operator, dims: &LayerDims) -> Result<Time> {
        let op = match which {
            Operator::G => Opcode::ConvG,
            Operator::F1 => Opcode::ConvF1,
            Operator::F2 => Opcode::ConvF2,
        };
        if dims.conv(which).is_none() {
            return Ok(Time::zero());
        }
        self.op_latency(op, dims)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Access {
    Read,
    Write,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessEvent {
    pub buffer: String,
    pub access: Access,
    pub time: Time,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccessTrace {
    pub events: Vec<AccessEvent>,
    /// `[start, end)` of each instruction.
    pub spans: Vec<(Time, Time)>,
}

impl AccessTrace {
    pub fn end(&self) -> Time {
        self.spans.last().map_or_else(Time::zero, |s| s.1)
    }
}

/// Execute `schedule` one instruction at a time. Initial buffers are written
/// at time 0; each instruction reads at its start and writes at its end.
pub fn simulate_trace(schedule: &Schedule, latency: &LatencyModel) -> Result<AccessTrace> {
    latency.validate()?;
    let mut events: Vec<AccessEvent> = schedule
        .initial
        .iter()
        .map(|b| AccessEvent {
            buffer: b.clone(),
            access: Access::Write,
            time: Time::zero(),
        })
        .collect();
    let mut spans = Vec::with_capacity(schedule.instructions.len());
    let mut t = Time::zero();
    for ins in &schedule.instructions {
        let dims = schedule
            .shape
            .layers
            .get(ins.layer.max(1) - 1)
            .ok_or_else(|| {
                Error::Schedule(format!(
                    "instruction for layer {} outside the network",
                    ins.layer
                ))
            })?;
        let end = t + latency.op_latency(ins.opcode, dims)?;
        events.extend(ins.inputs.iter().map(|b| AccessEvent {
            buffer: b.clone(),
            access: Access::Read,
            time: t,
        }));
        events.push(AccessEvent {
            buffer: ins.output.clone(),
            access: Access::Write,
            time: end,
        });
        spans.push((t, end));
        t = end;
    }
    Ok(AccessTrace { events, spans })
}

/// Largest gap between a read and the latest write before it, per buffer.
/// Buffers that are never read have lifetime 0.
pub fn measured_lifetimes(trace: &AccessTrace) -> Result<BTreeMap<String, Time>> {
    let mut last_write: HashMap<&str, Time> = HashMap::new();
    let mut out: BTreeMap<String, Time> = BTreeMap::new();
    let mut prev = Time::zero();
    for e in &trace.events {
        if e.time < prev {
            return Err(Error::Trace("timestamps go backwards".into()));
        }
        prev = e.time;
        match e.access {
            Access::Write => {
                last_write.insert(&e.buffer, e.time);
                out.entry(e.buffer.clone()).or_insert_with(Time::zero);
            }
            Access::Read => {
                let w = last_write
                    .get(e.buffer.as_str())
                    .ok_or_else(|| Error::Trace(format!("'{}' read before any write", e.buffer)))?;
                let gap = e.time - w;
                let slot = out.entry(e.buffer.clone()).or_insert_with(Time::zero);
                if gap > *slot {
                    *slot = gap;
                }
            }
        }
    }
    Ok(out)
}

/// Maximum lifetimes grouped by the block that produces the data. Block 1
/// also owns the branch inputs; block `L` owns the backward pass's starting
/// streams and gradients.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LayerLifetimes {
    pub layer: usize,
    pub forward_stream1: Time,
    pub forward_stream2: Time,
    pub forward_backbone: Time,
    pub backward_stream1: Time,
    pub backward_stream2: Time,
    pub backward_grad1: Time,
    pub backward_grad2: Time,
    /// Recomputed residual outputs kept for masking and input rebuilding.
    pub backward_recompute: Time,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LifetimeReport {
    /// Transient buffers of the forward pass.
    pub forward: BTreeMap<String, Time>,
    /// Transient buffers of the backward pass.
    pub backward: BTreeMap<String, Time>,
    pub layers: Vec<LayerLifetimes>,
    pub t_forward: Time,
    pub t_backward: Time,
    pub t_data: Time,
    pub peak_transient_bytes: Option<u64>,
}

fn split_id(id: &str) -> (&str, usize) {
    let (role, layer) = id.split_once('.').unwrap_or((id, "0"));
    (role, layer.parse().unwrap_or(0))
}

fn bump(slot: &mut Time, v: &Time) {
    if *v > *slot {
        *slot = *v;
    }
}

fn max_of(map: &BTreeMap<String, Time>) -> Time {
    map.values().max().cloned().unwrap_or_else(Time::zero)
}

impl LifetimeReport {
    fn assemble(
        blocks: usize,
        forward: BTreeMap<String, Time>,
        backward: BTreeMap<String, Time>,
        peak: Option<u64>,
    ) -> Self {
        let mut layers: Vec<LayerLifetimes> = (1..=blocks)
            .map(|layer| LayerLifetimes {
                layer,
                ..Default::default()
            })
            .collect();
        let at = |l: usize| l.clamp(1, blocks) - 1;
        for (id, t) in &forward {
            let (role, l) = split_id(id);
            let row = &mut layers[at(l)];
            match role {
                "x1" | "y1" => bump(&mut row.forward_stream1, t),
                "x2" | "x2i" | "y2" => bump(&mut row.forward_stream2, t),
                "bb" => bump(&mut row.forward_backbone, t),
                _ => {}
            }
        }
        for (id, t) in &backward {
            let (role, l) = split_id(id);
            let l = if role == "by2" { l + 1 } else { l };
            let row = &mut layers[at(l)];
            match role {
                "bx1" | "y1" | "x1" => bump(&mut row.backward_stream1, t),
                "bx2" | "by2" | "y2" | "x2" | "x2i" => bump(&mut row.backward_stream2, t),
                "s" | "g1" => bump(&mut row.backward_grad1, t),
                "m" | "g2" => bump(&mut row.backward_grad2, t),
                "br1" | "br2" | "r1" | "r2" => bump(&mut row.backward_recompute, t),
                _ => {}
            }
        }
        let t_forward = max_of(&forward);
        let t_backward = max_of(&backward);
        let t_data = t_forward.max(t_backward);
        Self {
            forward,
            backward,
            layers,
            t_forward,
            t_backward,
            t_data,
            peak_transient_bytes: peak,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let f = |t: &Time| *t.numer() as f64 / *t.denom() as f64;
        let map = |m: &BTreeMap<String, Time>| {
            m.iter()
                .map(|(k, v)| (k.clone(), f(v).into()))
                .collect::<serde_json::Map<_, _>>()
        };
        serde_json::json!({
            "t_forward": f(&self.t_forward),
            "t_backward": f(&self.t_backward),
            "t_data": f(&self.t_data),
            "peak_transient_bytes": self.peak_transient_bytes,
            "forward": map(&self.forward),
            "backward": map(&self.backward),
            "layers": self.layers.iter().map(|r| serde_json::json!({
                "layer": r.layer,
                "forward_stream1": f(&r.forward_stream1),
                "forward_stream2": f(&r.forward_stream2),
                "forward_backbone": f(&r.forward_backbone),
                "backward_stream1": f(&r.backward_stream1),
                "backward_stream2": f(&r.backward_stream2),
                "backward_grad1": f(&r.backward_grad1),
                "backward_grad2": f(&r.backward_grad2),
                "backward_recompute": f(&r.backward_recompute),
            })).collect::<Vec<_>>(),
        })
    }
}

fn transient_only(schedule: &Schedule, map: BTreeMap<String, Time>) -> BTreeMap<String, Time> {
    map.into_iter()
        .filter(|(id, _)| {
            schedule
                .buffers
                .get(id)
                .is_some_and(|b| b.storage == Storage::Transient)
        })
        .collect()
}

/// Lifetimes measured on simulated forward and backward traces, plus the
/// peak transient footprint of a whole training step.
pub fn measure_lifetimes(
    shape: &NetworkShape,
    latency: &LatencyModel,
    bytes_per_element: f64,
) -> Result<LifetimeReport> {
    let fwd = forward_schedule(shape)?;
    let bwd = backward_schedule(shape)?;
    let forward = transient_only(&fwd, measured_lifetimes(&simulate_trace(&fwd, latency)?)?);
    let backward = transient_only(&bwd, measured_lifetimes(&simulate_trace(&bwd, latency)?)?);
    let peak = peak_memory(&training_step_schedule(shape)?, bytes_per_element)?;
    Ok(LifetimeReport::assemble(
        shape.num_blocks(),
        forward,
        backward,
        Some(peak),
    ))
}

struct Latencies {
    g: Vec<Time>,
    f1: Vec<Time>,
    f2: Vec<Time>,
}

impl Latencies {
    /// 1-based; index 0 and `L + 1` are zero so boundary terms drop out.
    fn new(shape: &NetworkShape, latency: &LatencyModel, with_g: bool) -> Result<Self> {
        let mut g = vec![Time::zero()];
        let mut f1 = vec![Time::zero()];
        let mut f2 = vec![Time::zero()];
        for d in &shape.layers {
            g.push(if with_g {
                latency.operator_latency(Operator::G, d)?
            } else {
                Time::zero()
            });
            f1.push(latency.operator_latency(Operator::F1, d)?);
            f2.push(latency.operator_latency(Operator::F2, d)?);
        }
        for v in [&mut g, &mut f1, &mut f2] {
            v.push(Time::zero());
        }
        Ok(Self { g, f1, f2 })
    }
}

/// Per-buffer lifetimes of the emitted reversible schedules, written out
/// from the instruction order rather than measured.
pub fn closed_form_lifetimes(
    shape: &NetworkShape,
    latency: &LatencyModel,
) -> Result<LifetimeReport> {
    shape.validate()?;
    latency.validate()?;
    let topo = shape.topology;
    if !topo.reversible {
        return Err(Error::Config(
            "closed forms cover reversible branches only".into(),
        ));
    }
    let blocks = shape.num_blocks();
    let per_block = topo.backbone == BackbonePlacement::PerBlock;
    let Latencies { g, f1, f2 } = Latencies::new(shape, latency, per_block)?;
    let inj = topo.injections;
    let zero = Time::zero;
    let c = |t: &Time, k: i128| t * Time::from_integer(k);
    // Time from a block's start until its second stream is first needed.
    let x2_wait = |l: usize| {
        if inj {
            g[l]
        } else {
            g[l] + f1[l]
        }
    };

    let mut fwd = BTreeMap::new();
    fwd.insert("bb.0".to_string(), zero());
    if topo.backbone != BackbonePlacement::None {
        for l in 1..=blocks {
            let t = if per_block && l < blocks {
                f1[l] + f2[l]
            } else {
                zero()
            };
            fwd.insert(format!("bb.{l}"), t);
        }
    }
    fwd.insert("x1.1".into(), g[1] + f1[1] + f2[1]);
    fwd.insert("x2.1".into(), x2_wait(1));
    for l in 1..=blocks {
        let last = l == blocks;
        let y1 = if last {
            zero()
        } else {
            g[l + 1] + f1[l + 1] + f2[l + 1]
        };
        let y2 = if last { zero() } else { f2[l] + x2_wait(l + 1) };
        fwd.insert(format!("y1.{l}"), y1);
        fwd.insert(format!("y2.{l}"), y2);
        fwd.insert(format!("f1.{l}"), zero());
        fwd.insert(format!("f2.{l}"), zero());
        if inj {
            fwd.insert(format!("x2i.{l}"), f1[l]);
        }
    }

    let mut bwd = BTreeMap::new();
    let top = blocks;
    bwd.insert(format!("y1.{top}"), f2[top]);
    bwd.insert(format!("y2.{top}"), c(&f2[top], 2) + f1[top]);
    bwd.insert(format!("g1.{top}"), c(&f2[top], 3) + c(&f1[top], 3));
    bwd.insert(format!("g2.{top}"), c(&f2[top], 3) + f1[top]);
    for l in 1..=blocks {
        let p = l - 1;
        let first = l == 1;
        let recompute = f1[l] + f2[l];
        bwd.insert(format!("br1.{l}"), recompute);
        bwd.insert(format!("br2.{l}"), recompute);
        bwd.insert(format!("bt1.{l}"), zero());
        bwd.insert(format!("bt2.{l}"), zero());
        let x1 = if first {
            c(&f2[l], 2) + f1[l]
        } else {
            c(&f2[l], 2) + c(&f1[l], 3) + f2[p]
        };
        bwd.insert(format!("bx1.{l}"), x1);
        let x2 = if first {
            zero()
        } else if inj {
            bwd.insert(format!("by2.{p}"), c(&f2[p], 2) + f1[p]);
            f2[l] + c(&f1[l], 2)
        } else {
            f2[l] + c(&f1[l], 2) + c(&f2[p], 2) + f1[p]
        };
        bwd.insert(format!("bx2.{l}"), x2);
        let m = if first {
            f1[l]
        } else {
            c(&f1[l], 2) + c(&f2[p], 3) + f1[p]
        };
        bwd.insert(format!("m.{l}"), m);
        let s = if first {
            zero()
        } else {
            c(&f2[p], 3) + c(&f1[p], 3)
        };
        bwd.insert(format!("s.{l}"), s);
    }
    Ok(LifetimeReport::assemble(blocks, fwd, bwd, None))
}

/// Per-layer lifetime terms as the textbook expressions state them, with
/// input and weight gradients costing as much as the forward convolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormulaTerms {
    pub layer: usize,
    pub forward_stream1: Time,
    pub forward_stream2: Time,
    pub forward_backbone: Time,
    pub backward_grad1: Time,
    pub backward_grad2: Time,
    pub backward_stream: Time,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormulaLifetimes {
    pub layers: Vec<FormulaTerms>,
    pub t_forward: Time,
    pub t_backward: Time,
    pub t_data: Time,
}

/// Evaluate the textbook per-layer lifetime expressions. Terms referring to a block
/// beyond either end of the network are dropped.
pub fn formula_lifetimes(shape: &NetworkShape, latency: &LatencyModel) -> Result<FormulaLifetimes> {
    shape.validate()?;
    latency.validate()?;
    let with_g = shape.topology.backbone != BackbonePlacement::None;
    let Latencies { g, f1, f2 } = Latencies::new(shape, latency, with_g)?;
    let blocks = shape.num_blocks();
    let layers: Vec<FormulaTerms> = (1..=blocks)
        .map(|l| {
            let (n, p) = (l + 1, l - 1);
            FormulaTerms {
                layer: l,
                forward_backbone: g[l] + f1[l] + f2[l],
                forward_stream1: f1[l] + g[n] + f2[n],
                forward_stream2: f1[l] + f2[l] + g[n] + f2[n],
                // U1a(l) + U2w(l-1) + U2a(l-1) + F2(l-1) + U1w(l-1)
                backward_grad1: f1[l] + f2[p] + f2[p] + f2[p] + f1[p],
                // U2a(l) + F2(l) + U1w(l)
                backward_grad2: f2[l] + f2[l] + f1[l],
                // F2(l) + U1w(l) + U1a(l) + U2w(l-1) + U2a(l-1)
                backward_stream: f2[l] + f1[l] + f1[l] + f2[p] + f2[p],
            }
        })
        .collect();
    let t_forward = layers
        .iter()
        .flat_map(|r| [&r.forward_stream1, &r.forward_stream2, &r.forward_backbone])
        .max()
        .cloned()
        .unwrap_or_else(Time::zero);
    let t_backward = layers
        .iter()
        .flat_map(|r| [&r.backward_grad1, &r.backward_grad2, &r.backward_stream])
        .max()
        .cloned()
        .unwrap_or_else(Time::zero);
    let t_data = t_forward.max(t_backward);
    Ok(FormulaLifetimes {
        layers,
        t_forward,
        t_backward,
        t_data,
    })
}

/// Peak number of transient elements held at once. A buffer is held from its
/// write until its last read; an overwriting instruction hands its target's
/// storage to the output, so the two are not counted together.
pub fn peak_transient_elements(schedule: &Schedule) -> Result<usize> {
    schedule.validate()?;
    // Each write opens a version of its buffer.
    struct Version {
        elements: usize,
        start: usize,
        end: usize,
        /// Instruction whose output took over this storage.
        handed_at: Option<usize>,
    }
    let mut versions: Vec<Version> = Vec::new();
    let mut open: HashMap<&str, usize> = HashMap::new();
    let transient = |id: &str| -> Result<Option<usize>> {
        let b = schedule.buffer(id)?;
        Ok((b.storage == Storage::Transient).then_some(b.elements))
    };
    for id in &schedule.initial {
        if let Some(n) = transient(id)? {
            open.insert(id, versions.len());
            versions.push(Version {
                elements: n,
                start: 0,
                end: 0,
                handed_at: None,
            });
        }
    }
    for (i, ins) in schedule.instructions.iter().enumerate() {
        for id in &ins.inputs {
            if let Some(&v) = open.get(id.as_str()) {
                versions[v].end = i;
            }
        }
        if let Some(t) = &ins.overwrite {
            if let Some(v) = open.remove(t.as_str()) {
                versions[v].handed_at = Some(i);
            }
        }
        if let Some(n) = transient(&ins.output)? {
            if let Some(v) = open.remove(ins.output.as_str()) {
                // Rewritten without a handover: the old copy dies here.
                versions[v].handed_at = Some(i);
            }
            open.insert(&ins.output, versions.len());
            versions.push(Version {
                elements: n,
                start: i,
                end: i,
                handed_at: None,
            });
        }
    }
    let steps = schedule.instructions.len().max(1);
    let mut peak = 0;
    for i in 0..steps {
        let live: usize = versions
            .iter()
            .filter(|v| match v.handed_at {
                Some(h) => v.start <= i && i < h,
                None => v.start <= i && i <= v.end,
            })
            .map(|v| v.elements)
            .sum();
        peak = peak.max(live);
    }
    Ok(peak)
}

pub fn peak_memory(schedule: &Schedule, bytes_per_element: f64) -> Result<u64> {
    if !(bytes_per_element > 0.0 && bytes_per_element.is_finite()) {
        return Err(Error::Config("bytes per element must be positive".into()));
    }
    Ok((peak_transient_elements(schedule)? as f64 * bytes_per_element).ceil() as u64)
}

/// One written version of a buffer, timed against a trace.
#[derive(Debug, Clone, PartialEq)]
pub struct LiveRange {
    pub buffer: String,
    pub elements: usize,
    pub storage: Storage,
    /// Storage is claimed when the writing instruction starts.
    pub claimed: Time,
    pub written: Time,
    /// Time of the last read, or `written` if never read.
    pub last_read: Time,
    /// Storage is free again from here.
    pub released: Time,
    pub reads: usize,
    /// Index of the version that took over this storage in place.
    pub handed_to: Option<usize>,
}

impl LiveRange {
    pub fn lifetime(&self) -> Time {
        self.last_read - self.written
    }
}

/// Every buffer version of `schedule` with its claim, write, last read and
/// release times under `latency`.
pub fn live_ranges(schedule: &Schedule, latency: &LatencyModel) -> Result<Vec<LiveRange>> {
    schedule.validate()?;
    let trace = simulate_trace(schedule, latency)?;
    let mut out: Vec<LiveRange> = Vec::new();
    let mut open: HashMap<&str, usize> = HashMap::new();
    let fresh = |id: &str, claimed: Time, written: Time| -> Result<LiveRange> {
        let b = schedule.buffer(id)?;
        Ok(LiveRange {
            buffer: id.to_string(),
            elements: b.elements,
            storage: b.storage,
            claimed,
            written,
            last_read: written,
            released: written,
            reads: 0,
            handed_to: None,
        })
    };
    for id in &schedule.initial {
        open.insert(id, out.len());
        out.push(fresh(id, Time::zero(), Time::zero())?);
    }
    for (i, ins) in schedule.instructions.iter().enumerate() {
        let (start, end) = trace.spans[i];
        for id in &ins.inputs {
            if let Some(&v) = open.get(id.as_str()) {
                out[v].last_read = start;
                out[v].released = end;
                out[v].reads += 1;
            }
        }
        let next = out.len();
        if let Some(t) = &ins.overwrite {
            if let Some(v) = open.remove(t.as_str()) {
                out[v].handed_to = Some(next);
                out[v].released = start;
            }
        }
        if let Some(v) = open.remove(ins.output.as_str()) {
            out[v].released = out[v].released.min(start);
        }
        open.insert(&ins.output, next);
        out.push(fresh(&ins.output, start, end)?);
    }
    // Results nobody reads are held to the end of the pass.
    let finish = trace.end();
    for &v in open.values() {
        if out[v].reads == 0 {
            out[v].released = finish;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::duplex::model::Variant;
    use crate::scheduler::dims::ConvDims;
    use crate::scheduler::schedule::{Buffer, Instruction, Pass, Topology};

    fn shape(blocks: usize, variant: Variant) -> NetworkShape {
        let f = ConvDims {
            c_in: 2,
            c_out: 2,
            height: 4,
            width: 4,
            kernel: 3,
        };
        let topology = Topology::of(variant);
        let g = (topology.backbone != BackbonePlacement::None).then_some(ConvDims {
            c_in: 1,
            c_out: 2,
            height: 8,
            width: 8,
            kernel: 3,
        });
        NetworkShape {
            topology,
            layers: vec![
                LayerDims {
                    batch: 1,
                    g,
                    f1: f,
                    f2: f
                };
                blocks
            ],
            image_elements: 64,
        }
    }

    fn t(v: i128) -> Time {
        Time::from_integer(v)
    }

    fn ev(buffer: &str, access: Access, time: i128) -> AccessEvent {
        AccessEvent {
            buffer: buffer.into(),
            access,
            time: t(time),
        }
    }

    #[test]
    fn lifetime_definition() {
        let trace = AccessTrace {
            events: vec![
                ev("a", Access::Write, 0),
                ev("a", Access::Read, 1),
                ev("a", Access::Read, 5),
                ev("a", Access::Write, 6),
                ev("a", Access::Read, 7),
                ev("b", Access::Write, 7),
            ],
            spans: vec![],
        };
        let m = measured_lifetimes(&trace).unwrap();
        assert_eq!(m["a"], t(5));
        assert_eq!(m["b"], t(0));
    }

    #[test]
    fn read_before_write_is_an_error() {
        let trace = AccessTrace {
            events: vec![ev("a", Access::Read, 0)],
            spans: vec![],
        };
        assert!(measured_lifetimes(&trace).is_err());
    }

    #[test]
    fn single_backbone_conv_trace() {
        let sh = shape(1, Variant::DuDnn);
        let fwd = forward_schedule(&sh).unwrap();
        let lat = LatencyModel::Uniform { units: 1 };
        let trace = simulate_trace(&fwd, &lat).unwrap();
        let i = fwd
            .instructions
            .iter()
            .position(|i| i.opcode == Opcode::ConvG)
            .unwrap();
        assert_eq!(trace.spans[i], (t(0), t(1)));
        let expected: usize = fwd.initial.len()
            + fwd
                .instructions
                .iter()
                .map(|i| i.inputs.len() + 1)
                .sum::<usize>();
        assert_eq!(trace.events.len(), expected);
    }

    #[test]
    fn formula_values_at_unit_latency() {
        let f = formula_lifetimes(
            &shape(4, Variant::DuDnn),
            &LatencyModel::Uniform { units: 1 },
        )
        .unwrap();
        let inner = &f.layers[1];
        assert_eq!(inner.forward_stream2, t(4));
        assert_eq!(inner.backward_grad1, t(5));
        assert_eq!(inner.forward_backbone, t(3));
    }

    #[test]
    fn closed_forms_match_two_block_trace() {
        for v in [Variant::DuDnn, Variant::Ca, Variant::Bo] {
            let sh = shape(2, v);
            let lat = LatencyModel::Uniform { units: 1 };
            let closed = closed_form_lifetimes(&sh, &lat).unwrap();
            let measured = measure_lifetimes(&sh, &lat, 1.0).unwrap();
            assert_eq!(closed.forward, measured.forward, "{v}");
            assert_eq!(closed.backward, measured.backward, "{v}");
            assert_eq!(closed.layers, measured.layers, "{v}");
        }
    }

    #[test]
    fn irreversible_branch_has_no_closed_form() {
        assert!(
            closed_form_lifetimes(&shape(2, Variant::Fi), &LatencyModel::Uniform { units: 1 })
                .is_err()
        );
    }

    #[test]
    fn doubling_throughput_halves_lifetimes() {
        let sh = shape(3, Variant::DuDnn);
        let slow = LatencyModel::Analytical {
            macs_per_unit: 6,
            convention: MacConvention::PerOutputChannel,
        };
        let fast = LatencyModel::Analytical {
            macs_per_unit: 12,
            convention: MacConvention::PerOutputChannel,
        };
        let a = closed_form_lifetimes(&sh, &slow).unwrap();
        let b = closed_form_lifetimes(&sh, &fast).unwrap();
        for (k, v) in &a.backward {
            assert_eq!(b.backward[k] * t(2), *v);
        }
        assert_eq!(b.t_data * t(2), a.t_data);
    }

    #[test]
    fn single_buffer_peak() {
        let sh = shape(1, Variant::Bo);
        let mut buffers = BTreeMap::new();
        buffers.insert(
            "a".to_string(),
            Buffer {
                id: "a".into(),
                elements: 100,
                storage: Storage::Transient,
            },
        );
        let s = Schedule {
            pass: Pass::Forward,
            shape: sh,
            initial: vec!["a".into()],
            buffers,
            instructions: vec![Instruction {
                opcode: Opcode::Relu,
                layer: 1,
                inputs: vec!["a".into()],
                output: "a".into(),
                overwrite: Some("a".into()),
            }],
        };
        assert_eq!(peak_memory(&s, 1.0).unwrap(), 100);
    }
}
