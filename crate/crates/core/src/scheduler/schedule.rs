//! Pseudo-instruction schedules for the branch forward pass, the backward
//! pass, and a whole training step.
//!
//! Buffers are named `<role>.<layer>` with 1-based layers. `bb.0` is the input
//! image; `bb.l` is backbone layer `l`'s output, `inj.l` its pooled projection.
//! Backward buffers carry a `b` prefix (`bx1.l` is block `l`'s first input as
//! rebuilt from its outputs).

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::dims::{LayerDims, Operator};
use crate::duplex::model::{DuDnnSpec, Variant};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Opcode {
    ConvG,
    ConvF1,
    ConvF2,
    InvGradU1a,
    InvGradU2a,
    WGradU1w,
    WGradU2w,
    Add,
    /// Residual subtraction used when rebuilding block inputs.
    Sub,
    Pool,
    Relu,
    RecomputeF1,
    RecomputeF2,
    /// Loss gradient with respect to one output stream.
    HeadGrad,
}

impl Opcode {
    pub const ALL: [Opcode; 14] = [
        Opcode::ConvG,
        Opcode::ConvF1,
        Opcode::ConvF2,
        Opcode::InvGradU1a,
        Opcode::InvGradU2a,
        Opcode::WGradU1w,
        Opcode::WGradU2w,
        Opcode::Add,
        Opcode::Sub,
        Opcode::Pool,
        Opcode::Relu,
        Opcode::RecomputeF1,
        Opcode::RecomputeF2,
        Opcode::HeadGrad,
    ];

    pub fn mnemonic(&self) -> &'static str {
        match self {
            Opcode::ConvG => "CONV_G",
            Opcode::ConvF1 => "CONV_F1",
            Opcode::ConvF2 => "CONV_F2",
            Opcode::InvGradU1a => "INVGRAD_U1A",
            Opcode::InvGradU2a => "INVGRAD_U2A",
            Opcode::WGradU1w => "WGRAD_U1W",
            Opcode::WGradU2w => "WGRAD_U2W",
            Opcode::Add => "ADD",
            Opcode::Sub => "SUB",
            Opcode::Pool => "POOL",
            Opcode::Relu => "RELU",
            Opcode::RecomputeF1 => "RECOMPUTE_F1",
            Opcode::RecomputeF2 => "RECOMPUTE_F2",
            Opcode::HeadGrad => "HEAD_GRAD",
        }
    }

    /// The convolution whose cost this opcode carries, if any.
    pub fn operator(&self) -> Option<Operator> {
        match self {
            Opcode::ConvG => Some(Operator::G),
            Opcode::ConvF1 | Opcode::RecomputeF1 | Opcode::InvGradU1a | Opcode::WGradU1w => {
                Some(Operator::F1)
            }
            Opcode::ConvF2 | Opcode::RecomputeF2 | Opcode::InvGradU2a | Opcode::WGradU2w => {
                Some(Operator::F2)
            }
            _ => None,
        }
    }

    fn arity_ok(&self, n: usize) -> bool {
        match self {
            Opcode::ConvG
            | Opcode::ConvF1
            | Opcode::ConvF2
            | Opcode::Pool
            | Opcode::Relu
            | Opcode::RecomputeF1
            | Opcode::RecomputeF2 => n == 1,
            Opcode::InvGradU1a | Opcode::InvGradU2a | Opcode::Sub | Opcode::HeadGrad => n == 2,
            Opcode::WGradU1w | Opcode::WGradU2w => n == 3,
            Opcode::Add => n >= 2,
        }
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())
    }
}

impl FromStr for Opcode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Opcode::ALL
            .into_iter()
            .find(|o| o.mnemonic() == s)
            .ok_or_else(|| Error::Schedule(format!("unknown opcode '{s}'")))
    }
}

/// Where a buffer lives: transient data goes to eDRAM, static data (pooled
/// injections, weight gradients) to SRAM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Storage {
    Transient,
    Static,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Buffer {
    pub id: String,
    pub elements: usize,
    pub storage: Storage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub opcode: Opcode,
    /// 1-based block index; 0 for the stem.
    pub layer: usize,
    pub inputs: Vec<String>,
    pub output: String,
    /// Buffer whose storage the output takes over. It must be dead afterwards.
    pub overwrite: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pass {
    Forward,
    Backward,
    Step,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackbonePlacement {
    None,
    /// One backbone layer runs at the start of each block.
    PerBlock,
    /// The whole backbone runs before the branch.
    Prefix,
}

/// How the branch is wired to the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub reversible: bool,
    pub backbone: BackbonePlacement,
    pub injections: bool,
}

impl Topology {
    pub fn of(variant: Variant) -> Self {
        let (reversible, backbone, injections) = match variant {
            Variant::DuDnn => (true, BackbonePlacement::PerBlock, true),
            Variant::Fi => (false, BackbonePlacement::PerBlock, true),
            Variant::Ca => (true, BackbonePlacement::Prefix, false),
            Variant::Bo => (true, BackbonePlacement::None, false),
        };
        Self {
            reversible,
            backbone,
            injections,
        }
    }
}

/// Everything schedule emission needs to know about a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub topology: Topology,
    pub layers: Vec<LayerDims>,
    pub image_elements: usize,
}

impl NetworkShape {
    pub fn from_spec(spec: &DuDnnSpec, batch: usize) -> Self {
        let cfg = &spec.config;
        Self {
            topology: Topology::of(spec.variant()),
            layers: super::dims::layer_dims_from_spec(spec, batch),
            image_elements: batch * cfg.input_channels * cfg.image_size * cfg.image_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("a schedule needs at least one block".into()));
        }
        for d in &self.layers {
            d.validate()?;
        }
        let needs_g = self.topology.backbone != BackbonePlacement::None;
        if needs_g && self.layers.iter().any(|d| d.g.is_none()) {
            return Err(Error::Config(
                "backbone topology without backbone dims".into(),
            ));
        }
        if self.topology.injections && self.topology.backbone != BackbonePlacement::PerBlock {
            return Err(Error::Config("injections need a per-block backbone".into()));
        }
        Ok(())
    }

    pub fn num_blocks(&self) -> usize {
        self.layers.len()
    }

    fn layer(&self, l: usize) -> &LayerDims {
        &self.layers[l - 1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub pass: Pass,
    pub shape: NetworkShape,
    /// Buffers present before the first instruction, written at time 0.
    pub initial: Vec<String>,
    pub buffers: BTreeMap<String, Buffer>,
    pub instructions: Vec<Instruction>,
}

impl Schedule {
    pub fn buffer(&self, id: &str) -> Result<&Buffer> {
        self.buffers
            .get(id)
            .ok_or_else(|| Error::Schedule(format!("undeclared buffer '{id}'")))
    }

    /// Check arity, read-after-write order and overwrite safety.
    pub fn validate(&self) -> Result<()> {
        let mut written: HashMap<&str, bool> = HashMap::new();
        for id in &self.initial {
            self.buffer(id)?;
            written.insert(id, true);
        }
        for (i, ins) in self.instructions.iter().enumerate() {
            if !ins.opcode.arity_ok(ins.inputs.len()) {
                return Err(Error::Schedule(format!(
                    "instruction {i}: {} takes a different number of inputs than {}",
                    ins.opcode,
                    ins.inputs.len()
                )));
            }
            for id in &ins.inputs {
                match written.get(id.as_str()) {
                    Some(true) => {}
                    Some(false) => {
                        return Err(Error::Schedule(format!(
                            "instruction {i} reads '{id}' after it was overwritten"
                        )))
                    }
                    None => {
                        return Err(Error::Schedule(format!(
                            "instruction {i} reads '{id}' before any write"
                        )))
                    }
                }
            }
            self.buffer(&ins.output)?;
            if let Some(t) = &ins.overwrite {
                if *t != ins.output {
                    if written.get(t.as_str()) != Some(&true) {
                        return Err(Error::Schedule(format!(
                            "instruction {i} overwrites dead buffer '{t}'"
                        )));
                    }
                    written.insert(t, false);
                }
            }
            written.insert(&ins.output, true);
        }
        Ok(())
    }

    /// One instruction per line: `OPCODE l=<layer> in=<a,b> out=<o> [overwrite=<t>]`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# initial {}", self.initial.join(","));
        for ins in &self.instructions {
            let _ = write!(
                s,
                "{} l={} in={} out={}",
                ins.opcode,
                ins.layer,
                ins.inputs.join(","),
                ins.output
            );
            if let Some(t) = &ins.overwrite {
                let _ = write!(s, " overwrite={t}");
            }
            s.push('\n');
        }
        s
    }
}

struct Builder<'a> {
    shape: &'a NetworkShape,
    initial: Vec<String>,
    buffers: BTreeMap<String, Buffer>,
    instructions: Vec<Instruction>,
}

fn storage_of(id: &str) -> Storage {
    if id.starts_with("inj.") || id.starts_with('q') {
        Storage::Static
    } else {
        Storage::Transient
    }
}

impl<'a> Builder<'a> {
    fn new(shape: &'a NetworkShape) -> Result<Self> {
        shape.validate()?;
        Ok(Self {
            shape,
            initial: Vec::new(),
            buffers: BTreeMap::new(),
            instructions: Vec::new(),
        })
    }

    fn declare(&mut self, id: &str, elements: usize) {
        self.buffers
            .entry(id.to_string())
            .or_insert_with(|| Buffer {
                id: id.to_string(),
                elements,
                storage: storage_of(id),
            });
    }

    fn init(&mut self, id: &str, elements: usize) {
        self.declare(id, elements);
        self.initial.push(id.to_string());
    }

    fn op(
        &mut self,
        opcode: Opcode,
        layer: usize,
        inputs: &[&str],
        output: &str,
        elements: usize,
        overwrite: Option<&str>,
    ) {
        self.declare(output, elements);
        self.instructions.push(Instruction {
            opcode,
            layer,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            output: output.to_string(),
            overwrite: overwrite.map(str::to_string),
        });
    }

    fn stream(&self, l: usize) -> usize {
        self.shape.layer(l).stream_elements()
    }

    fn finish(self, pass: Pass) -> Result<Schedule> {
        let s = Schedule {
            pass,
            shape: self.shape.clone(),
            initial: self.initial,
            buffers: self.buffers,
            instructions: self.instructions,
        };
        s.validate()?;
        Ok(s)
    }

    /// Returns the names of the final `(y1, y2)` streams.
    fn forward(&mut self) -> (String, String) {
        let shape = self.shape;
        let topo = shape.topology;
        let blocks = shape.num_blocks();
        self.init("bb.0", shape.image_elements);
        let mut stem_src = "bb.0".to_string();
        if topo.backbone == BackbonePlacement::Prefix {
            for l in 1..=blocks {
                self.backbone_layer(l);
            }
            stem_src = format!("bb.{blocks}");
        }
        let keep_src = topo.backbone == BackbonePlacement::PerBlock;
        self.op(Opcode::Pool, 0, &[&stem_src], "x1.1", self.stream(1), None);
        let last = (!keep_src).then_some(stem_src.as_str());
        self.op(Opcode::Pool, 0, &[&stem_src], "x2.1", self.stream(1), last);

        let (mut a, mut b) = ("x1.1".to_string(), "x2.1".to_string());
        for l in 1..=blocks {
            let n = self.stream(l);
            if topo.backbone == BackbonePlacement::PerBlock {
                self.backbone_layer(l);
                if topo.injections {
                    let bb = format!("bb.{l}");
                    let inj = format!("inj.{l}");
                    let x2i = format!("x2i.{l}");
                    self.op(Opcode::Pool, l, &[&bb], &inj, n, None);
                    self.op(Opcode::Add, l, &[&b, &inj], &x2i, n, Some(&b));
                    b = x2i;
                }
            }
            let (y1, y2) = (format!("y1.{l}"), format!("y2.{l}"));
            if topo.reversible {
                let (f1, f2) = (format!("f1.{l}"), format!("f2.{l}"));
                self.op(Opcode::ConvF1, l, &[&a], &f1, n, None);
                self.op(Opcode::Add, l, &[&b, &f1], &y2, n, Some(&b));
                self.op(Opcode::ConvF2, l, &[&y2], &f2, n, None);
                self.op(Opcode::Add, l, &[&a, &f2], &y1, n, Some(&a));
            } else {
                let (r1, r2) = (format!("r1.{l}"), format!("r2.{l}"));
                self.op(Opcode::ConvF1, l, &[&a], &r1, n, None);
                self.op(Opcode::ConvF2, l, &[&b], &r2, n, None);
                self.op(Opcode::Add, l, &[&b, &r1], &y2, n, None);
                self.op(Opcode::Add, l, &[&a, &r2], &y1, n, None);
            }
            a = y1;
            b = y2;
        }
        (a, b)
    }

    fn backbone_layer(&mut self, l: usize) {
        let prev = format!("bb.{}", l - 1);
        let cur = format!("bb.{l}");
        let n = self.shape.layer(l).backbone_elements();
        // The image feeds the stem as well; it dies here unless the backbone
        // runs first, in which case the stem reads the last layer instead.
        self.op(Opcode::ConvG, l, &[&prev], &cur, n, Some(&prev));
        self.op(Opcode::Relu, l, &[&cur], &cur, n, Some(&cur));
    }

    /// Name of block `l`'s first and second stored inputs in the forward pass.
    fn stored_inputs(&self, l: usize) -> (String, String) {
        let a = if l == 1 {
            "x1.1".to_string()
        } else {
            format!("y1.{}", l - 1)
        };
        let b = if self.shape.topology.injections {
            format!("x2i.{l}")
        } else if l == 1 {
            "x2.1".to_string()
        } else {
            format!("y2.{}", l - 1)
        };
        (a, b)
    }

    fn backward(&mut self, y1: &str, y2: &str, g1: &str, g2: &str) {
        let shape = self.shape;
        let blocks = shape.num_blocks();
        let (mut a, mut b) = (y1.to_string(), y2.to_string());
        let (mut g1, mut g2) = (g1.to_string(), g2.to_string());
        for l in (1..=blocks).rev() {
            let n = self.stream(l);
            let d = *shape.layer(l);
            let (q1, q2) = (format!("q1.{l}"), format!("q2.{l}"));
            let (w1, w2) = (
                d.weight_elements(Operator::F1),
                d.weight_elements(Operator::F2),
            );
            let (t1, t2, m, s) = (
                format!("bt1.{l}"),
                format!("bt2.{l}"),
                format!("m.{l}"),
                format!("s.{l}"),
            );
            if shape.topology.reversible {
                let (r1, r2) = (format!("br1.{l}"), format!("br2.{l}"));
                let (x1, x2) = (format!("bx1.{l}"), format!("bx2.{l}"));
                self.op(Opcode::RecomputeF2, l, &[&b], &r2, n, None);
                self.op(Opcode::Sub, l, &[&a, &r2], &x1, n, Some(&a));
                self.op(Opcode::WGradU2w, l, &[&b, &g1, &r2], &q2, w2, None);
                self.op(Opcode::RecomputeF1, l, &[&x1], &r1, n, None);
                self.op(Opcode::Sub, l, &[&b, &r1], &x2, n, Some(&b));
                self.op(Opcode::InvGradU2a, l, &[&g1, &r2], &t2, n, Some(&r2));
                self.op(Opcode::Add, l, &[&g2, &t2], &m, n, Some(&g2));
                self.op(Opcode::WGradU1w, l, &[&x1, &m, &r1], &q1, w1, None);
                self.op(Opcode::InvGradU1a, l, &[&m, &r1], &t1, n, Some(&r1));
                self.op(Opcode::Add, l, &[&g1, &t1], &s, n, Some(&g1));
                b = if shape.topology.injections && l > 1 {
                    let prev = format!("by2.{}", l - 1);
                    self.op(
                        Opcode::Sub,
                        l,
                        &[&x2, &format!("inj.{l}")],
                        &prev,
                        n,
                        Some(&x2),
                    );
                    prev
                } else {
                    x2
                };
                a = x1;
            } else {
                let (x1, x2) = self.stored_inputs(l);
                let (r1, r2) = (format!("r1.{l}"), format!("r2.{l}"));
                self.op(Opcode::WGradU1w, l, &[&x1, &g2, &r1], &q1, w1, None);
                self.op(Opcode::InvGradU1a, l, &[&g2, &r1], &t1, n, Some(&r1));
                self.op(Opcode::WGradU2w, l, &[&x2, &g1, &r2], &q2, w2, None);
                self.op(Opcode::InvGradU2a, l, &[&g1, &r2], &t2, n, Some(&r2));
                self.op(Opcode::Add, l, &[&g1, &t1], &s, n, Some(&g1));
                self.op(Opcode::Add, l, &[&g2, &t2], &m, n, Some(&g2));
            }
            g1 = s;
            g2 = m;
        }
    }
}

/// Forward pass of the branch, including the stem and the backbone layers.
pub fn forward_schedule(shape: &NetworkShape) -> Result<Schedule> {
    let mut b = Builder::new(shape)?;
    b.forward();
    b.finish(Pass::Forward)
}

/// Backward pass starting from the final streams and their loss gradients.
/// Reversible branches receive only those; the irreversible branch also
/// starts with every stored activation.
pub fn backward_schedule(shape: &NetworkShape) -> Result<Schedule> {
    let mut b = Builder::new(shape)?;
    let blocks = shape.num_blocks();
    let n = b.stream(blocks);
    let (y1, y2) = (format!("y1.{blocks}"), format!("y2.{blocks}"));
    let (g1, g2) = (format!("g1.{blocks}"), format!("g2.{blocks}"));
    if shape.topology.reversible {
        b.init(&y1, n);
        b.init(&y2, n);
        if shape.topology.injections {
            for l in 2..=blocks {
                b.init(&format!("inj.{l}"), b.stream(l));
            }
        }
    } else {
        for l in 1..=blocks {
            let (x1, x2) = b.stored_inputs(l);
            let n = b.stream(l);
            for id in [x1, x2, format!("r1.{l}"), format!("r2.{l}")] {
                b.init(&id, n);
            }
        }
    }
    b.init(&g1, n);
    b.init(&g2, n);
    b.backward(&y1, &y2, &g1, &g2);
    b.finish(Pass::Backward)
}

/// Forward pass, loss gradient and backward pass of one training step.
pub fn training_step_schedule(shape: &NetworkShape) -> Result<Schedule> {
    let mut b = Builder::new(shape)?;
    let (y1, y2) = b.forward();
    let blocks = shape.num_blocks();
    let n = b.stream(blocks);
    let (g1, g2) = (format!("g1.{blocks}"), format!("g2.{blocks}"));
    b.op(Opcode::HeadGrad, blocks, &[&y1, &y2], &g1, n, None);
    b.op(Opcode::HeadGrad, blocks, &[&y1, &y2], &g2, n, None);
    b.backward(&y1, &y2, &g1, &g2);
    b.finish(Pass::Step)
}

pub fn emit_forward_schedule(spec: &DuDnnSpec, batch: usize) -> Result<Schedule> {
    forward_schedule(&NetworkShape::from_spec(spec, batch))
}

pub fn emit_backward_schedule(spec: &DuDnnSpec, batch: usize) -> Result<Schedule> {
    backward_schedule(&NetworkShape::from_spec(spec, batch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheduler::dims::ConvDims;

    pub(crate) fn shape(blocks: usize, variant: Variant) -> NetworkShape {
        let f = ConvDims {
            c_in: 2,
            c_out: 2,
            height: 2,
            width: 2,
            kernel: 3,
        };
        let g = ConvDims {
            c_in: 1,
            c_out: 2,
            height: 8,
            width: 8,
            kernel: 3,
        };
        let topology = Topology::of(variant);
        NetworkShape {
            topology,
            layers: (0..blocks)
                .map(|_| LayerDims {
                    batch: 1,
                    g: (topology.backbone != BackbonePlacement::None).then_some(g),
                    f1: f,
                    f2: f,
                })
                .collect(),
            image_elements: 64,
        }
    }

    #[test]
    fn every_variant_emits_valid_schedules() {
        for v in Variant::ALL {
            for blocks in 1..=4 {
                let s = shape(blocks, v);
                forward_schedule(&s).unwrap();
                backward_schedule(&s).unwrap();
                training_step_schedule(&s).unwrap();
            }
        }
    }

    #[test]
    fn validation_catches_reads_after_overwrite() {
        let mut s = forward_schedule(&shape(2, Variant::DuDnn)).unwrap();
        let i = s
            .instructions
            .iter()
            .position(|i| i.output == "y1.1")
            .unwrap();
        // y1.1 replaced x1.1; reading x1.1 again is a bug.
        let mut bad = s.instructions[i].clone();
        bad.inputs = vec!["x1.1".into()];
        bad.opcode = Opcode::Relu;
        bad.overwrite = None;
        bad.output = "f1.1".into();
        s.instructions.insert(i + 1, bad);
        assert!(s.validate().is_err());
    }

    #[test]
    fn validation_catches_read_before_write() {
        let mut s = forward_schedule(&shape(1, Variant::DuDnn)).unwrap();
        let i = s
            .instructions
            .iter()
            .position(|i| i.output == "y2.1")
            .unwrap();
        let moved = s.instructions.remove(i);
        s.instructions.insert(0, moved);
        assert!(s.validate().is_err());
    }

    #[test]
    fn opcode_names_round_trip() {
        for op in Opcode::ALL {
            assert_eq!(op.mnemonic().parse::<Opcode>().unwrap(), op);
        }
        assert!("NOP".parse::<Opcode>().is_err());
    }

    #[test]
    fn static_buffers_are_injections_and_weight_gradients() {
        let s = training_step_schedule(&shape(2, Variant::DuDnn)).unwrap();
        let statics: Vec<_> = s
            .buffers
            .values()
            .filter(|b| b.storage == Storage::Static)
            .map(|b| b.id.as_str())
            .collect();
        assert_eq!(statics, ["inj.1", "inj.2", "q1.1", "q1.2", "q2.1", "q2.2"]);
    }
}
