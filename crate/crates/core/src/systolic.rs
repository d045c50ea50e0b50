//! Cycle and energy model of a BFP systolic array in which every processing
//! element takes the dot product of two shared-exponent groups per cycle.

use serde::{Deserialize, Serialize};

use crate::bfp::BfpGroup;
use crate::error::{Error, Result};
use crate::scheduler::dims::ConvDims;
use crate::scheduler::schedule::Opcode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dataflow {
    /// Weights held in the PEs, activations stream left to right.
    #[default]
    WsForward,
    /// Weights held transposed, gradients stream right to left.
    WsBackwardTransposed,
    /// Outputs accumulate in place and drain left when done.
    AccumStationary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArrayConfig {
    pub rows: usize,
    pub cols: usize,
    pub clock_hz: f64,
    pub dataflow: Dataflow,
    pub group_size: usize,
}

impl Default for ArrayConfig {
    fn default() -> Self {
        Self {
            rows: 6,
            cols: 6,
            clock_hz: 5e8,
            dataflow: Dataflow::WsForward,
            group_size: 9,
        }
    }
}

impl ArrayConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.group_size == 0 {
            return Err(Error::Config(
                "array rows, cols and group size must be positive".into(),
            ));
        }
        if !(self.clock_hz > 0.0 && self.clock_hz.is_finite()) {
            return Err(Error::Config("clock must be positive".into()));
        }
        Ok(())
    }

    /// Group lane-MACs completed per cycle with every PE busy.
    pub fn macs_per_cycle(&self) -> u64 {
        (self.rows * self.cols * self.group_size) as u64
    }

    pub fn with_dataflow(mut self, dataflow: Dataflow) -> Self {
        self.dataflow = dataflow;
        self
    }
}

/// MACs per second.
pub fn throughput(cfg: &ArrayConfig) -> f64 {
    cfg.macs_per_cycle() as f64 * cfg.clock_hz
}

/// `[M, K] × [K, N]` with `K` counted in groups.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatmulJob {
    pub m: usize,
    pub k_groups: usize,
    pub n: usize,
    /// Fraction of activation groups that are entirely zero.
    #[serde(default)]
    pub zero_group_fraction: f64,
    /// Fraction of remaining lanes whose mantissa is zero in either operand.
    #[serde(default)]
    pub zero_mantissa_fraction: f64,
}

impl MatmulJob {
    pub fn dense(m: usize, k_groups: usize, n: usize) -> Self {
        Self {
            m,
            k_groups,
            n,
            zero_group_fraction: 0.0,
            zero_mantissa_fraction: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.k_groups == 0 || self.n == 0 {
            return Err(Error::Config(format!(
                "matmul dims must be positive: {self:?}"
            )));
        }
        for f in [self.zero_group_fraction, self.zero_mantissa_fraction] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!(
                    "sparsity fraction {f} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    pub fn group_ops(&self) -> u64 {
        (self.m * self.k_groups * self.n) as u64
    }

    pub fn lane_ops(&self, group_size: usize) -> u64 {
        self.group_ops() * group_size as u64
    }
}

/// The matrix product behind one convolution-type instruction (im2col view).
pub fn conv_job(conv: &ConvDims, batch: usize, op: Opcode, group_size: usize) -> Result<MatmulJob> {
    let pixels = batch * conv.height * conv.width;
    let taps = conv.kernel * conv.kernel;
    let groups = |len: usize| len.div_ceil(group_size.max(1));
    let (m, k, n) = match op {
        Opcode::ConvG
        | Opcode::ConvF1
        | Opcode::ConvF2
        | Opcode::RecomputeF1
        | Opcode::RecomputeF2 => (pixels, groups(conv.c_in * taps), conv.c_out),
        Opcode::InvGradU1a | Opcode::InvGradU2a => (pixels, groups(conv.c_out * taps), conv.c_in),
        Opcode::WGradU1w | Opcode::WGradU2w => (conv.c_out, groups(pixels), conv.c_in * taps),
        other => return Err(Error::Config(format!("{other} is not a matrix product"))),
    };
    let job = MatmulJob::dense(m, k, n);
    job.validate()?;
    Ok(job)
}

/// `ceil(MACs / (rows·cols·group))`.
pub fn analytical_cycles(cfg: &ArrayConfig, job: &MatmulJob) -> Result<u64> {
    cfg.validate()?;
    job.validate()?;
    Ok(job.lane_ops(cfg.group_size).div_ceil(cfg.macs_per_cycle()))
}

/// Tiled execution with weight preload, skewed fill and drain. Partial tiles
/// occupy the whole array.
pub fn detailed_cycles(cfg: &ArrayConfig, job: &MatmulJob) -> Result<u64> {
    cfg.validate()?;
    job.validate()?;
    let (r, c) = (cfg.rows as u64, cfg.cols as u64);
    let (m, k, n) = (job.m as u64, job.k_groups as u64, job.n as u64);
    let skew = r + c - 2;
    Ok(match cfg.dataflow {
        Dataflow::WsForward | Dataflow::WsBackwardTransposed => {
            k.div_ceil(r) * n.div_ceil(c) * (r + m + skew)
        }
        Dataflow::AccumStationary => m.div_ceil(r) * n.div_ceil(c) * (k + skew + c),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PeStats {
    /// Lanes that went through the mantissa multiplier.
    pub macs_executed: u64,
    /// Lanes skipped because one operand group was entirely zero.
    pub zero_group_skips: u64,
    /// Lanes whose multiplier was gated on a zero mantissa.
    pub mantissa_gates: u64,
    /// Output register writes, one per group operation.
    pub register_writes: u64,
}

impl PeStats {
    pub fn lane_ops(&self) -> u64 {
        self.macs_executed + self.zero_group_skips + self.mantissa_gates
    }

    pub fn merge(&mut self, other: &PeStats) {
        self.macs_executed += other.macs_executed;
        self.zero_group_skips += other.zero_group_skips;
        self.mantissa_gates += other.mantissa_gates;
        self.register_writes += other.register_writes;
    }
}

/// Apply both gating checkpoints to aligned operand group streams.
pub fn gating_stats(a: &[BfpGroup], b: &[BfpGroup]) -> Result<PeStats> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "operand streams of {} and {} groups",
            a.len(),
            b.len()
        )));
    }
    let mut s = PeStats::default();
    for (x, y) in a.iter().zip(b) {
        if x.mantissas.len() != y.mantissas.len() {
            return Err(Error::Shape("operand groups differ in size".into()));
        }
        let lanes = x.mantissas.len() as u64;
        s.register_writes += 1;
        if x.is_zero() || y.is_zero() {
            s.zero_group_skips += lanes;
            continue;
        }
        for (p, q) in x.mantissas.iter().zip(&y.mantissas) {
            if *p == 0 || *q == 0 {
                s.mantissa_gates += 1;
            } else {
                s.macs_executed += 1;
            }
        }
    }
    Ok(s)
}

/// Expected counts for a job described by its sparsity fractions.
pub fn expected_stats(cfg: &ArrayConfig, job: &MatmulJob) -> Result<PeStats> {
    job.validate()?;
    let lanes = job.lane_ops(cfg.group_size);
    let skips = (lanes as f64 * job.zero_group_fraction).round() as u64;
    let gates = ((lanes - skips) as f64 * job.zero_mantissa_fraction).round() as u64;
    Ok(PeStats {
        macs_executed: lanes - skips - gates,
        zero_group_skips: skips,
        mantissa_gates: gates,
        register_writes: job.group_ops(),
    })
}

/// Per-lane energies in relative units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyConstants {
    pub active: f64,
    pub gated: f64,
    pub skipped: f64,
    pub register_write: f64,
}

impl Default for EnergyConstants {
    fn default() -> Self {
        Self {
            active: 1.0,
            gated: 0.25,
            skipped: 0.05,
            register_write: 0.02,
        }
    }
}

impl EnergyConstants {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.active, self.gated, self.skipped, self.register_write]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0);
        if !ok || !(self.skipped <= self.gated && self.gated <= self.active) {
            return Err(Error::Config(
                "energy constants need 0 <= skipped <= gated <= active".into(),
            ));
        }
        Ok(())
    }
}

pub fn job_energy(stats: &PeStats, k: &EnergyConstants) -> f64 {
    stats.macs_executed as f64 * k.active
        + stats.mantissa_gates as f64 * k.gated
        + stats.zero_group_skips as f64 * k.skipped
        + stats.register_writes as f64 * k.register_write
}

pub mod grid {
    //! Register-level simulation of the PE grid, one cycle at a time.

    use super::{ArrayConfig, Dataflow};
    use crate::error::{Error, Result};

    pub struct GridRun {
        /// Row-major `[M, N]` product.
        pub output: Vec<f64>,
        pub cycles: u64,
    }

    fn group_dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Multiply row-major `a` (`[M, K·g]`) by `b` (`[K·g, N]`), `g` the group size.
    pub fn simulate_matmul(
        cfg: &ArrayConfig,
        m: usize,
        k_groups: usize,
        n: usize,
        a: &[f64],
        b: &[f64],
    ) -> Result<GridRun> {
        cfg.validate()?;
        let g = cfg.group_size;
        let kl = k_groups * g;
        if a.len() != m * kl || b.len() != kl * n || m == 0 || n == 0 || k_groups == 0 {
            return Err(Error::Shape("operand sizes do not match the job".into()));
        }
        let a_group = |row: usize, kg: usize| -> Vec<f64> {
            a[row * kl + kg * g..row * kl + (kg + 1) * g].to_vec()
        };
        let b_group = |kg: usize, col: usize| -> Vec<f64> {
            (0..g).map(|i| b[(kg * g + i) * n + col]).collect()
        };
        let (rows, cols) = (cfg.rows, cfg.cols);
        let mut output = vec![0.0; m * n];
        let mut cycles = 0u64;
        match cfg.dataflow {
            Dataflow::WsForward | Dataflow::WsBackwardTransposed => {
                let reversed = cfg.dataflow == Dataflow::WsBackwardTransposed;
                for kt in 0..k_groups.div_ceil(rows) {
                    for nt in 0..n.div_ceil(cols) {
                        // Preload: one row of weight groups shifts in per cycle.
                        let mut weights: Vec<Vec<Option<Vec<f64>>>> = vec![vec![None; cols]; rows];
                        for step in 0..rows {
                            for r in (1..=step.min(rows - 1)).rev() {
                                weights[r] = weights[r - 1].clone();
                            }
                            let src = rows - 1 - step;
                            weights[0] = (0..cols)
                                .map(|c| {
                                    let (kg, col) = (kt * rows + src, nt * cols + c);
                                    (kg < k_groups && col < n).then(|| b_group(kg, col))
                                })
                                .collect();
                            cycles += 1;
                        }
                        // Stream: activations move one PE sideways, partial sums one PE down per cycle.
                        type Act = Option<(usize, Vec<f64>)>;
                        let mut act: Vec<Vec<Act>> = vec![vec![None; cols]; rows];
                        let mut psum: Vec<Vec<Option<(usize, f64)>>> = vec![vec![None; cols]; rows];
                        let mut collected = 0;
                        let mut t = 0usize;
                        while collected < m * cols {
                            let mut next_act: Vec<Vec<Act>> = vec![vec![None; cols]; rows];
                            let mut next_psum = vec![vec![None; cols]; rows];
                            for r in 0..rows {
                                for step in 0..cols {
                                    let c = if reversed { cols - 1 - step } else { step };
                                    next_act[r][c] = if step == 0 {
                                        (t >= r && t - r < m).then(|| {
                                            let row = t - r;
                                            let kg = kt * rows + r;
                                            (
                                                row,
                                                if kg < k_groups {
                                                    a_group(row, kg)
                                                } else {
                                                    vec![0.0; g]
                                                },
                                            )
                                        })
                                    } else {
                                        let from = if reversed { c + 1 } else { c - 1 };
                                        act[r][from].clone()
                                    };
                                    if let Some((row, x)) = &next_act[r][c] {
                                        let above = if r == 0 {
                                            0.0
                                        } else {
                                            match psum[r - 1][c] {
                                                Some((rr, v)) if rr == *row => v,
                                                _ => {
                                                    return Err(Error::Trace(
                                                        "partial sums out of step".into(),
                                                    ))
                                                }
                                            }
                                        };
                                        let w = weights[r][c]
                                            .as_deref()
                                            .map_or(0.0, |w| group_dot(x, w));
                                        next_psum[r][c] = Some((*row, above + w));
                                    }
                                }
                            }
                            act = next_act;
                            psum = next_psum;
                            for c in 0..cols {
                                if let Some((row, v)) = psum[rows - 1][c] {
                                    let col = nt * cols + c;
                                    if col < n {
                                        output[row * n + col] += v;
                                    }
                                    collected += 1;
                                }
                            }
                            t += 1;
                            cycles += 1;
                        }
                    }
                }
            }
            Dataflow::AccumStationary => {
                for mt in 0..m.div_ceil(rows) {
                    for nt in 0..n.div_ceil(cols) {
                        let mut acc = vec![vec![0.0; cols]; rows];
                        let mut left: Vec<Vec<Option<Vec<f64>>>> = vec![vec![None; cols]; rows];
                        let mut top: Vec<Vec<Option<Vec<f64>>>> = vec![vec![None; cols]; rows];
                        let mut done = vec![vec![0usize; cols]; rows];
                        let mut t = 0usize;
                        while done.iter().flatten().any(|&d| d < k_groups) {
                            let mut nl = vec![vec![None; cols]; rows];
                            let mut nt_ = vec![vec![None; cols]; rows];
                            for r in 0..rows {
                                for c in 0..cols {
                                    nl[r][c] = if c == 0 {
                                        (t >= r && t - r < k_groups).then(|| {
                                            let row = mt * rows + r;
                                            if row < m {
                                                a_group(row, t - r)
                                            } else {
                                                vec![0.0; g]
                                            }
                                        })
                                    } else {
                                        left[r][c - 1].clone()
                                    };
                                    nt_[r][c] = if r == 0 {
                                        (t >= c && t - c < k_groups).then(|| {
                                            let col = nt * cols + c;
                                            if col < n {
                                                b_group(t - c, col)
                                            } else {
                                                vec![0.0; g]
                                            }
                                        })
                                    } else {
                                        top[r - 1][c].clone()
                                    };
                                    if let (Some(x), Some(y)) = (&nl[r][c], &nt_[r][c]) {
                                        acc[r][c] += group_dot(x, y);
                                        done[r][c] += 1;
                                    }
                                }
                            }
                            left = nl;
                            top = nt_;
                            t += 1;
                            cycles += 1;
                        }
                        // Drain: accumulators shift left and leave column 0 one per cycle.
                        for step in 0..cols {
                            for (r, row) in acc.iter_mut().enumerate() {
                                let out = row.remove(0);
                                row.push(0.0);
                                let (orow, ocol) = (mt * rows + r, nt * cols + step);
                                if orow < m && ocol < n {
                                    output[orow * n + ocol] = out;
                                }
                            }
                            cycles += 1;
                        }
                    }
                }
            }
        }
        Ok(GridRun { output, cycles })
    }
}
