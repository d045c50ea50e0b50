//! Per-layer convolution dimensions, MAC counts and operator latencies.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::duplex::model::DuDnnSpec;
use crate::error::{Error, Result};

/// Exact time in abstract units (cycles for hardware-derived models).
pub type Time = Ratio<i128>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvDims {
    pub c_in: usize,
    pub c_out: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl ConvDims {
    fn validate(&self, what: &str) -> Result<()> {
        if [self.c_in, self.c_out, self.height, self.width, self.kernel].contains(&0) {
            return Err(Error::Config(format!(
                "{what} dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Dimensions of block `l`: its backbone layer G (absent for branch-only
/// models) and the two branch residual functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    pub batch: usize,
    pub g: Option<ConvDims>,
    pub f1: ConvDims,
    pub f2: ConvDims,
}

impl LayerDims {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if let Some(g) = &self.g {
            g.validate("G")?;
        }
        self.f1.validate("F1")?;
        self.f2.validate("F2")
    }

    pub fn conv(&self, op: Operator) -> Option<&ConvDims> {
        match op {
            Operator::G => self.g.as_ref(),
            Operator::F1 => Some(&self.f1),
            Operator::F2 => Some(&self.f2),
        }
    }

    /// Elements of one branch stream tensor at this block.
    pub fn stream_elements(&self) -> usize {
        self.batch * self.f1.c_in * self.f1.height * self.f1.width
    }

    pub fn backbone_elements(&self) -> usize {
        self.g
            .map_or(0, |g| self.batch * g.c_out * g.height * g.width)
    }

    pub fn weight_elements(&self, op: Operator) -> usize {
        self.conv(op)
            .map_or(0, |c| c.c_out * c.c_in * c.kernel * c.kernel)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Operator {
    G,
    F1,
    F2,
}

/// Whether MAC counts include the output-channel factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MacConvention {
    /// `B·C_in·W·H·k²`
    #[default]
    PerOutputChannel,
    /// `B·C_in·C_out·W·H·k²`
    Full,
}

/// MAC count of one forward convolution; zero when the operator is absent.
pub fn op_workload(dims: &LayerDims, which: Operator, convention: MacConvention) -> u64 {
    let Some(c) = dims.conv(which) else { return 0 };
    let base = (dims.batch * c.c_in * c.width * c.height * c.kernel * c.kernel) as u64;
    match convention {
        MacConvention::PerOutputChannel => base,
        MacConvention::Full => base * c.c_out as u64,
    }
}

/// Block dimensions of a model at a given batch size.
pub fn layer_dims_from_spec(spec: &DuDnnSpec, batch: usize) -> Vec<LayerDims> {
    let cfg = &spec.config;
    let side = cfg.branch_side();
    let k = cfg.kernel_size;
    (0..spec.num_blocks())
        .map(|l| {
            let g = spec.backbone.get(l).map(|g| ConvDims {
                c_in: g.in_channels(),
                c_out: g.out_channels(),
                height: cfg.image_size,
                width: cfg.image_size,
                kernel: g.kernel_size(),
            });
            let f = ConvDims {
                c_in: cfg.branch_channels,
                c_out: cfg.branch_channels,
                height: side,
                width: side,
                kernel: k,
            };
            LayerDims {
                batch,
                g,
                f1: f,
                f2: f,
            }
        })
        .collect()
}
