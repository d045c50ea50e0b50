//! Duplex networks: a frozen backbone feeding pooled features into a
//! trainable reversible branch, plus the baseline variants used for comparison.

pub mod block;
pub mod checkpoint;
pub mod data;
pub mod model;
pub mod network;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::bfp::{fake_quantize, BfpConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use block::{
    backward_block, forward_block, invert_block, irreversible_backward, irreversible_forward,
    BlockBackward, FoldedNorm, GradientBundle, IrreversibleStore, ResidualFuncParams,
    ReversibleBlockParams,
};
pub use model::{build_variant, fold_batchnorm, DuDnnSpec, Head, ModelConfig, Variant};
pub use network::{
    dudnn_backward, dudnn_forward, head_backward, softmax_cross_entropy, HeadGradients,
    NetworkGrads, RetainedState,
};
pub use train::{train, FaultConfig, LrSchedule, TrainConfig, TrainOutcome, TrajectoryPoint};

/// Arithmetic used by the engine. In BFP mode activations are grouped along
/// channels and weights along their flattened `C_in·k·k` contraction axis.
/// Activation gradients are pre-scaled by `2^grad_scale_log2` before grouping
/// so that their small magnitudes land inside the shared-exponent window;
/// weight gradients are large enough to be grouped as they are.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", deny_unknown_fields)]
pub enum Precision {
    Exact,
    Bfp {
        config: BfpConfig,
        grad_scale_log2: i32,
    },
}

impl Default for Precision {
    fn default() -> Self {
        Precision::Bfp {
            config: BfpConfig::default(),
            grad_scale_log2: 12,
        }
    }
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Run(format!("non-finite values in {what}")))
    }
}

impl Precision {
    pub fn is_exact(&self) -> bool {
        matches!(self, Precision::Exact)
    }

    pub fn activation(&self, mut t: Tensor) -> Result<Tensor> {
        if let Precision::Bfp { config, .. } = self {
            check_finite(&t, "activation")?;
            let shape = t.shape();
            fake_quantize(t.data_mut(), &shape, 1, config)?;
        }
        Ok(t)
    }

    pub fn gradient(&self, mut t: Tensor) -> Result<Tensor> {
        if let Precision::Bfp {
            config,
            grad_scale_log2,
        } = self
        {
            check_finite(&t, "gradient")?;
            let up = crate::bfp::pow2(*grad_scale_log2);
            let down = crate::bfp::pow2(-*grad_scale_log2);
            t.data_mut().iter_mut().for_each(|v| *v *= up);
            let shape = t.shape();
            fake_quantize(t.data_mut(), &shape, 1, config)?;
            t.data_mut().iter_mut().for_each(|v| *v *= down);
        }
        Ok(t)
    }

    pub fn weight_gradient(&self, mut t: Tensor) -> Result<Tensor> {
        if let Precision::Bfp { config, .. } = self {
            check_finite(&t, "weight gradient")?;
            let [cout, cin, kh, kw] = t.shape();
            fake_quantize(t.data_mut(), &[cout, cin * kh * kw], 1, config)?;
        }
        Ok(t)
    }

    pub fn weight(&self, w: &Tensor) -> Result<Tensor> {
        let mut w = w.clone();
        if let Precision::Bfp { config, .. } = self {
            check_finite(&w, "weight")?;
            let [cout, cin, kh, kw] = w.shape();
            fake_quantize(w.data_mut(), &[cout, cin * kh * kw], 1, config)?;
        }
        Ok(w)
    }
}
