//! Residual functions and the reversible / irreversible two-stream blocks.

use serde::{Deserialize, Serialize};

use super::Precision;
use crate::error::{Error, Result};
use crate::tensor::{conv2d, conv2d_input_grad, conv2d_weight_grad, Padding, Tensor};

/// Per-output-channel affine map left over after folding batch normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldedNorm {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

/// `relu(norm(conv(x, weight)))` with stride 1 and same padding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualFuncParams {
    pub weight: Tensor,
    pub norm: Option<FoldedNorm>,
    pub padding: Padding,
}

impl ResidualFuncParams {
    /// Branch residual function: conv + ReLU, no normalization.
    pub fn branch(weight: Tensor) -> Self {
        Self {
            weight,
            norm: None,
            padding: Padding::Zero,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[2]
    }

    /// `norm(conv(x, weight))` before the ReLU, unquantized.
    pub fn pre_activation(&self, x: &Tensor, precision: &Precision) -> Result<Tensor> {
        let w = precision.weight(&self.weight)?;
        let mut z = conv2d(x, &w, self.padding)?;
        if let Some(norm) = &self.norm {
            let [b, c, h, wd] = z.shape();
            if norm.scale.len() != c || norm.shift.len() != c {
                return Err(Error::Shape(format!(
                    "norm has {} channels, conv has {c}",
                    norm.scale.len()
                )));
            }
            let plane = h * wd;
            for n in 0..b {
                for ch in 0..c {
                    let start = (n * c + ch) * plane;
                    for v in &mut z.data_mut()[start..start + plane] {
                        *v = *v * norm.scale[ch] + norm.shift[ch];
                    }
                }
            }
        }
        Ok(z)
    }

    pub fn apply(&self, x: &Tensor, precision: &Precision) -> Result<Tensor> {
        precision.activation(self.pre_activation(x, precision)?.relu())
    }

    /// Input gradient of the conv, given the gradient at the pre-activation.
    pub fn input_grad(&self, pre_grad: &Tensor, precision: &Precision) -> Result<Tensor> {
        if self.norm.is_some() || self.padding != Padding::Zero {
            return Err(Error::Config(
                "gradients are only defined for branch residual functions".into(),
            ));
        }
        conv2d_input_grad(pre_grad, &precision.weight(&self.weight)?)
    }

    pub fn weight_grad(&self, input: &Tensor, pre_grad: &Tensor) -> Result<Tensor> {
        conv2d_weight_grad(input, pre_grad, self.kernel_size())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReversibleBlockParams {
    pub f1: ResidualFuncParams,
    pub f2: ResidualFuncParams,
}

impl ReversibleBlockParams {
    pub fn new(f1: ResidualFuncParams, f2: ResidualFuncParams) -> Result<Self> {
        let c = f1.in_channels();
        for f in [&f1, &f2] {
            if f.in_channels() != c || f.out_channels() != c {
                return Err(Error::Shape(format!(
                    "residual functions must map {c} channels to {c}, got {}→{}",
                    f.in_channels(),
                    f.out_channels()
                )));
            }
        }
        Ok(Self { f1, f2 })
    }

    pub fn channels(&self) -> usize {
        self.f1.in_channels()
    }

    pub fn param_count(&self) -> usize {
        self.f1.weight.len() + self.f2.weight.len()
    }
}

/// `s` and `m` are the gradients reaching the block's `x1` and `x2` inputs;
/// `q1`, `q2` are the weight gradients of F1 and F2.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub s: Tensor,
    pub m: Tensor,
    pub q1: Tensor,
    pub q2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockBackward {
    pub x1: Tensor,
    pub x2: Tensor,
    pub grads: GradientBundle,
}

fn check_pair(a: &Tensor, b: &Tensor, channels: usize) -> Result<()> {
    if a.shape() != b.shape() || a.channels() != channels {
        return Err(Error::Shape(format!(
            "stream shapes {:?} and {:?} do not fit a {channels}-channel block",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `y2 = x2 + F1(x1)`, then `y1 = x1 + F2(y2)`.
pub fn forward_block(
    x1: &Tensor,
    x2: &Tensor,
    params: &ReversibleBlockParams,
    precision: &Precision,
) -> Result<(Tensor, Tensor)> {
    check_pair(x1, x2, params.channels())?;
    let f1 = params.f1.apply(x1, precision)?;
    let y2 = precision.activation(x2.add(&f1)?)?;
    let f2 = params.f2.apply(&y2, precision)?;
    let y1 = precision.activation(x1.add(&f2)?)?;
    Ok((y1, y2))
}

/// `x1 = y1 - F2(y2)`, then `x2 = y2 - F1(x1)`.
pub fn invert_block(
    y1: &Tensor,
    y2: &Tensor,
    params: &ReversibleBlockParams,
    precision: &Precision,
) -> Result<(Tensor, Tensor)> {
    check_pair(y1, y2, params.channels())?;
    let r2 = params.f2.apply(y2, precision)?;
    let x1 = precision.activation(y1.sub(&r2)?)?;
    let r1 = params.f1.apply(&x1, precision)?;
    let x2 = precision.activation(y2.sub(&r1)?)?;
    Ok((x1, x2))
}

/// Backward pass of one reversible block from its outputs alone. The inputs
/// are reconstructed on the way and returned so the caller can continue with
/// the previous block.
pub fn backward_block(
    g1: &Tensor,
    g2: &Tensor,
    y1: &Tensor,
    y2: &Tensor,
    params: &ReversibleBlockParams,
    precision: &Precision,
) -> Result<BlockBackward> {
    check_pair(y1, y2, params.channels())?;
    check_pair(g1, g2, params.channels())?;
    if g1.shape() != y1.shape() {
        return Err(Error::Shape(format!(
            "gradient {:?} vs activation {:?}",
            g1.shape(),
            y1.shape()
        )));
    }
    let r2 = params.f2.apply(y2, precision)?;
    let x1 = precision.activation(y1.sub(&r2)?)?;
    let d2 = Tensor::relu_backward(g1, &r2)?;
    let q2 = precision.weight_gradient(params.f2.weight_grad(y2, &d2)?)?;
    let m = precision.gradient(g2.add(&params.f2.input_grad(&d2, precision)?)?)?;

    let r1 = params.f1.apply(&x1, precision)?;
    let x2 = precision.activation(y2.sub(&r1)?)?;
    let d1 = Tensor::relu_backward(&m, &r1)?;
    let q1 = precision.weight_gradient(params.f1.weight_grad(&x1, &d1)?)?;
    let s = precision.gradient(g1.add(&params.f1.input_grad(&d1, precision)?)?)?;

    Ok(BlockBackward {
        x1,
        x2,
        grads: GradientBundle { s, m, q1, q2 },
    })
}

/// Activations an irreversible block has to keep for its backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct IrreversibleStore {
    pub x1: Tensor,
    pub x2: Tensor,
    pub r1: Tensor,
    pub r2: Tensor,
}

impl IrreversibleStore {
    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.x1, &self.x2, &self.r1, &self.r2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.x1, &mut self.x2, &mut self.r1, &mut self.r2]
    }
}

/// Parallel residual block with the same parameters as a reversible one:
/// `y2 = x2 + F1(x1)`, `y1 = x1 + F2(x2)`. Not invertible from its outputs.
pub fn irreversible_forward(
    x1: &Tensor,
    x2: &Tensor,
    params: &ReversibleBlockParams,
    precision: &Precision,
) -> Result<(Tensor, Tensor, IrreversibleStore)> {
    check_pair(x1, x2, params.channels())?;
    let r1 = params.f1.apply(x1, precision)?;
    let r2 = params.f2.apply(x2, precision)?;
    let y2 = precision.activation(x2.add(&r1)?)?;
    let y1 = precision.activation(x1.add(&r2)?)?;
    let store = IrreversibleStore {
        x1: x1.clone(),
        x2: x2.clone(),
        r1,
        r2,
    };
    Ok((y1, y2, store))
}

/// Returns `(dL/dx1, dL/dx2, q1, q2)` from stored activations.
pub fn irreversible_backward(
    g1: &Tensor,
    g2: &Tensor,
    store: &IrreversibleStore,
    params: &ReversibleBlockParams,
    precision: &Precision,
) -> Result<GradientBundle> {
    check_pair(g1, g2, params.channels())?;
    let d1 = Tensor::relu_backward(g2, &store.r1)?;
    let d2 = Tensor::relu_backward(g1, &store.r2)?;
    let q1 = precision.weight_gradient(params.f1.weight_grad(&store.x1, &d1)?)?;
    let q2 = precision.weight_gradient(params.f2.weight_grad(&store.x2, &d2)?)?;
    let s = precision.gradient(g1.add(&params.f1.input_grad(&d1, precision)?)?)?;
    let m = precision.gradient(g2.add(&params.f2.input_grad(&d2, precision)?)?)?;
    Ok(GradientBundle { s, m, q1, q2 })
}
