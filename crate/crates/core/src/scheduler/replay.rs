//! Execute a schedule on real tensors with the engine's exact arithmetic.
//! Overwritten buffers are dropped, so a schedule that reads dead data fails.

use std::collections::HashMap;

use super::schedule::{Opcode, Schedule};
use crate::duplex::model::DuDnnSpec;
use crate::duplex::network::head_backward;
use crate::duplex::Precision;
use crate::error::{Error, Result};
use crate::tensor::{avg_pool, channel_map, global_avg_pool, Tensor};

/// Run `schedule` against `spec`. `initial` must hold every initial buffer.
/// A training-step schedule also needs the loss gradient for its head.
pub fn replay(
    schedule: &Schedule,
    spec: &DuDnnSpec,
    mut initial: HashMap<String, Tensor>,
    loss_grad: Option<&Tensor>,
) -> Result<HashMap<String, Tensor>> {
    schedule.validate()?;
    if schedule.shape.num_blocks() != spec.num_blocks() {
        return Err(Error::Config("schedule and model differ in depth".into()));
    }
    let mut live: HashMap<String, Tensor> = HashMap::new();
    for id in &schedule.initial {
        let t = initial
            .remove(id)
            .ok_or_else(|| Error::Config(format!("missing initial buffer '{id}'")))?;
        live.insert(id.clone(), t);
    }
    let exact = Precision::Exact;
    let cfg = &spec.config;
    for (i, ins) in schedule.instructions.iter().enumerate() {
        let get = |k: usize| -> Result<&Tensor> {
            live.get(&ins.inputs[k]).ok_or_else(|| {
                Error::Schedule(format!(
                    "instruction {i} reads dead buffer '{}'",
                    ins.inputs[k]
                ))
            })
        };
        let block = || {
            spec.blocks.get(ins.layer.wrapping_sub(1)).ok_or_else(|| {
                Error::Schedule(format!("instruction {i} names block {}", ins.layer))
            })
        };
        let out = match ins.opcode {
            Opcode::ConvG => {
                let g = spec
                    .backbone
                    .get(ins.layer.wrapping_sub(1))
                    .ok_or_else(|| Error::Schedule(format!("no backbone layer {}", ins.layer)))?;
                g.pre_activation(get(0)?, &exact)?
            }
            Opcode::Relu => get(0)?.relu(),
            Opcode::Pool if ins.layer == 0 => {
                let stem = channel_map(&avg_pool(get(0)?, cfg.pool_factor)?, &spec.stem)?;
                let (x1, x2) = stem.split_channels(cfg.branch_channels)?;
                match ins.output.as_str() {
                    "x1.1" => x1,
                    "x2.1" => x2,
                    other => return Err(Error::Schedule(format!("stem cannot produce '{other}'"))),
                }
            }
            Opcode::Pool => {
                let proj = spec
                    .injections
                    .get(ins.layer - 1)
                    .and_then(|p| p.as_ref())
                    .ok_or_else(|| {
                        Error::Schedule(format!("block {} has no injection", ins.layer))
                    })?;
                channel_map(&avg_pool(get(0)?, cfg.pool_factor)?, proj)?
            }
            Opcode::ConvF1 | Opcode::RecomputeF1 => block()?.f1.apply(get(0)?, &exact)?,
            Opcode::ConvF2 | Opcode::RecomputeF2 => block()?.f2.apply(get(0)?, &exact)?,
            Opcode::Add => {
                let mut acc = get(0)?.clone();
                for k in 1..ins.inputs.len() {
                    acc.add_assign(get(k)?)?;
                }
                acc
            }
            Opcode::Sub => get(0)?.sub(get(1)?)?,
            Opcode::InvGradU1a => block()?
                .f1
                .input_grad(&Tensor::relu_backward(get(0)?, get(1)?)?, &exact)?,
            Opcode::InvGradU2a => block()?
                .f2
                .input_grad(&Tensor::relu_backward(get(0)?, get(1)?)?, &exact)?,
            Opcode::WGradU1w => block()?
                .f1
                .weight_grad(get(0)?, &Tensor::relu_backward(get(1)?, get(2)?)?)?,
            Opcode::WGradU2w => block()?
                .f2
                .weight_grad(get(0)?, &Tensor::relu_backward(get(1)?, get(2)?)?)?,
            Opcode::HeadGrad => {
                let loss_grad = loss_grad
                    .ok_or_else(|| Error::Config("head gradient needs a loss gradient".into()))?;
                let (y1, y2) = (get(0)?, get(1)?);
                let features = global_avg_pool(&Tensor::concat_channels(y1, y2)?);
                let g = head_backward(spec, &features, loss_grad, y1.height(), y1.width(), &exact)?;
                if ins.output.starts_with("g1") {
                    g.stream1
                } else {
                    g.stream2
                }
            }
        };
        if let Some(t) = &ins.overwrite {
            live.remove(t);
        }
        live.insert(ins.output.clone(), out);
    }
    Ok(live)
}
