//! Mini-batch SGD over the branch and head.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::model::DuDnnSpec;
use super::network::{
    argmax, branch_forward, dudnn_backward, prepare_branch_inputs, softmax_cross_entropy,
    BranchInputs,
};
use super::Precision;
use crate::error::{Error, Result};
use crate::memory::faults::{FaultInjector, FaultModel};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultConfig {
    pub read_yield: f64,
    /// Activations kept for the backward pass outlive retention unrefreshed.
    #[serde(default)]
    pub expire_stored_activations: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Validation interval in steps; accuracy is also recorded after every epoch.
    pub eval_every: usize,
    pub faults: Option<FaultConfig>,
    pub lr_schedule: LrSchedule,
    /// Gradients whose global L2 norm exceeds this are rescaled to it.
    pub clip_norm: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from the base rate down to zero over all steps.
    #[default]
    Cosine,
}

impl LrSchedule {
    pub fn rate(&self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let progress = step as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            precision: Precision::default(),
            eval_every: 8,
            faults: None,
            lr_schedule: LrSchedule::default(),
            clip_norm: Some(2.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config("clip_norm must be positive".into()));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if let Some(f) = &self.faults {
            FaultModel {
                read_yield: f.read_yield,
                seed: 0,
            }
            .validate()?;
        }
        if let Precision::Bfp { config, .. } = &self.precision {
            config.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub epoch: usize,
    pub val_accuracy: f64,
    /// Mean training loss since the previous point.
    pub train_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub spec: DuDnnSpec,
    pub trajectory: Vec<TrajectoryPoint>,
    pub steps: usize,
    pub final_accuracy: f64,
    pub values_read: u64,
    pub values_corrupted: u64,
}

/// Momentum SGD state: `v = μ·v + (g + λ·W)`, `W -= η·v`.
struct Sgd {
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    fn step(
        &mut self,
        slot: usize,
        w: &mut [f64],
        g: &[f64],
        cfg: &TrainConfig,
        lr: f64,
        grad_scale: f64,
        decay: bool,
    ) {
        let v = &mut self.velocity[slot];
        let wd = if decay { cfg.weight_decay } else { 0.0 };
        for ((w, g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
            *v = cfg.momentum * *v + (grad_scale * g + wd * *w);
            *w -= lr * *v;
        }
    }
}

pub fn evaluate(
    spec: &DuDnnSpec,
    inputs: &BranchInputs,
    labels: &[usize],
    precision: &Precision,
) -> Result<f64> {
    let (logits, _) = branch_forward(spec, inputs, precision, None)?;
    let k = logits.channels();
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(n, &y)| argmax(&logits.data()[n * k..(n + 1) * k]) == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

fn diverged(step: usize, loss: f64) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Run(_) => Error::Diverged { step, loss },
        other => other,
    }
}

/// Train the branch and head of `spec`. The backbone is never touched. Each
/// epoch runs `train.len() / batch_size` full batches in a seeded shuffle.
pub fn train(
    spec: &DuDnnSpec,
    cfg: &TrainConfig,
    train_set: &Dataset,
    val_set: &Dataset,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "training set of {} is smaller than one batch of {}",
            train_set.len(),
            cfg.batch_size
        )));
    }
    let precision = cfg.precision;
    let mut spec = spec.clone();
    let train_inputs = prepare_branch_inputs(&spec, &train_set.images, &precision)?;
    let val_inputs = prepare_branch_inputs(&spec, &val_set.images, &precision)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut faults = match &cfg.faults {
        Some(f) => Some(FaultInjector::new(
            &FaultModel {
                read_yield: f.read_yield,
                seed: cfg.seed ^ 0x5eed_fa17,
            },
            f.expire_stored_activations,
        )?),
        None => None,
    };

    let mut sgd = Sgd {
        velocity: spec
            .blocks
            .iter()
            .flat_map(|b| [b.f1.weight.len(), b.f2.weight.len()])
            .chain([spec.head.weight.len(), spec.head.bias.len()])
            .map(|n| vec![0.0; n])
            .collect(),
    };

    let mut trajectory = vec![TrajectoryPoint {
        step: 0,
        epoch: 0,
        val_accuracy: evaluate(&spec, &val_inputs, &val_set.labels, &precision)?,
        train_loss: None,
    }];
    let steps_per_epoch = train_set.len() / cfg.batch_size;
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0;
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks_exact(cfg.batch_size).take(steps_per_epoch) {
            let lr = cfg.lr_schedule.rate(cfg.learning_rate, step, total_steps);
            step += 1;
            let inputs = train_inputs.gather(batch);
            let labels: Vec<usize> = batch.iter().map(|&i| train_set.labels[i]).collect();
            let (logits, state) = branch_forward(&spec, &inputs, &precision, faults.as_mut())
                .map_err(diverged(step, f64::NAN))?;
            let (loss, grad, _) = softmax_cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            loss_sum += loss;
            loss_n += 1;
            let grads = dudnn_backward(&spec, &state, &grad, &precision, faults.as_mut())
                .map_err(diverged(step, loss))?;
            let flat = grads.flatten();
            if flat.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged { step, loss });
            }
            let norm = flat.iter().map(|v| v * v).sum::<f64>().sqrt();
            let scale = match cfg.clip_norm {
                Some(c) if norm > c => c / norm,
                _ => 1.0,
            };
            for (l, (q1, q2)) in grads.blocks.iter().enumerate() {
                let b = &mut spec.blocks[l];
                sgd.step(
                    2 * l,
                    b.f1.weight.data_mut(),
                    q1.data(),
                    cfg,
                    lr,
                    scale,
                    true,
                );
                sgd.step(
                    2 * l + 1,
                    b.f2.weight.data_mut(),
                    q2.data(),
                    cfg,
                    lr,
                    scale,
                    true,
                );
            }
            let nb = 2 * spec.blocks.len();
            sgd.step(
                nb,
                spec.head.weight.data_mut(),
                grads.head_weight.data(),
                cfg,
                lr,
                scale,
                true,
            );
            sgd.step(
                nb + 1,
                &mut spec.head.bias,
                &grads.head_bias,
                cfg,
                lr,
                scale,
                false,
            );

            let epoch_end = step % steps_per_epoch == 0;
            if epoch_end || (cfg.eval_every > 0 && step % cfg.eval_every == 0) {
                let acc = evaluate(&spec, &val_inputs, &val_set.labels, &precision)?;
                trajectory.push(TrajectoryPoint {
                    step,
                    epoch,
                    val_accuracy: acc,
                    train_loss: Some(loss_sum / loss_n.max(1) as f64),
                });
                loss_sum = 0.0;
                loss_n = 0;
            }
        }
    }
    let final_accuracy = trajectory.last().map_or(0.0, |p| p.val_accuracy);
    let (values_read, values_corrupted) = faults
        .as_ref()
        .map_or((0, 0), |f| (f.values_read, f.values_corrupted));
    Ok(TrainOutcome {
        spec,
        trajectory,
        steps: step,
        final_accuracy,
        values_read,
        values_corrupted,
    })
}

/// One plain SGD step (no momentum, no decay) on a flat weight tensor:
/// `W' = W - η·grad`. Exposed for checking the update rule in isolation.
pub fn sgd_update(weight: &Tensor, grad: &Tensor, learning_rate: f64) -> Result<Tensor> {
    weight.sub(&grad.scale(learning_rate))
}
