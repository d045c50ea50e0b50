//! Built-in synthetic classification tasks.
//!
//! `OrientedTextures` draws period-4 square-wave stripes in one of four
//! orientations on top of a global brightness offset. The label combines
//! orientation and brightness sign, so a classifier needs fine spatial detail
//! (lost by coarse pooling) and the global mean (lost by zero-sum filters) to
//! reach full accuracy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// 8 classes: 4 stripe orientations × 2 brightness signs.
    OrientedTextures,
    /// 2 classes told apart by the sign of a large brightness offset.
    Separable,
}

impl TaskKind {
    pub fn classes(&self) -> usize {
        match self {
            TaskKind::OrientedTextures => 8,
            TaskKind::Separable => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub task: TaskKind,
    pub train_size: usize,
    pub val_size: usize,
    pub noise_std: f64,
    pub brightness: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::OrientedTextures,
            train_size: 1024,
            val_size: 512,
            noise_std: 0.5,
            brightness: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn stripe(orientation: usize, i: usize, j: usize, phase: usize) -> f64 {
    let (i, j) = (i as isize, j as isize);
    let t = match orientation {
        0 => i,
        1 => j,
        2 => i + j,
        _ => i - j,
    };
    if (t + phase as isize).rem_euclid(4) < 2 {
        1.0
    } else {
        -1.0
    }
}

fn sample(
    cfg: &DataConfig,
    size: usize,
    channels: usize,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let classes = cfg.task.classes();
    let per = channels * size * size;
    let mut data = Vec::with_capacity(count * per);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let label = rng.gen_range(0..classes);
        labels.push(label);
        match cfg.task {
            TaskKind::OrientedTextures => {
                let orientation = label / 2;
                let offset = if label % 2 == 0 {
                    -cfg.brightness
                } else {
                    cfg.brightness
                };
                let amp = rng.gen_range(0.6..1.0);
                let phase = rng.gen_range(0..4);
                for _ in 0..channels {
                    for i in 0..size {
                        for j in 0..size {
                            data.push(
                                offset + amp * stripe(orientation, i, j, phase) + noise.sample(rng),
                            );
                        }
                    }
                }
            }
            TaskKind::Separable => {
                let offset = if label == 0 { -1.0 } else { 1.0 };
                for _ in 0..per {
                    data.push(offset + noise.sample(rng));
                }
            }
        }
    }
    Ok(Dataset {
        images: Tensor::from_vec([count, channels, size, size], data)?,
        labels,
        classes,
    })
}

/// Deterministic train and validation splits.
pub fn generate(
    cfg: &DataConfig,
    image_size: usize,
    channels: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if cfg.train_size == 0 || cfg.val_size == 0 {
        return Err(Error::Config("dataset sizes must be positive".into()));
    }
    if !(cfg.noise_std.is_finite() && cfg.noise_std >= 0.0) {
        return Err(Error::Config(
            "noise_std must be finite and non-negative".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = sample(cfg, image_size, channels, cfg.train_size, &mut rng)?;
    let val = sample(cfg, image_size, channels, cfg.val_size, &mut rng)?;
    Ok((train, val))
}
