//! Model description, construction of the frozen backbone and the
//! baseline variants.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::block::{FoldedNorm, ResidualFuncParams, ReversibleBlockParams};
use crate::error::{Error, Result};
use crate::tensor::{pooled_side, Padding, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// Reversible branch with pooled injections from every backbone layer.
    #[serde(rename = "dudnn")]
    DuDnn,
    /// Same topology with an irreversible branch that stores its activations.
    #[serde(rename = "fi")]
    Fi,
    /// Branch fed only by the backbone's final output.
    #[serde(rename = "ca")]
    Ca,
    /// Branch on the raw input, no backbone.
    #[serde(rename = "bo")]
    Bo,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::DuDnn, Variant::Fi, Variant::Ca, Variant::Bo];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::DuDnn => "dudnn",
            Variant::Fi => "fi",
            Variant::Ca => "ca",
            Variant::Bo => "bo",
        }
    }

    pub fn is_reversible(&self) -> bool {
        !matches!(self, Variant::Fi)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }
}

/// Dimensions of a model. The backbone and fixed maps are derived from these
/// deterministically; only branch and head weights are random.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub blocks: usize,
    pub image_size: usize,
    pub input_channels: usize,
    pub backbone_channels: usize,
    pub branch_channels: usize,
    pub kernel_size: usize,
    /// Per-axis pooling factor between backbone and branch resolution.
    pub pool_factor: usize,
    pub classes: usize,
    /// Multiplier on the He-style standard deviation of branch weights.
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::DuDnn,
            blocks: 4,
            image_size: 16,
            input_channels: 1,
            backbone_channels: 4,
            branch_channels: 4,
            kernel_size: 3,
            pool_factor: 4,
            classes: 8,
            init_scale: 0.25,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("blocks", self.blocks),
            ("image_size", self.image_size),
            ("input_channels", self.input_channels),
            ("backbone_channels", self.backbone_channels),
            ("branch_channels", self.branch_channels),
            ("pool_factor", self.pool_factor),
            ("classes", self.classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config("kernel_size must be odd".into()));
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(Error::Config(
                "init_scale must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn branch_side(&self) -> usize {
        pooled_side(self.image_size, self.pool_factor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchSource {
    /// Pooled input image.
    Image,
    /// Pooled output of the last backbone layer.
    BackboneFinal,
}

/// Global average pool over `[y1, y2]` followed by a linear layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    /// `[classes, 2·C, 1, 1]`
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

impl Head {
    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DuDnnSpec {
    pub config: ModelConfig,
    /// Frozen backbone layers, one per branch block (empty for branch-only).
    pub backbone: Vec<ResidualFuncParams>,
    pub branch_source: BranchSource,
    /// Fixed `[2·C, C_src, 1, 1]` map producing `(x1, x2)` from the pooled source.
    pub stem: Tensor,
    /// Fixed `[C, C_backbone, 1, 1]` projection per block, `None` where the
    /// block receives no injection.
    pub injections: Vec<Option<Tensor>>,
    pub blocks: Vec<ReversibleBlockParams>,
    pub head: Head,
}

/// Fold inference-mode batch normalization into a per-channel affine map.
pub fn fold_batchnorm(
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Result<FoldedNorm> {
    let n = gamma.len();
    if beta.len() != n || mean.len() != n || var.len() != n {
        return Err(Error::Shape(
            "batch-norm statistics differ in length".into(),
        ));
    }
    if var.iter().any(|&v| v + eps <= 0.0) {
        return Err(Error::Config("batch-norm variance must be positive".into()));
    }
    let scale: Vec<f64> = gamma
        .iter()
        .zip(var)
        .map(|(g, v)| g / (v + eps).sqrt())
        .collect();
    let shift = beta
        .iter()
        .zip(mean)
        .zip(&scale)
        .map(|((b, m), s)| b - m * s)
        .collect();
    Ok(FoldedNorm { scale, shift })
}

/// Step directions of the first-layer difference filters. Each of the four
/// stripe orientations in the synthetic task is invisible to exactly one of them.
const EDGE_OFFSETS: [(isize, isize); 4] = [(0, 1), (1, 0), (1, 1), (1, -1)];

fn first_layer(cfg: &ModelConfig) -> Result<ResidualFuncParams> {
    let (cb, cin, k) = (
        cfg.backbone_channels,
        cfg.input_channels,
        cfg.kernel_size.max(3),
    );
    let c = (k / 2) as isize;
    let mut w = Tensor::zeros([cb, cin, k, k]);
    for co in 0..cb {
        let (dy, dx) = EDGE_OFFSETS[co % 4];
        // Channels beyond the first four see the opposite polarity.
        let sign = if (co / 4) % 2 == 0 { 1.0 } else { -1.0 };
        for ci in 0..cin {
            let centre = w.idx(co, ci, c as usize, c as usize);
            let off = w.idx(co, ci, (c + dy) as usize, (c + dx) as usize);
            w.data_mut()[centre] -= sign / cin as f64;
            w.data_mut()[off] += sign / cin as f64;
        }
    }
    let ones = vec![1.0; cb];
    let zeros = vec![0.0; cb];
    Ok(ResidualFuncParams {
        weight: w,
        norm: Some(fold_batchnorm(&ones, &zeros, &zeros, &ones, 1e-5)?),
        padding: Padding::Reflect,
    })
}

fn deeper_layer(cfg: &ModelConfig) -> Result<ResidualFuncParams> {
    let (cb, k) = (cfg.backbone_channels, cfg.kernel_size);
    let c = k / 2;
    let mut w = Tensor::zeros([cb, cb, k, k]);
    for ch in 0..cb {
        let centre = w.idx(ch, ch, c, c);
        if k == 1 {
            w.data_mut()[centre] = 1.0;
            continue;
        }
        w.data_mut()[centre] = 0.8;
        for (dy, dx) in [(0, 1), (2, 1), (1, 0), (1, 2)] {
            let i = w.idx(ch, ch, c - 1 + dy, c - 1 + dx);
            w.data_mut()[i] = 0.05;
        }
    }
    let gamma = vec![1.0; cb];
    let beta = vec![0.0; cb];
    let mean = vec![0.0; cb];
    let var = vec![1.0; cb];
    Ok(ResidualFuncParams {
        weight: w,
        norm: Some(fold_batchnorm(&gamma, &beta, &mean, &var, 1e-5)?),
        padding: Padding::Reflect,
    })
}

fn build_backbone(cfg: &ModelConfig) -> Result<Vec<ResidualFuncParams>> {
    (0..cfg.blocks)
        .map(|l| {
            if l == 0 {
                first_layer(cfg)
            } else {
                deeper_layer(cfg)
            }
        })
        .collect()
}

/// `[out, in, 1, 1]` map with `out[c] = in[c mod in_channels]`.
fn tiling_map(out: usize, inp: usize) -> Tensor {
    let mut m = Tensor::zeros([out, inp, 1, 1]);
    for c in 0..out {
        let i = m.idx(c, c % inp, 0, 0);
        m.data_mut()[i] = 1.0;
    }
    m
}

/// Backbone, stem and injection wiring for `variant`.
fn wire(
    cfg: &ModelConfig,
    variant: Variant,
) -> Result<(
    Vec<ResidualFuncParams>,
    BranchSource,
    Tensor,
    Vec<Option<Tensor>>,
)> {
    let c = cfg.branch_channels;
    let proj = || Some(tiling_map(c, cfg.backbone_channels));
    Ok(match variant {
        Variant::DuDnn | Variant::Fi => (
            build_backbone(cfg)?,
            BranchSource::Image,
            tiling_map(2 * c, cfg.input_channels),
            (0..cfg.blocks).map(|_| proj()).collect(),
        ),
        Variant::Ca => (
            build_backbone(cfg)?,
            BranchSource::BackboneFinal,
            tiling_map(2 * c, cfg.backbone_channels),
            vec![None; cfg.blocks],
        ),
        Variant::Bo => (
            Vec::new(),
            BranchSource::Image,
            tiling_map(2 * c, cfg.input_channels),
            vec![None; cfg.blocks],
        ),
    })
}

impl DuDnnSpec {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (c, k) = (cfg.branch_channels, cfg.kernel_size);
        let std = cfg.init_scale * (2.0 / (c * k * k) as f64).sqrt();
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let mut conv = || Tensor::from_fn([c, c, k, k], |_| normal.sample(rng));
        let blocks = (0..cfg.blocks)
            .map(|_| {
                let f1 = ResidualFuncParams::branch(conv());
                let f2 = ResidualFuncParams::branch(conv());
                ReversibleBlockParams::new(f1, f2)
            })
            .collect::<Result<Vec<_>>>()?;
        let head_normal = Normal::new(0.0, 0.01).map_err(|e| Error::Config(e.to_string()))?;
        let head = Head {
            weight: Tensor::from_fn([cfg.classes, 2 * c, 1, 1], |_| head_normal.sample(rng)),
            bias: vec![0.0; cfg.classes],
        };
        let (backbone, branch_source, stem, injections) = wire(cfg, cfg.variant)?;
        Ok(Self {
            config: cfg.clone(),
            backbone,
            branch_source,
            stem,
            injections,
            blocks,
            head,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Number of backbone→branch connections (injections plus a backbone-fed stem).
    pub fn connection_count(&self) -> usize {
        self.injections.iter().flatten().count()
            + usize::from(self.branch_source == BranchSource::BackboneFinal)
    }

    pub fn trainable_params_per_block(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.param_count()).collect()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.trainable_params_per_block().iter().sum::<usize>() + self.head.param_count()
    }

    pub fn frozen_param_count(&self) -> usize {
        self.backbone
            .iter()
            .map(|f| f.weight.len() + f.norm.as_ref().map_or(0, |n| n.scale.len() + n.shift.len()))
            .sum()
    }
}

/// Rewire `base` as `variant`, keeping its branch and head weights so that
/// every variant has identical learnable parameters.
pub fn build_variant(base: &DuDnnSpec, variant: Variant) -> Result<DuDnnSpec> {
    if base.variant() == variant {
        return Ok(base.clone());
    }
    let mut cfg = base.config.clone();
    cfg.variant = variant;
    let (backbone, branch_source, stem, injections) = wire(&cfg, variant)?;
    Ok(DuDnnSpec {
        config: cfg,
        backbone,
        branch_source,
        stem,
        injections,
        blocks: base.blocks.clone(),
        head: base.head.clone(),
    })
}
