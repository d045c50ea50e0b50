//! Whole-network forward and backward passes.
//!
//! The frozen backbone only contributes pooled, projected injections and the
//! branch input, so [`prepare_branch_inputs`] can run once per dataset and the
//! training loop works on [`BranchInputs`] directly.

use super::block::{
    backward_block, forward_block, irreversible_backward, irreversible_forward, IrreversibleStore,
};
use super::model::{BranchSource, DuDnnSpec};
use super::Precision;
use crate::error::{Error, Result};
use crate::memory::faults::FaultInjector;
use crate::tensor::{avg_pool, channel_map, global_avg_pool, global_avg_pool_backward, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct BranchInputs {
    pub x1: Tensor,
    pub x2: Tensor,
    /// Projected pooled backbone features per block.
    pub injections: Vec<Option<Tensor>>,
}

impl BranchInputs {
    pub fn batch(&self) -> usize {
        self.x1.batch()
    }

    pub fn gather(&self, indices: &[usize]) -> BranchInputs {
        BranchInputs {
            x1: self.x1.gather_batch(indices),
            x2: self.x2.gather_batch(indices),
            injections: self
                .injections
                .iter()
                .map(|u| u.as_ref().map(|u| u.gather_batch(indices)))
                .collect(),
        }
    }
}

/// What survives from the forward pass until the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RetainedState {
    pub y1: Tensor,
    pub y2: Tensor,
    /// Classifier input, `[B, 2·C, 1, 1]`.
    pub features: Tensor,
    /// Static: lives in SRAM for the whole step.
    pub injections: Vec<Option<Tensor>>,
    /// Per-block activations, only populated by irreversible branches.
    pub stored: Vec<IrreversibleStore>,
}

impl RetainedState {
    /// Tensors kept in transient (eDRAM) storage between forward and backward.
    pub fn transient_tensor_count(&self) -> usize {
        3 + 4 * self.stored.len()
    }

    pub fn transient_elements(&self) -> usize {
        self.y1.len()
            + self.y2.len()
            + self.features.len()
            + self
                .stored
                .iter()
                .flat_map(|s| s.tensors())
                .map(|t| t.len())
                .sum::<usize>()
    }

    pub fn static_tensor_count(&self) -> usize {
        self.injections.iter().flatten().count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGrads {
    /// `(q1, q2)` per branch block.
    pub blocks: Vec<(Tensor, Tensor)>,
    pub head_weight: Tensor,
    pub head_bias: Vec<f64>,
}

impl NetworkGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for (q1, q2) in &self.blocks {
            v.extend_from_slice(q1.data());
            v.extend_from_slice(q2.data());
        }
        v.extend_from_slice(self.head_weight.data());
        v.extend_from_slice(&self.head_bias);
        v
    }
}

fn read(faults: &mut Option<&mut FaultInjector>, t: &mut Tensor) {
    if let Some(f) = faults.as_deref_mut() {
        f.read(t);
    }
}

fn read_stored(faults: &mut Option<&mut FaultInjector>, t: &mut Tensor) {
    if let Some(f) = faults.as_deref_mut() {
        f.read_stored(t);
    }
}

/// Run the frozen backbone and build the branch input streams and injections.
pub fn prepare_branch_inputs(
    spec: &DuDnnSpec,
    images: &Tensor,
    precision: &Precision,
) -> Result<BranchInputs> {
    let cfg = &spec.config;
    let [_, c, h, w] = images.shape();
    if c != cfg.input_channels || h != cfg.image_size || w != cfg.image_size {
        return Err(Error::Shape(format!(
            "images {:?} do not match a {}-channel {}x{} model",
            images.shape(),
            cfg.input_channels,
            cfg.image_size,
            cfg.image_size
        )));
    }
    let mut outputs = Vec::with_capacity(spec.backbone.len());
    let mut h = images.clone();
    for g in &spec.backbone {
        h = g.apply(&h, precision)?;
        outputs.push(h.clone());
    }
    let source = match spec.branch_source {
        BranchSource::Image => images,
        BranchSource::BackboneFinal => outputs
            .last()
            .ok_or_else(|| Error::Config("backbone-fed branch needs a backbone".into()))?,
    };
    let stem = precision.activation(channel_map(
        &avg_pool(source, cfg.pool_factor)?,
        &spec.stem,
    )?)?;
    let (x1, x2) = stem.split_channels(cfg.branch_channels)?;
    let injections = spec
        .injections
        .iter()
        .enumerate()
        .map(|(l, proj)| match proj {
            None => Ok(None),
            Some(p) => {
                let g = outputs
                    .get(l)
                    .ok_or_else(|| Error::Config(format!("injection {l} has no backbone layer")))?;
                Ok(Some(precision.activation(channel_map(
                    &avg_pool(g, cfg.pool_factor)?,
                    p,
                )?)?))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BranchInputs { x1, x2, injections })
}

fn head_forward(spec: &DuDnnSpec, features: &Tensor, precision: &Precision) -> Result<Tensor> {
    let w = precision.weight(&spec.head.weight)?;
    let [k, j, _, _] = w.shape();
    let b = features.batch();
    if features.channels() != j {
        return Err(Error::Shape(format!(
            "head expects {j} features, got {}",
            features.channels()
        )));
    }
    let f = features.data();
    let mut logits = Tensor::zeros([b, k, 1, 1]);
    for n in 0..b {
        for c in 0..k {
            let row = &w.data()[c * j..(c + 1) * j];
            let dot: f64 = row
                .iter()
                .zip(&f[n * j..(n + 1) * j])
                .map(|(a, b)| a * b)
                .sum();
            logits.data_mut()[n * k + c] = dot + spec.head.bias[c];
        }
    }
    Ok(logits)
}

/// Branch forward pass from prepared inputs.
pub fn branch_forward(
    spec: &DuDnnSpec,
    inputs: &BranchInputs,
    precision: &Precision,
    mut faults: Option<&mut FaultInjector>,
) -> Result<(Tensor, RetainedState)> {
    if inputs.injections.len() != spec.num_blocks() {
        return Err(Error::Shape(
            "injection count does not match block count".into(),
        ));
    }
    let mut x1 = inputs.x1.clone();
    let mut x2 = inputs.x2.clone();
    let mut stored = Vec::new();
    for (l, params) in spec.blocks.iter().enumerate() {
        read(&mut faults, &mut x1);
        read(&mut faults, &mut x2);
        if let Some(u) = &inputs.injections[l] {
            x2 = precision.activation(x2.add(u)?)?;
        }
        let (y1, y2) = if spec.variant().is_reversible() {
            forward_block(&x1, &x2, params, precision)?
        } else {
            let (y1, y2, store) = irreversible_forward(&x1, &x2, params, precision)?;
            stored.push(store);
            (y1, y2)
        };
        x1 = y1;
        x2 = y2;
    }
    let features = global_avg_pool(&Tensor::concat_channels(&x1, &x2)?);
    let logits = head_forward(spec, &features, precision)?;
    Ok((
        logits,
        RetainedState {
            y1: x1,
            y2: x2,
            features,
            injections: inputs.injections.clone(),
            stored,
        },
    ))
}

/// Full forward pass from images: backbone, injections, branch and head.
pub fn dudnn_forward(
    spec: &DuDnnSpec,
    images: &Tensor,
    precision: &Precision,
) -> Result<(Tensor, RetainedState)> {
    let inputs = prepare_branch_inputs(spec, images, precision)?;
    branch_forward(spec, &inputs, precision, None)
}

pub struct HeadGradients {
    pub weight: Tensor,
    pub bias: Vec<f64>,
    /// Loss gradients with respect to the two final streams, unquantized.
    pub stream1: Tensor,
    pub stream2: Tensor,
}

/// Gradients of the linear head over globally pooled features of `h × w` streams.
pub fn head_backward(
    spec: &DuDnnSpec,
    features: &Tensor,
    loss_grad: &Tensor,
    h: usize,
    w: usize,
    precision: &Precision,
) -> Result<HeadGradients> {
    let hw = precision.weight(&spec.head.weight)?;
    let [k, j, _, _] = hw.shape();
    let b = features.batch();
    if loss_grad.shape() != [b, k, 1, 1] {
        return Err(Error::Shape(format!(
            "loss gradient {:?}, expected {:?}",
            loss_grad.shape(),
            [b, k, 1, 1]
        )));
    }
    let g = loss_grad.data();
    let f = features.data();
    let mut weight = Tensor::zeros([k, j, 1, 1]);
    let mut bias = vec![0.0; k];
    let mut g_feat = Tensor::zeros([b, j, 1, 1]);
    for n in 0..b {
        for c in 0..k {
            let gc = g[n * k + c];
            bias[c] += gc;
            for i in 0..j {
                weight.data_mut()[c * j + i] += gc * f[n * j + i];
                g_feat.data_mut()[n * j + i] += gc * hw.data()[c * j + i];
            }
        }
    }
    let weight = precision.weight_gradient(weight)?;
    let (stream1, stream2) =
        global_avg_pool_backward(&g_feat, h, w).split_channels(spec.config.branch_channels)?;
    Ok(HeadGradients {
        weight,
        bias,
        stream1,
        stream2,
    })
}

/// Backward pass over the branch and head. The backbone receives nothing.
/// Reversible branches rebuild each block's inputs from its outputs; the
/// irreversible variant reads its stored activations instead.
pub fn dudnn_backward(
    spec: &DuDnnSpec,
    state: &RetainedState,
    loss_grad: &Tensor,
    precision: &Precision,
    mut faults: Option<&mut FaultInjector>,
) -> Result<NetworkGrads> {
    let blocks = spec.num_blocks();
    let reversible = spec.variant().is_reversible();
    if state.injections.len() != blocks || (!reversible && state.stored.len() != blocks) {
        return Err(Error::Shape(
            "retained state does not match the model".into(),
        ));
    }
    let mut features = state.features.clone();
    read_stored(&mut faults, &mut features);

    let HeadGradients {
        weight: head_weight,
        bias: head_bias,
        stream1: g1,
        stream2: g2,
    } = head_backward(
        spec,
        &features,
        loss_grad,
        state.y1.height(),
        state.y1.width(),
        precision,
    )?;
    let mut g1 = precision.gradient(g1)?;
    let mut g2 = precision.gradient(g2)?;

    let mut y1 = state.y1.clone();
    let mut y2 = state.y2.clone();
    if reversible {
        read_stored(&mut faults, &mut y1);
        read_stored(&mut faults, &mut y2);
    }
    let mut block_grads = vec![None; blocks];
    for l in (0..blocks).rev() {
        read(&mut faults, &mut g1);
        read(&mut faults, &mut g2);
        let params = &spec.blocks[l];
        let bundle = if reversible {
            let out = backward_block(&g1, &g2, &y1, &y2, params, precision)?;
            y1 = out.x1;
            y2 = match &state.injections[l] {
                Some(u) => precision.activation(out.x2.sub(u)?)?,
                None => out.x2,
            };
            out.grads
        } else {
            let mut store = state.stored[l].clone();
            for t in store.tensors_mut() {
                read_stored(&mut faults, t);
            }
            irreversible_backward(&g1, &g2, &store, params, precision)?
        };
        block_grads[l] = Some((bundle.q1, bundle.q2));
        g1 = bundle.s;
        g2 = bundle.m;
    }
    Ok(NetworkGrads {
        blocks: block_grads
            .into_iter()
            .map(|b| b.expect("every block visited"))
            .collect(),
        head_weight,
        head_bias,
    })
}

/// Mean softmax cross-entropy over the batch. Returns the loss, its gradient
/// with respect to the logits and the number of correct predictions.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor, usize)> {
    let [b, k, _, _] = logits.shape();
    if labels.len() != b {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = 0.0;
    let mut correct = 0;
    for (n, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Shape(format!(
                "label {y} out of range for {k} classes"
            )));
        }
        let row = &logits.data()[n * k..(n + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[y];
        if argmax(row) == y {
            correct += 1;
        }
        for c in 0..k {
            let p = (row[c] - log_z).exp();
            grad.data_mut()[n * k + c] = (p - if c == y { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok((loss / b as f64, grad, correct))
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::duplex::model::{build_variant, ModelConfig, Variant};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(variant: Variant, blocks: usize) -> (DuDnnSpec, Tensor) {
        let cfg = ModelConfig {
            blocks,
            image_size: 8,
            pool_factor: 2,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = build_variant(&DuDnnSpec::new(&cfg, &mut rng).unwrap(), variant).unwrap();
        let images = Tensor::from_fn([3, 1, 8, 8], |_| rng.gen_range(-1.0..1.0));
        (spec, images)
    }

    #[test]
    fn branch_only_has_no_injections() {
        let (spec, images) = setup(Variant::Bo, 2);
        let inputs = prepare_branch_inputs(&spec, &images, &Precision::Exact).unwrap();
        assert!(inputs.injections.iter().all(|u| u.is_none()));
        assert_eq!(inputs.x1.shape(), [3, 4, 4, 4]);
    }

    #[test]
    fn pooling_factor_sixteen_on_32_pixels() {
        let cfg = ModelConfig {
            blocks: 1,
            image_size: 32,
            pool_factor: 16,
            ..ModelConfig::default()
        };
        let spec = DuDnnSpec::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let inputs =
            prepare_branch_inputs(&spec, &Tensor::zeros([1, 1, 32, 32]), &Precision::Exact)
                .unwrap();
        assert_eq!(inputs.injections[0].as_ref().unwrap().shape(), [1, 4, 2, 2]);
    }

    #[test]
    fn retained_state_scaling() {
        for l in [2, 4, 8] {
            let (spec, images) = setup(Variant::DuDnn, l);
            let (_, st) = dudnn_forward(&spec, &images, &Precision::Exact).unwrap();
            assert_eq!(st.transient_tensor_count(), 3);
            let (spec, images) = setup(Variant::Fi, l);
            let (_, st) = dudnn_forward(&spec, &images, &Precision::Exact).unwrap();
            assert_eq!(st.transient_tensor_count(), 3 + 4 * l);
        }
    }

    #[test]
    fn zero_loss_gradient_gives_zero_updates() {
        let (spec, images) = setup(Variant::DuDnn, 3);
        let (logits, st) = dudnn_forward(&spec, &images, &Precision::Exact).unwrap();
        let g = dudnn_backward(
            &spec,
            &st,
            &Tensor::zeros(logits.shape()),
            &Precision::Exact,
            None,
        )
        .unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_gradient_rows_sum_to_zero() {
        let logits = Tensor::from_vec([2, 3, 1, 1], vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
        let (loss, g, correct) = softmax_cross_entropy(&logits, &[2, 1]).unwrap();
        assert!(loss > 0.0);
        assert_eq!(correct, 1);
        for row in g.data().chunks(3) {
            assert!(row.iter().sum::<f64>().abs() < 1e-15);
        }
        assert!(softmax_cross_entropy(&logits, &[3, 0]).is_err());
    }
}
