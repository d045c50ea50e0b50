//! Reference implementations shared by the integration tests.
#![allow(dead_code)]

use edtrain_core::duplex::model::DuDnnSpec;
use edtrain_core::duplex::model::Variant;
use edtrain_core::duplex::network::prepare_branch_inputs;
use edtrain_core::duplex::Precision;
use edtrain_core::scheduler::{ConvDims, LayerDims, NetworkShape, Topology};
use edtrain_core::tensor::{
    conv2d, conv2d_input_grad, conv2d_weight_grad, global_avg_pool, Padding, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| scale * rng.gen_range(-1.0..1.0))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn relu_conv(x: &Tensor, w: &Tensor) -> Tensor {
    conv2d(x, w, Padding::Zero).unwrap().relu()
}

fn mask(g: &Tensor, act: &Tensor) -> Tensor {
    Tensor::from_fn(g.shape(), |i| {
        if act.data()[i] > 0.0 {
            g.data()[i]
        } else {
            0.0
        }
    })
}

/// Mean softmax cross-entropy and its logits gradient, written out directly.
pub fn cross_entropy(logits: &[f64], k: usize, labels: &[usize]) -> (f64, Vec<f64>) {
    let b = labels.len();
    let mut grad = vec![0.0; b * k];
    let mut loss = 0.0;
    for n in 0..b {
        let row = &logits[n * k..(n + 1) * k];
        let m = row.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        for c in 0..k {
            let p = (row[c] - m).exp() / z;
            grad[n * k + c] = (p - (c == labels[n]) as u8 as f64) / b as f64;
        }
        loss -= ((row[labels[n]] - m).exp() / z).ln();
    }
    (loss / b as f64, grad)
}

struct Stored {
    x1: Tensor,
    y2: Tensor,
    f1: Tensor,
    f2: Tensor,
}

/// Loss and flattened gradients (branch weights in block order, then head
/// weight and bias) by keeping every intermediate activation of the
/// reversible branch and differentiating the forward equations directly.
pub fn storing_backprop(spec: &DuDnnSpec, images: &Tensor, labels: &[usize]) -> (f64, Vec<f64>) {
    let inputs = prepare_branch_inputs(spec, images, &Precision::Exact).unwrap();
    let (mut x1, mut x2) = (inputs.x1.clone(), inputs.x2.clone());
    let mut stored = Vec::new();
    for (l, b) in spec.blocks.iter().enumerate() {
        if let Some(u) = &inputs.injections[l] {
            x2 = x2.add(u).unwrap();
        }
        let f1 = relu_conv(&x1, &b.f1.weight);
        let y2 = x2.add(&f1).unwrap();
        let f2 = relu_conv(&y2, &b.f2.weight);
        let y1 = x1.add(&f2).unwrap();
        stored.push(Stored {
            x1: x1.clone(),
            y2: y2.clone(),
            f1,
            f2,
        });
        x1 = y1;
        x2 = y2;
    }
    let feats = global_avg_pool(&Tensor::concat_channels(&x1, &x2).unwrap());
    let (bsz, j) = (feats.batch(), feats.channels());
    let k = spec.head.bias.len();
    let w = spec.head.weight.data();
    let mut logits = vec![0.0; bsz * k];
    for n in 0..bsz {
        for c in 0..k {
            logits[n * k + c] = spec.head.bias[c]
                + (0..j)
                    .map(|i| w[c * j + i] * feats.data()[n * j + i])
                    .sum::<f64>();
        }
    }
    let (loss, gl) = cross_entropy(&logits, k, labels);
    let mut gw = vec![0.0; k * j];
    let mut gb = vec![0.0; k];
    let mut gf = vec![0.0; bsz * j];
    for n in 0..bsz {
        for c in 0..k {
            gb[c] += gl[n * k + c];
            for i in 0..j {
                gw[c * j + i] += gl[n * k + c] * feats.data()[n * j + i];
                gf[n * j + i] += gl[n * k + c] * w[c * j + i];
            }
        }
    }
    let [_, ch, h, wd] = x1.shape();
    let plane = (h * wd) as f64;
    let mut gy1 = Tensor::from_fn(x1.shape(), |idx| {
        gf[(idx / (h * wd)) / ch * j + (idx / (h * wd)) % ch] / plane
    });
    let mut gy2 = Tensor::from_fn(x2.shape(), |idx| {
        gf[(idx / (h * wd)) / ch * j + ch + (idx / (h * wd)) % ch] / plane
    });
    let mut block_grads =
        vec![(Tensor::zeros([1, 1, 1, 1]), Tensor::zeros([1, 1, 1, 1])); spec.blocks.len()];
    for l in (0..spec.blocks.len()).rev() {
        let b = &spec.blocks[l];
        let s = &stored[l];
        let gz2 = mask(&gy1, &s.f2);
        let dw2 = conv2d_weight_grad(&s.y2, &gz2, 3).unwrap();
        let gy2_total = gy2
            .add(&conv2d_input_grad(&gz2, &b.f2.weight).unwrap())
            .unwrap();
        let gz1 = mask(&gy2_total, &s.f1);
        let dw1 = conv2d_weight_grad(&s.x1, &gz1, 3).unwrap();
        let gx1 = gy1
            .add(&conv2d_input_grad(&gz1, &b.f1.weight).unwrap())
            .unwrap();
        block_grads[l] = (dw1, dw2);
        gy1 = gx1;
        gy2 = gy2_total;
    }
    let mut flat = Vec::new();
    for (a, b) in &block_grads {
        flat.extend_from_slice(a.data());
        flat.extend_from_slice(b.data());
    }
    flat.extend(gw);
    flat.extend(gb);
    (loss, flat)
}

pub fn max_rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Random layer dimensions for `variant`, one to six blocks deep.
pub fn random_shape(r: &mut impl Rng, variant: Variant) -> NetworkShape {
    let topology = Topology::of(variant);
    let blocks = r.gen_range(1..=6);
    let batch = r.gen_range(1..=4);
    let conv = |r: &mut dyn rand::RngCore| ConvDims {
        c_in: r.gen_range(1..=8),
        c_out: r.gen_range(1..=8),
        height: r.gen_range(1..=16),
        width: r.gen_range(1..=16),
        kernel: [1, 3, 5][r.gen_range(0..3)],
    };
    let layers = (0..blocks)
        .map(|_| LayerDims {
            batch,
            g: (variant != Variant::Bo).then(|| conv(r)),
            f1: conv(r),
            f2: conv(r),
        })
        .collect();
    NetworkShape {
        topology,
        layers,
        image_elements: 64 * batch,
    }
}
