//! Dense NCHW tensors in double precision and the handful of kernels the
//! engine needs: stride-1 same-padding convolution with its two gradients,
//! average pooling, 1×1 channel maps and global average pooling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Zero,
    Reflect,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "{} values for shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn idx(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        ((b * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    pub fn get(&self, b: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.idx(b, c, h, w)]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.check_same(other, "add")?;
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| v.max(0.0))
    }

    /// `grad ⊙ [activated > 0]`; the mask comes from the post-activation
    /// value, which is positive exactly where the pre-activation was.
    pub fn relu_backward(grad: &Tensor, activated: &Tensor) -> Result<Tensor> {
        grad.check_same(activated, "relu mask")?;
        Ok(grad.zip_map(activated, |g, a| if a > 0.0 { g } else { 0.0 }))
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let [ba, ca, h, w] = a.shape;
        let [bb, cb, hb, wb] = b.shape;
        if ba != bb || h != hb || w != wb {
            return Err(Error::Shape(format!(
                "concat {:?} with {:?}",
                a.shape, b.shape
            )));
        }
        let plane = h * w;
        let mut out = Tensor::zeros([ba, ca + cb, h, w]);
        for n in 0..ba {
            let dst = n * (ca + cb) * plane;
            out.data[dst..dst + ca * plane]
                .copy_from_slice(&a.data[n * ca * plane..(n + 1) * ca * plane]);
            out.data[dst + ca * plane..dst + (ca + cb) * plane]
                .copy_from_slice(&b.data[n * cb * plane..(n + 1) * cb * plane]);
        }
        Ok(out)
    }

    /// Split along the channel axis after `first` channels.
    pub fn split_channels(&self, first: usize) -> Result<(Tensor, Tensor)> {
        let [b, c, h, w] = self.shape;
        if first > c {
            return Err(Error::Shape(format!("split {first} of {c} channels")));
        }
        let plane = h * w;
        let mut x = Tensor::zeros([b, first, h, w]);
        let mut y = Tensor::zeros([b, c - first, h, w]);
        for n in 0..b {
            let src = &self.data[n * c * plane..(n + 1) * c * plane];
            x.data[n * first * plane..(n + 1) * first * plane]
                .copy_from_slice(&src[..first * plane]);
            y.data[n * (c - first) * plane..(n + 1) * (c - first) * plane]
                .copy_from_slice(&src[first * plane..]);
        }
        Ok((x, y))
    }

    /// Gather samples by index along the batch axis.
    pub fn gather_batch(&self, indices: &[usize]) -> Tensor {
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        Tensor {
            shape: [indices.len(), self.shape[1], self.shape[2], self.shape[3]],
            data,
        }
    }

    /// Select a contiguous range of samples.
    pub fn batch_slice(&self, start: usize, end: usize) -> Tensor {
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        Tensor {
            shape: [end - start, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[start * per..end * per].to_vec(),
        }
    }
}

fn kernel_dims(w: &Tensor) -> Result<(usize, usize, usize)> {
    let [cout, cin, kh, kw] = w.shape;
    if kh != kw || kh % 2 == 0 {
        return Err(Error::Shape(format!(
            "kernel must be square and odd, got {kh}x{kw}"
        )));
    }
    Ok((cout, cin, kh))
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r.clamp(0, n - 1) as usize
}

/// Stride-1 convolution with `k/2` padding, so spatial dims are preserved.
/// `w` is `[C_out, C_in, k, k]`.
pub fn conv2d(x: &Tensor, w: &Tensor, padding: Padding) -> Result<Tensor> {
    let (cout, cin, k) = kernel_dims(w)?;
    let [b, c, h, wd] = x.shape;
    if c != cin {
        return Err(Error::Shape(format!(
            "conv input has {c} channels, kernel expects {cin}"
        )));
    }
    let half = (k / 2) as isize;
    let mut out = Tensor::zeros([b, cout, h, wd]);
    for n in 0..b {
        for co in 0..cout {
            let obase = (n * cout + co) * h * wd;
            for ci in 0..cin {
                let ibase = (n * cin + ci) * h * wd;
                let wbase = (co * cin + ci) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w.data[wbase + ky * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let dy = ky as isize - half;
                        let dx = kx as isize - half;
                        for oy in 0..h {
                            let iy = oy as isize + dy;
                            let iy = match padding {
                                Padding::Zero if iy < 0 || iy >= h as isize => continue,
                                Padding::Zero => iy as usize,
                                Padding::Reflect => reflect(iy, h),
                            };
                            let orow = obase + oy * wd;
                            let irow = ibase + iy * wd;
                            for ox in 0..wd {
                                let ix = ox as isize + dx;
                                let ix = match padding {
                                    Padding::Zero if ix < 0 || ix >= wd as isize => continue,
                                    Padding::Zero => ix as usize,
                                    Padding::Reflect => reflect(ix, wd),
                                };
                                out.data[orow + ox] += wv * x.data[irow + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of a zero-padded [`conv2d`] with respect to its input.
pub fn conv2d_input_grad(grad_out: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (cout, cin, k) = kernel_dims(w)?;
    let [b, c, h, wd] = grad_out.shape;
    if c != cout {
        return Err(Error::Shape(format!(
            "grad has {c} channels, kernel produces {cout}"
        )));
    }
    let half = (k / 2) as isize;
    let mut gx = Tensor::zeros([b, cin, h, wd]);
    for n in 0..b {
        for co in 0..cout {
            let gbase = (n * cout + co) * h * wd;
            for ci in 0..cin {
                let xbase = (n * cin + ci) * h * wd;
                let wbase = (co * cin + ci) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w.data[wbase + ky * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let dy = ky as isize - half;
                        let dx = kx as isize - half;
                        for oy in 0..h {
                            let iy = oy as isize + dy;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..wd {
                                let ix = ox as isize + dx;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                gx.data[xbase + iy as usize * wd + ix as usize] +=
                                    wv * grad_out.data[gbase + oy * wd + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(gx)
}

/// Gradient of a zero-padded [`conv2d`] with respect to its kernel.
pub fn conv2d_weight_grad(x: &Tensor, grad_out: &Tensor, k: usize) -> Result<Tensor> {
    let [b, cin, h, wd] = x.shape;
    let [bg, cout, hg, wg] = grad_out.shape;
    if b != bg || h != hg || wd != wg {
        return Err(Error::Shape(format!(
            "weight grad {:?} vs {:?}",
            x.shape, grad_out.shape
        )));
    }
    if k.is_multiple_of(2) {
        return Err(Error::Shape(format!("kernel size must be odd, got {k}")));
    }
    let half = (k / 2) as isize;
    let mut gw = Tensor::zeros([cout, cin, k, k]);
    for n in 0..b {
        for co in 0..cout {
            let gbase = (n * cout + co) * h * wd;
            for ci in 0..cin {
                let xbase = (n * cin + ci) * h * wd;
                let wbase = (co * cin + ci) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let dy = ky as isize - half;
                        let dx = kx as isize - half;
                        let mut acc = 0.0;
                        for oy in 0..h {
                            let iy = oy as isize + dy;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..wd {
                                let ix = ox as isize + dx;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data[xbase + iy as usize * wd + ix as usize]
                                    * grad_out.data[gbase + oy * wd + ox];
                            }
                        }
                        gw.data[wbase + ky * k + kx] += acc;
                    }
                }
            }
        }
    }
    Ok(gw)
}

/// Average pooling by `factor` along each spatial axis. Inputs whose sides are
/// not divisible are zero-padded at the bottom/right first.
pub fn avg_pool(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::Config("pooling factor must be positive".into()));
    }
    let [b, c, h, w] = x.shape;
    let (oh, ow) = (h.div_ceil(factor), w.div_ceil(factor));
    let norm = 1.0 / (factor * factor) as f64;
    let mut out = Tensor::zeros([b, c, oh, ow]);
    for n in 0..b {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let o = out.idx(n, ch, y / factor, xx / factor);
                    out.data[o] += x.get(n, ch, y, xx) * norm;
                }
            }
        }
    }
    Ok(out)
}

pub fn pooled_side(side: usize, factor: usize) -> usize {
    side.div_ceil(factor)
}

/// 1×1 channel map: `map` is `[C_out, C_in]` stored as a `[C_out, C_in, 1, 1]` tensor.
pub fn channel_map(x: &Tensor, map: &Tensor) -> Result<Tensor> {
    conv2d(x, map, Padding::Zero)
}

/// Mean over spatial positions, giving `[B, C]` as a `[B, C, 1, 1]` tensor.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let [b, c, h, w] = x.shape;
    let plane = h * w;
    let mut out = Tensor::zeros([b, c, 1, 1]);
    for (o, chunk) in out.data.iter_mut().zip(x.data.chunks(plane)) {
        *o = chunk.iter().sum::<f64>() / plane as f64;
    }
    out
}

/// Backward of [`global_avg_pool`] onto a `[B, C, h, w]` input.
pub fn global_avg_pool_backward(grad: &Tensor, h: usize, w: usize) -> Tensor {
    let [b, c, _, _] = grad.shape;
    let plane = h * w;
    let mut out = Tensor::zeros([b, c, h, w]);
    for (g, chunk) in grad.data.iter().zip(out.data.chunks_mut(plane)) {
        chunk.iter_mut().for_each(|v| *v = g / plane as f64);
    }
    out
}
