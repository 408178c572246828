//! Trainable layers and the sequential stack.
//!
//! Layers process one sample at a time (no batch axis); trainers average
//! gradients over their own sample loops. `Sequential::forward` returns a
//! [`Trace`] holding every layer input, and `backward` consumes that trace,
//! so a backward pass without a matching forward is unrepresentable.

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// small matmul kernels (row-major, contiguous)
// ---------------------------------------------------------------------------

/// c[m x n] += a[m x k] * b[k x n]
fn mm_nn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[kk * n..(kk + 1) * n];
                for (cv, bv) in crow.iter_mut().zip(brow.iter()) {
                    *cv += av * bv;
                }
            }
        }
    }
}

/// c[m x n] += a[m x k] * b[n x k]^T
fn mm_nt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (av, bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            *cv += acc;
        }
    }
}

/// c[k x n] += a[m x k]^T * b[m x n]
fn mm_tn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (r, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let crow = &mut c[r * n..(r + 1) * n];
                for (cv, bv) in crow.iter_mut().zip(brow.iter()) {
                    *cv += av * bv;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// initialization
// ---------------------------------------------------------------------------

/// Uniform Xavier/Glorot init: `U(-sqrt(6/(fan_in+fan_out)), +...)`.
pub fn xavier_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data)
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

/// 2-D convolution with a square kernel and zero padding.
/// Weight layout `[out_c, in_c, k, k]`, bias `[out_c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize, rng: &mut impl Rng) -> Self {
        let fan_in = in_c * k * k;
        let fan_out = out_c * k * k;
        Conv2d {
            weight: xavier_uniform(&[out_c, in_c, k, k], fan_in, fan_out, rng),
            bias: Tensor::zeros(&[out_c]),
            stride,
            pad,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    fn out_hw(&self, ih: usize, iw: usize) -> Result<(usize, usize)> {
        let k = self.kernel();
        if ih + 2 * self.pad < k || iw + 2 * self.pad < k {
            return Err(Error::Shape(format!(
                "conv2d kernel {k} does not fit input {ih}x{iw} with pad {}",
                self.pad
            )));
        }
        Ok((
            (ih + 2 * self.pad - k) / self.stride + 1,
            (iw + 2 * self.pad - k) / self.stride + 1,
        ))
    }

    /// Unfold input patches into a `[in_c*k*k, oh*ow]` matrix.
    fn im2col(&self, x: &Tensor, oh: usize, ow: usize) -> Vec<f64> {
        let (ic, ih, iw) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let k = self.kernel();
        let (s, p) = (self.stride as isize, self.pad as isize);
        let xd = x.data();
        let mut cols = vec![0.0; ic * k * k * oh * ow];
        for c in 0..ic {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= ih as isize {
                            continue;
                        }
                        let src_row = &xd[(c * ih + iy as usize) * iw..(c * ih + iy as usize + 1) * iw];
                        for ox in 0..ow {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < iw as isize {
                                dst[oy * ow + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 3 || x.shape()[0] != self.in_channels() {
            return Err(Error::Shape(format!(
                "conv2d expects [{}, h, w] input, got {:?}",
                self.in_channels(),
                x.shape()
            )));
        }
        let (ih, iw) = (x.shape()[1], x.shape()[2]);
        let (oh, ow) = self.out_hw(ih, iw)?;
        let (oc, ckk) = (self.out_channels(), self.in_channels() * self.kernel() * self.kernel());
        let cols = self.im2col(x, oh, ow);
        let mut out = Tensor::zeros(&[oc, oh, ow]);
        mm_nn(self.weight.data(), oc, ckk, &cols, oh * ow, out.data_mut());
        for o in 0..oc {
            let b = self.bias.data()[o];
            for v in &mut out.data_mut()[o * oh * ow..(o + 1) * oh * ow] {
                *v += b;
            }
        }
        Ok(out)
    }

    /// Returns `(grad_input, [grad_weight, grad_bias])`.
    pub fn backward(&self, x: &Tensor, gy: &Tensor) -> (Tensor, Vec<Tensor>) {
        let (ic, ih, iw) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (oc, oh, ow) = (gy.shape()[0], gy.shape()[1], gy.shape()[2]);
        let k = self.kernel();
        let ckk = ic * k * k;
        let cols = self.im2col(x, oh, ow);

        let mut gb = Tensor::zeros(&[oc]);
        for o in 0..oc {
            gb.data_mut()[o] = gy.data()[o * oh * ow..(o + 1) * oh * ow].iter().sum();
        }

        // gw[oc x ckk] = gy[oc x ohw] * cols[ckk x ohw]^T
        let mut gw = Tensor::zeros(&[oc, ic, k, k]);
        mm_nt(gy.data(), oc, oh * ow, &cols, ckk, gw.data_mut());

        // gcols[ckk x ohw] = w[oc x ckk]^T * gy[oc x ohw]
        let mut gcols = vec![0.0; ckk * oh * ow];
        mm_tn(self.weight.data(), oc, ckk, gy.data(), oh * ow, &mut gcols);

        // col2im scatter-add
        let mut gx = Tensor::zeros(&[ic, ih, iw]);
        let gxd = gx.data_mut();
        let (s, p) = (self.stride as isize, self.pad as isize);
        for c in 0..ic {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &gcols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= ih as isize {
                            continue;
                        }
                        let dst_row = &mut gxd[(c * ih + iy as usize) * iw..(c * ih + iy as usize + 1) * iw];
                        for ox in 0..ow {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < iw as isize {
                                dst_row[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        (gx, vec![gw, gb])
    }
}

// ---------------------------------------------------------------------------
// max pooling
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct MaxPool2d {
    pub window: usize,
    pub stride: usize,
}

impl MaxPool2d {
    pub fn new(window: usize, stride: usize) -> Self {
        MaxPool2d { window, stride }
    }

    fn out_hw(&self, ih: usize, iw: usize) -> Result<(usize, usize)> {
        if ih < self.window || iw < self.window {
            return Err(Error::Shape(format!(
                "maxpool window {} does not fit input {ih}x{iw}",
                self.window
            )));
        }
        Ok(((ih - self.window) / self.stride + 1, (iw - self.window) / self.stride + 1))
    }

    /// Argmax flat index (within the input) per output cell; first max wins.
    fn argmax(&self, x: &Tensor, oh: usize, ow: usize) -> Vec<usize> {
        let (c_n, ih, iw) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let xd = x.data();
        let mut arg = vec![0usize; c_n * oh * ow];
        for c in 0..c_n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for ky in 0..self.window {
                        let iy = oy * self.stride + ky;
                        for kx in 0..self.window {
                            let ix = ox * self.stride + kx;
                            let idx = (c * ih + iy) * iw + ix;
                            if xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    arg[(c * oh + oy) * ow + ox] = best_idx;
                }
            }
        }
        arg
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 3 {
            return Err(Error::Shape(format!("maxpool expects [c, h, w], got {:?}", x.shape())));
        }
        let (oh, ow) = self.out_hw(x.shape()[1], x.shape()[2])?;
        let arg = self.argmax(x, oh, ow);
        let data = arg.iter().map(|&i| x.data()[i]).collect();
        Ok(Tensor::from_vec(&[x.shape()[0], oh, ow], data))
    }

    pub fn backward(&self, x: &Tensor, gy: &Tensor) -> (Tensor, Vec<Tensor>) {
        let (oh, ow) = (gy.shape()[1], gy.shape()[2]);
        let arg = self.argmax(x, oh, ow);
        let mut gx = x.zeros_like();
        for (out_idx, &in_idx) in arg.iter().enumerate() {
            gx.data_mut()[in_idx] += gy.data()[out_idx];
        }
        (gx, vec![])
    }
}

// ---------------------------------------------------------------------------
// fully connected
// ---------------------------------------------------------------------------

/// Linear layer over the flattened input. Weight `[out, in]`, bias `[out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Fc {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Fc {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Fc {
            weight: xavier_uniform(&[out_dim, in_dim], in_dim, out_dim, rng),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.numel() != self.in_dim() {
            return Err(Error::Shape(format!(
                "fc expects {} inputs, got {:?}",
                self.in_dim(),
                x.shape()
            )));
        }
        let (out_d, in_d) = (self.out_dim(), self.in_dim());
        let mut y = self.bias.clone();
        let yd = y.data_mut();
        let xd = x.data();
        for o in 0..out_d {
            let wrow = &self.weight.data()[o * in_d..(o + 1) * in_d];
            let mut acc = 0.0;
            for (wv, xv) in wrow.iter().zip(xd.iter()) {
                acc += wv * xv;
            }
            yd[o] += acc;
        }
        Ok(y)
    }

    /// Returns `(grad_input, [grad_weight, grad_bias])`. `grad_input` keeps
    /// the original (pre-flatten) input shape.
    pub fn backward(&self, x: &Tensor, gy: &Tensor) -> (Tensor, Vec<Tensor>) {
        let (out_d, in_d) = (self.out_dim(), self.in_dim());
        let mut gw = Tensor::zeros(&[out_d, in_d]);
        mm_nn(gy.data(), out_d, 1, x.data(), in_d, gw.data_mut());
        let gb = gy.clone().reshaped(&[out_d]);
        let mut gx = x.zeros_like();
        mm_tn(self.weight.data(), out_d, in_d, gy.data(), 1, gx.data_mut());
        (gx, vec![gw, gb])
    }
}

// ---------------------------------------------------------------------------
// layer enum + sequential
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    Relu,
    MaxPool2d(MaxPool2d),
    Fc(Fc),
    /// Fixed input normalization `(x - mean) / std` applied elementwise.
    /// Gradient scales by `1/std`.
    InputNorm { mean: f64, std: f64 },
}

impl Layer {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv2d(c) => c.forward(x),
            Layer::Relu => Ok(Tensor::from_vec(
                x.shape(),
                x.data().iter().map(|&v| v.max(0.0)).collect(),
            )),
            Layer::MaxPool2d(p) => p.forward(x),
            Layer::Fc(f) => f.forward(x),
            Layer::InputNorm { mean, std } => Ok(Tensor::from_vec(
                x.shape(),
                x.data().iter().map(|&v| (v - mean) / std).collect(),
            )),
        }
    }

    /// Gradients wrt input and parameters, given the cached layer input `x`.
    pub fn backward(&self, x: &Tensor, gy: &Tensor) -> (Tensor, Vec<Tensor>) {
        match self {
            Layer::Conv2d(c) => c.backward(x, gy),
            Layer::Relu => {
                let data = x
                    .data()
                    .iter()
                    .zip(gy.data().iter())
                    .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                (Tensor::from_vec(x.shape(), data), vec![])
            }
            Layer::MaxPool2d(p) => p.backward(x, gy),
            Layer::Fc(f) => f.backward(x, gy),
            Layer::InputNorm { std, .. } => {
                let mut g = gy.clone();
                g.scale(1.0 / std);
                (g, vec![])
            }
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Conv2d(c) => vec![&c.weight, &c.bias],
            Layer::Fc(f) => vec![&f.weight, &f.bias],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Conv2d(c) => vec![&mut c.weight, &mut c.bias],
            Layer::Fc(f) => vec![&mut f.weight, &mut f.bias],
            _ => vec![],
        }
    }
}

/// Ordered layer stack.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

/// Cached activations from one forward pass: `inputs[i]` is what layer `i`
/// consumed, `output` is the stack's result.
#[derive(Clone, Debug)]
pub struct Trace {
    pub inputs: Vec<Tensor>,
    pub output: Tensor,
}

/// Per-layer, per-parameter gradient tensors, aligned with
/// [`Sequential::params`] order.
pub type SeqGrads = Vec<Vec<Tensor>>;

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Sequential { layers }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Trace> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let next = layer.forward(&cur)?;
            inputs.push(cur);
            cur = next;
        }
        Ok(Trace {
            inputs,
            output: cur,
        })
    }

    /// Backprop `gy` (gradient wrt the output) through the stack.
    /// Returns the gradient wrt the stack input and per-layer param grads.
    pub fn backward(&self, trace: &Trace, gy: &Tensor) -> (Tensor, SeqGrads) {
        assert_eq!(trace.inputs.len(), self.layers.len(), "trace does not match network");
        let mut grads: SeqGrads = vec![Vec::new(); self.layers.len()];
        let mut g = gy.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (gx, pg) = layer.backward(&trace.inputs[i], &g);
            grads[i] = pg;
            g = gx;
        }
        (g, grads)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    /// Flatten per-layer grads into [`Sequential::params`] order.
    pub fn flatten_grads(grads: SeqGrads) -> Vec<Tensor> {
        grads.into_iter().flatten().collect()
    }

    /// Shape produced for a given input shape (runs shape arithmetic only
    /// for conv/pool; fc flattens).
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut shape = input.to_vec();
        for layer in &self.layers {
            shape = match layer {
                Layer::Conv2d(c) => {
                    if shape.len() != 3 || shape[0] != c.in_channels() {
                        return Err(Error::Shape(format!(
                            "conv2d expects [{}, h, w], got {shape:?}",
                            c.in_channels()
                        )));
                    }
                    let (oh, ow) = c.out_hw(shape[1], shape[2])?;
                    vec![c.out_channels(), oh, ow]
                }
                Layer::Relu => shape,
                Layer::MaxPool2d(p) => {
                    let (oh, ow) = p.out_hw(shape[1], shape[2])?;
                    vec![shape[0], oh, ow]
                }
                Layer::Fc(f) => {
                    if shape.iter().product::<usize>() != f.in_dim() {
                        return Err(Error::Shape(format!(
                            "fc expects {} inputs, got {shape:?}",
                            f.in_dim()
                        )));
                    }
                    vec![f.out_dim()]
                }
                Layer::InputNorm { .. } => shape,
            };
        }
        Ok(shape)
    }
}
