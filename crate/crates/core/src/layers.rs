//! Minimal convolutional layer stack with explicit reverse-mode gradients.
//!
//! Everything works on one sample at a time ([`Tensor`] is CHW). Batched
//! training accumulates per-sample parameter gradients into a shared
//! [`Grads`] buffer, which is exact because every network here is
//! sample-separable (instance normalization, no batch statistics).

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::rng::SeededRng;
use crate::tensor::{gemm, Tensor};
use rand::Rng;

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// A named, flat parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered parameter collection owned by one network.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    pub tensors: Vec<ParamTensor>,
}

/// Gradient buffers aligned with a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Vec<f64>>);

impl ParamSet {
    pub fn push(&mut self, name: String, shape: Vec<usize>, data: Vec<f64>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(ParamTensor { name, shape, data });
        self.tensors.len() - 1
    }

    pub fn zero_grads(&self) -> Grads {
        Grads(self.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// FNV-1a over names, shapes and the exact bit patterns of all values.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for t in &self.tensors {
            eat(t.name.as_bytes());
            for &d in &t.shape {
                eat(&(d as u64).to_le_bytes());
            }
            for &v in &t.data {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// True when both sets have the same names and shapes, in order.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }
}

impl Grads {
    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.0 {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: usize,
    pub bias: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub pad: usize,
    pub pad_mode: PadMode,
}

/// Fractionally-strided convolution. Weight layout is `[in][out][kh][kw]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: usize,
    pub bias: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub output_pad: usize,
}

#[derive(Debug, Clone)]
pub enum Op {
    Conv(Conv2d),
    ConvTranspose(ConvTranspose2d),
    InstanceNorm,
    Relu,
    LeakyRelu(f64),
    Tanh,
    /// `y = x + body(x)`
    Residual(Vec<Op>),
}

#[derive(Debug)]
pub enum Cache {
    Conv { cols: Vec<f64>, in_shape: (usize, usize, usize) },
    ConvTranspose { input: Tensor },
    InstanceNorm { xhat: Vec<f64>, inv_std: Vec<f64> },
    Relu { out: Vec<f64> },
    LeakyRelu { input: Vec<f64> },
    Tanh { out: Vec<f64> },
    Residual(Vec<Cache>),
}

impl Conv2d {
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let (kh, kw) = self.kernel;
        ((h + 2 * self.pad - kh) / self.stride + 1, (w + 2 * self.pad - kw) / self.stride + 1)
    }

    /// Appends the weight and bias for this layer, uniform in `±1/sqrt(fan_in)`.
    #[allow(clippy::too_many_arguments)]
    pub fn new_init(
        params: &mut ParamSet,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        pad: usize,
        pad_mode: PadMode,
        rng: &mut SeededRng,
    ) -> Self {
        let fan_in = in_channels * kernel.0 * kernel.1;
        let bound = 1.0 / libm::sqrt(fan_in as f64);
        let n = out_channels * fan_in;
        let w = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        let b = (0..out_channels).map(|_| rng.random_range(-bound..bound)).collect();
        let weight = params.push(
            alloc::format!("{name}.weight"),
            vec![out_channels, in_channels, kernel.0, kernel.1],
            w,
        );
        let bias = params.push(alloc::format!("{name}.bias"), vec![out_channels], b);
        Conv2d { weight, bias, in_channels, out_channels, kernel, stride, pad, pad_mode }
    }
}

impl ConvTranspose2d {
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |n: usize| (n - 1) * self.stride + self.kernel + self.output_pad - 2 * self.pad;
        (f(h), f(w))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new_init(
        params: &mut ParamSet,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        output_pad: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let bound = 1.0 / libm::sqrt(fan_in as f64);
        let n = in_channels * out_channels * kernel * kernel;
        let w = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        let b = (0..out_channels).map(|_| rng.random_range(-bound..bound)).collect();
        let weight = params.push(
            alloc::format!("{name}.weight"),
            vec![in_channels, out_channels, kernel, kernel],
            w,
        );
        let bias = params.push(alloc::format!("{name}.bias"), vec![out_channels], b);
        ConvTranspose2d { weight, bias, in_channels, out_channels, kernel, stride, pad, output_pad }
    }
}

#[inline]
fn source_index(i: isize, n: usize, mode: PadMode) -> Option<usize> {
    if i >= 0 && (i as usize) < n {
        return Some(i as usize);
    }
    match mode {
        PadMode::Zero => None,
        PadMode::Reflect => {
            let last = n as isize - 1;
            let r = if i < 0 { -i } else { 2 * last - i };
            debug_assert!(r >= 0 && r <= last, "reflection pad wider than input");
            Some(r as usize)
        }
    }
}

/// Geometry of a (possibly padded, strided) sliding window.
#[derive(Debug, Clone, Copy)]
struct Window {
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    mode: PadMode,
    out_h: usize,
    out_w: usize,
}

/// Unfolds `x` into a `(C*kh*kw) x (out_h*out_w)` row-major matrix.
fn im2col(x: &Tensor, g: Window) -> Vec<f64> {
    let (c, h, w) = x.shape();
    let p = g.out_h * g.out_w;
    let mut cols = vec![0.0; c * g.kh * g.kw * p];
    for ch in 0..c {
        let plane = &x.data[ch * h * w..(ch + 1) * h * w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ch * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let Some(sy) = source_index(iy, h, g.mode) else { continue };
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if let Some(sx) = source_index(ix, w, g.mode) {
                            dst[oy * g.out_w + ox] = plane[sy * w + sx];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back onto a `c x h x w` map.
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, g: Window) -> Tensor {
    let p = g.out_h * g.out_w;
    let mut out = Tensor::zeros(c, h, w);
    for ch in 0..c {
        let plane = &mut out.data[ch * h * w..(ch + 1) * h * w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ch * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let Some(sy) = source_index(iy, h, g.mode) else { continue };
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if let Some(sx) = source_index(ix, w, g.mode) {
                            plane[sy * w + sx] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

fn add_bias(out: &mut Tensor, bias: &[f64]) {
    let plane = out.plane_len();
    for (ch, b) in bias.iter().enumerate() {
        for v in &mut out.data[ch * plane..(ch + 1) * plane] {
            *v += b;
        }
    }
}

fn accumulate_bias_grad(dy: &Tensor, db: &mut [f64]) {
    let plane = dy.plane_len();
    for (ch, g) in db.iter_mut().enumerate() {
        *g += dy.data[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
    }
}

impl Conv2d {
    fn window(&self, h: usize, w: usize) -> Window {
        let (out_h, out_w) = self.output_size(h, w);
        Window {
            kh: self.kernel.0,
            kw: self.kernel.1,
            stride: self.stride,
            pad: self.pad,
            mode: self.pad_mode,
            out_h,
            out_w,
        }
    }

    fn forward(&self, params: &ParamSet, x: &Tensor) -> (Tensor, Vec<f64>) {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let g = self.window(x.height, x.width);
        let cols = im2col(x, g);
        let k = self.in_channels * g.kh * g.kw;
        let p = g.out_h * g.out_w;
        let mut out = Tensor::zeros(self.out_channels, g.out_h, g.out_w);
        gemm(self.out_channels, k, p, &params.tensors[self.weight].data, false, &cols, false, 0.0, &mut out.data);
        add_bias(&mut out, &params.tensors[self.bias].data);
        (out, cols)
    }

    fn backward(
        &self,
        params: &ParamSet,
        cols: &[f64],
        in_shape: (usize, usize, usize),
        dy: &Tensor,
        grads: Option<&mut Grads>,
    ) -> Tensor {
        let (c, h, w) = in_shape;
        let g = self.window(h, w);
        let k = self.in_channels * g.kh * g.kw;
        let p = g.out_h * g.out_w;
        if let Some(grads) = grads {
            gemm(self.out_channels, p, k, &dy.data, false, cols, true, 1.0, &mut grads.0[self.weight]);
            accumulate_bias_grad(dy, &mut grads.0[self.bias]);
        }
        let mut dcols = vec![0.0; k * p];
        gemm(k, self.out_channels, p, &params.tensors[self.weight].data, true, &dy.data, false, 0.0, &mut dcols);
        col2im(&dcols, c, h, w, g)
    }
}

impl ConvTranspose2d {
    /// Window of the adjoint convolution, mapping output space back to input space.
    fn window(&self, in_h: usize, in_w: usize) -> Window {
        Window {
            kh: self.kernel,
            kw: self.kernel,
            stride: self.stride,
            pad: self.pad,
            mode: PadMode::Zero,
            out_h: in_h,
            out_w: in_w,
        }
    }

    fn forward(&self, params: &ParamSet, x: &Tensor) -> Tensor {
        assert_eq!(x.channels, self.in_channels, "transposed conv input channels");
        let (oh, ow) = self.output_size(x.height, x.width);
        let g = self.window(x.height, x.width);
        let rows = self.out_channels * self.kernel * self.kernel;
        let p = x.plane_len();
        let mut cols = vec![0.0; rows * p];
        gemm(rows, self.in_channels, p, &params.tensors[self.weight].data, true, &x.data, false, 0.0, &mut cols);
        let mut out = col2im(&cols, self.out_channels, oh, ow, g);
        add_bias(&mut out, &params.tensors[self.bias].data);
        out
    }

    fn backward(&self, params: &ParamSet, input: &Tensor, dy: &Tensor, grads: Option<&mut Grads>) -> Tensor {
        let g = self.window(input.height, input.width);
        let rows = self.out_channels * self.kernel * self.kernel;
        let p = input.plane_len();
        let dcols = im2col(dy, g);
        if let Some(grads) = grads {
            gemm(self.in_channels, p, rows, &input.data, false, &dcols, true, 1.0, &mut grads.0[self.weight]);
            accumulate_bias_grad(dy, &mut grads.0[self.bias]);
        }
        let mut dx = Tensor::zeros(self.in_channels, input.height, input.width);
        gemm(self.in_channels, rows, p, &params.tensors[self.weight].data, false, &dcols, false, 0.0, &mut dx.data);
        dx
    }
}

fn instance_norm(x: &Tensor) -> (Tensor, Vec<f64>) {
    let n = x.plane_len();
    let mut out = x.clone();
    let mut inv_stds = Vec::with_capacity(x.channels);
    for plane in out.data.chunks_mut(n) {
        let mean = plane.iter().sum::<f64>() / n as f64;
        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv_std = 1.0 / libm::sqrt(var + INSTANCE_NORM_EPS);
        for v in plane.iter_mut() {
            *v = (*v - mean) * inv_std;
        }
        inv_stds.push(inv_std);
    }
    (out, inv_stds)
}

fn instance_norm_backward(xhat: &[f64], inv_std: &[f64], dy: &Tensor) -> Tensor {
    let n = dy.plane_len();
    let mut dx = dy.clone();
    for (ch, plane) in dx.data.chunks_mut(n).enumerate() {
        let xh = &xhat[ch * n..(ch + 1) * n];
        let sum_dy: f64 = plane.iter().sum();
        let sum_dy_xhat: f64 = plane.iter().zip(xh).map(|(d, x)| d * x).sum();
        let scale = inv_std[ch] / n as f64;
        for (d, x) in plane.iter_mut().zip(xh) {
            *d = scale * (n as f64 * *d - sum_dy - x * sum_dy_xhat);
        }
    }
    dx
}

/// Runs `ops` on `x`. When `tape` is given, caches needed for [`backward`]
/// are pushed onto it in execution order.
pub fn forward(ops: &[Op], params: &ParamSet, x: Tensor, mut tape: Option<&mut Vec<Cache>>) -> Tensor {
    let mut cur = x;
    for op in ops {
        cur = match op {
            Op::Conv(conv) => {
                let in_shape = cur.shape();
                let (out, cols) = conv.forward(params, &cur);
                if let Some(t) = tape.as_deref_mut() {
                    t.push(Cache::Conv { cols, in_shape });
                }
                out
            }
            Op::ConvTranspose(conv) => {
                let out = conv.forward(params, &cur);
                if let Some(t) = tape.as_deref_mut() {
                    t.push(Cache::ConvTranspose { input: cur });
                }
                out
            }
            Op::InstanceNorm => {
                let (out, inv_std) = instance_norm(&cur);
                if let Some(t) = tape.as_deref_mut() {
                    t.push(Cache::InstanceNorm { xhat: out.data.clone(), inv_std });
                }
                out
            }
            Op::Relu => {
                let out = cur.map(|v| if v > 0.0 { v } else { 0.0 });
                if let Some(t) = tape.as_deref_mut() {
                    t.push(Cache::Relu { out: out.data.clone() });
                }
                out
            }
            Op::LeakyRelu(slope) => {
                let s = *slope;
                let out = cur.map(|v| if v > 0.0 { v } else { s * v });
                if let Some(t) = tape.as_deref_mut() {
                    t.push(Cache::LeakyRelu { input: cur.data });
                }
                out
            }
            Op::Tanh => {
                let out = cur.map(libm::tanh);
                if let Some(t) = tape.as_deref_mut() {
                    t.push(Cache::Tanh { out: out.data.clone() });
                }
                out
            }
            Op::Residual(body) => match tape.as_deref_mut() {
                Some(t) => {
                    let mut inner = Vec::new();
                    let mut out = forward(body, params, cur.clone(), Some(&mut inner));
                    out.add_assign(&cur);
                    t.push(Cache::Residual(inner));
                    out
                }
                None => {
                    let mut out = forward(body, params, cur.clone(), None);
                    out.add_assign(&cur);
                    out
                }
            },
        };
    }
    cur
}

/// Reverse pass through `ops`, consuming the tape produced by [`forward`].
/// Parameter gradients are accumulated when `grads` is given; the gradient
/// with respect to the input is returned.
pub fn backward(
    ops: &[Op],
    params: &ParamSet,
    tape: Vec<Cache>,
    dy: Tensor,
    mut grads: Option<&mut Grads>,
) -> Tensor {
    assert_eq!(ops.len(), tape.len(), "tape does not match op list");
    let mut grad = dy;
    for (op, cache) in ops.iter().zip(tape).rev() {
        grad = match (op, cache) {
            (Op::Conv(conv), Cache::Conv { cols, in_shape }) => {
                conv.backward(params, &cols, in_shape, &grad, grads.as_deref_mut())
            }
            (Op::ConvTranspose(conv), Cache::ConvTranspose { input }) => {
                conv.backward(params, &input, &grad, grads.as_deref_mut())
            }
            (Op::InstanceNorm, Cache::InstanceNorm { xhat, inv_std }) => {
                instance_norm_backward(&xhat, &inv_std, &grad)
            }
            (Op::Relu, Cache::Relu { out }) => {
                let mut g = grad;
                for (d, o) in g.data.iter_mut().zip(&out) {
                    if *o <= 0.0 {
                        *d = 0.0;
                    }
                }
                g
            }
            (Op::LeakyRelu(slope), Cache::LeakyRelu { input }) => {
                let mut g = grad;
                for (d, x) in g.data.iter_mut().zip(&input) {
                    if *x <= 0.0 {
                        *d *= slope;
                    }
                }
                g
            }
            (Op::Tanh, Cache::Tanh { out }) => {
                let mut g = grad;
                for (d, o) in g.data.iter_mut().zip(&out) {
                    *d *= 1.0 - o * o;
                }
                g
            }
            (Op::Residual(body), Cache::Residual(inner)) => {
                let mut g = backward(body, params, inner, grad.clone(), grads.as_deref_mut());
                g.add_assign(&grad);
                g
            }
            _ => panic!("tape entry does not match op"),
        };
    }
    grad
}
