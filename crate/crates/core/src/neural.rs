//! Minimal tensor and reverse-mode differentiation stack for the generative
//! models: 3x3 same-padding convolution, 2x2 average subsampling, 2x nearest
//! upsampling, fully connected layers and ELU, with Adam updates and a
//! versioned binary checkpoint format.
//!
//! Networks are fixed layer stacks (no general graphs). A forward pass
//! records the inputs of every layer in a [`ForwardTrace`]; the backward pass
//! walks the stack in reverse, accumulating parameter gradients scaled by a
//! caller-provided coefficient so batch means compose naturally.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fmath;
use crate::gemm::dgemm;

/// N-dimensional value buffer with a same-shaped gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    pub fn from_values(shape: &[usize], values: Vec<f64>) -> Result<Self, NeuralError> {
        let n: usize = shape.iter().product();
        if values.len() != n {
            return Err(NeuralError::ShapeMismatch {
                expected: n,
                got: values.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            grad: vec![0.0; n],
            values,
        })
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let a = fmath::sqrt(6.0 / (fan_in + fan_out) as f64);
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.gen_range(-a..a)).collect();
        Self {
            shape: shape.to_vec(),
            values,
            grad: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NeuralError {
    ShapeMismatch { expected: usize, got: usize },
    /// Layer input/output shapes do not compose.
    BadComposition { layer: usize, detail: String },
    /// Spatial side must be divisible by 2 for each subsampling stage.
    NotDivisible { side: usize },
    /// Backward called with a trace from a different forward shape.
    TraceMismatch,
    NonFiniteGradient { parameter: String },
    Checkpoint(String),
}

impl fmt::Display for NeuralError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NeuralError::ShapeMismatch { expected, got } => {
                write!(f, "buffer has {got} values, expected {expected}")
            }
            NeuralError::BadComposition { layer, detail } => {
                write!(f, "layer {layer} does not compose: {detail}")
            }
            NeuralError::NotDivisible { side } => {
                write!(f, "spatial side {side} is not divisible by 2")
            }
            NeuralError::TraceMismatch => write!(f, "trace does not match this network/input"),
            NeuralError::NonFiniteGradient { parameter } => {
                write!(f, "non-finite gradient in {parameter}")
            }
            NeuralError::Checkpoint(msg) => write!(f, "checkpoint: {msg}"),
        }
    }
}

impl core::error::Error for NeuralError {}

/// Architecture description; shapes are inferred at construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Conv3x3 { in_ch: usize, out_ch: usize },
    Subsample2x2,
    Upsample2x,
    /// Flattens its input; optionally reshapes the output to `(c, h, w)` so a
    /// convolution stack can follow.
    FullyConnected {
        in_dim: usize,
        out_dim: usize,
        reshape_to: Option<[usize; 3]>,
    },
    Elu,
}

/// One layer with its parameters (if any).
#[derive(Debug, Clone)]
enum Layer {
    Conv3x3 {
        in_ch: usize,
        out_ch: usize,
        /// `[out_ch, in_ch * 9]`, kernel row-major per output channel.
        weight: Tensor,
        bias: Tensor,
    },
    Subsample2x2,
    Upsample2x,
    FullyConnected {
        in_dim: usize,
        out_dim: usize,
        reshape_to: Option<[usize; 3]>,
        /// `[out_dim, in_dim]`.
        weight: Tensor,
        bias: Tensor,
    },
    Elu,
}

/// Shape of an activation: channels, height, width (dense vectors are
/// `(d, 1, 1)`).
pub type ActShape = [usize; 3];

/// A fixed stack of layers; input shape `(channels, side, side)`.
#[derive(Debug, Clone)]
pub struct Network {
    input_shape: ActShape,
    layers: Vec<Layer>,
    /// Output shape after each layer.
    shapes: Vec<ActShape>,
}

/// Recorded inputs of each layer from one forward pass.
pub struct ForwardTrace {
    inputs: Vec<Vec<f64>>,
    output_len: usize,
}

impl Network {
    /// Builds and initializes a network; weights are Glorot-uniform from the
    /// given RNG, biases zero.
    pub fn new(
        input_shape: ActShape,
        specs: &[LayerSpec],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, NeuralError> {
        let mut layers = Vec::with_capacity(specs.len());
        let mut shapes = Vec::with_capacity(specs.len());
        let mut cur = input_shape;
        for (i, spec) in specs.iter().enumerate() {
            let (layer, next) = match spec {
                LayerSpec::Conv3x3 { in_ch, out_ch } => {
                    if cur[0] != *in_ch {
                        return Err(NeuralError::BadComposition {
                            layer: i,
                            detail: alloc::format!("conv expects {in_ch} channels, got {}", cur[0]),
                        });
                    }
                    let fan_in = in_ch * 9;
                    let fan_out = out_ch * 9;
                    let weight = Tensor::glorot_uniform(&[*out_ch, in_ch * 9], fan_in, fan_out, rng);
                    let bias = Tensor::zeros(&[*out_ch]);
                    (
                        Layer::Conv3x3 {
                            in_ch: *in_ch,
                            out_ch: *out_ch,
                            weight,
                            bias,
                        },
                        [*out_ch, cur[1], cur[2]],
                    )
                }
                LayerSpec::Subsample2x2 => {
                    if cur[1] % 2 != 0 || cur[2] % 2 != 0 {
                        return Err(NeuralError::NotDivisible { side: cur[1] });
                    }
                    (Layer::Subsample2x2, [cur[0], cur[1] / 2, cur[2] / 2])
                }
                LayerSpec::Upsample2x => (Layer::Upsample2x, [cur[0], cur[1] * 2, cur[2] * 2]),
                LayerSpec::FullyConnected {
                    in_dim,
                    out_dim,
                    reshape_to,
                } => {
                    let flat = cur[0] * cur[1] * cur[2];
                    if flat != *in_dim {
                        return Err(NeuralError::BadComposition {
                            layer: i,
                            detail: alloc::format!("fc expects {in_dim} inputs, got {flat}"),
                        });
                    }
                    let next = match reshape_to {
                        Some([c, h, w]) => {
                            if c * h * w != *out_dim {
                                return Err(NeuralError::BadComposition {
                                    layer: i,
                                    detail: String::from("fc reshape does not match out_dim"),
                                });
                            }
                            [*c, *h, *w]
                        }
                        None => [*out_dim, 1, 1],
                    };
                    let weight = Tensor::glorot_uniform(&[*out_dim, *in_dim], *in_dim, *out_dim, rng);
                    let bias = Tensor::zeros(&[*out_dim]);
                    (
                        Layer::FullyConnected {
                            in_dim: *in_dim,
                            out_dim: *out_dim,
                            reshape_to: *reshape_to,
                            weight,
                            bias,
                        },
                        next,
                    )
                }
                LayerSpec::Elu => (Layer::Elu, cur),
            };
            layers.push(layer);
            shapes.push(next);
            cur = next;
        }
        Ok(Self {
            input_shape,
            layers,
            shapes,
        })
    }

    pub fn input_shape(&self) -> ActShape {
        self.input_shape
    }

    pub fn output_shape(&self) -> ActShape {
        *self.shapes.last().unwrap_or(&self.input_shape)
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn output_len(&self) -> usize {
        let s = self.output_shape();
        s[0] * s[1] * s[2]
    }

    /// Layer specs reconstructed from the live network.
    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv3x3 { in_ch, out_ch, .. } => LayerSpec::Conv3x3 {
                    in_ch: *in_ch,
                    out_ch: *out_ch,
                },
                Layer::Subsample2x2 => LayerSpec::Subsample2x2,
                Layer::Upsample2x => LayerSpec::Upsample2x,
                Layer::FullyConnected {
                    in_dim,
                    out_dim,
                    reshape_to,
                    ..
                } => LayerSpec::FullyConnected {
                    in_dim: *in_dim,
                    out_dim: *out_dim,
                    reshape_to: *reshape_to,
                },
                Layer::Elu => LayerSpec::Elu,
            })
            .collect()
    }

    /// Immutable views of all parameter tensors in declaration order
    /// (weight, bias per parameterized layer).
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Conv3x3 { weight, bias, .. }
                | Layer::FullyConnected { weight, bias, .. } => {
                    out.push(weight);
                    out.push(bias);
                }
                _ => {}
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Conv3x3 { weight, bias, .. }
                | Layer::FullyConnected { weight, bias, .. } => {
                    out.push(weight);
                    out.push(bias);
                }
                _ => {}
            }
        }
        out
    }

    /// Human-readable parameter paths, parallel to [`Self::parameters`].
    pub fn parameter_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                Layer::Conv3x3 { .. } => {
                    out.push(alloc::format!("layer{i}.conv.weight"));
                    out.push(alloc::format!("layer{i}.conv.bias"));
                }
                Layer::FullyConnected { .. } => {
                    out.push(alloc::format!("layer{i}.fc.weight"));
                    out.push(alloc::format!("layer{i}.fc.bias"));
                }
                _ => {}
            }
        }
        out
    }

    pub fn zero_grads(&mut self) {
        for p in self.parameters_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Forward pass for one sample; records layer inputs for backward.
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardTrace), NeuralError> {
        if input.len() != self.input_len() {
            return Err(NeuralError::ShapeMismatch {
                expected: self.input_len(),
                got: input.len(),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut cur = input.to_vec();
        let mut shape = self.input_shape;
        for (l, out_shape) in self.layers.iter().zip(&self.shapes) {
            let next = apply_forward(l, &cur, shape);
            inputs.push(core::mem::replace(&mut cur, next));
            shape = *out_shape;
        }
        let output_len = cur.len();
        Ok((cur, ForwardTrace { inputs, output_len }))
    }

    /// Output without recording a trace.
    pub fn infer(&self, input: &[f64]) -> Result<Vec<f64>, NeuralError> {
        self.forward(input).map(|(out, _)| out)
    }

    /// Reverse-mode pass: propagates `out_grad` back to the input, adding
    /// `scale * dL/dp` into each parameter's gradient accumulator. With
    /// `accumulate_params` false only the input gradient is computed.
    pub fn backward(
        &mut self,
        trace: &ForwardTrace,
        out_grad: &[f64],
        scale: f64,
        accumulate_params: bool,
    ) -> Result<Vec<f64>, NeuralError> {
        if trace.inputs.len() != self.layers.len() || out_grad.len() != trace.output_len {
            return Err(NeuralError::TraceMismatch);
        }
        let mut grad = out_grad.to_vec();
        let shapes_in: Vec<ActShape> = core::iter::once(self.input_shape)
            .chain(self.shapes.iter().copied())
            .collect();
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            let input = &trace.inputs[i];
            let in_shape = shapes_in[i];
            grad = apply_backward(layer, input, in_shape, &grad, scale, accumulate_params);
        }
        Ok(grad)
    }
}

/// Elementwise ELU: `x` if positive else `e^x - 1`.
pub fn elu(x: &Tensor) -> Tensor {
    let values = x.values.iter().map(|&v| elu_scalar(v)).collect();
    Tensor {
        shape: x.shape.clone(),
        values,
        grad: vec![0.0; x.numel()],
    }
}

#[inline]
pub fn elu_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        fmath::exp(x) - 1.0
    }
}

/// Same-padding 3x3 cross-correlation of a `(c, h, w)` input.
pub fn conv3x3_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
) -> Result<Tensor, NeuralError> {
    let [c, h, w] = [input.shape[0], input.shape[1], input.shape[2]];
    let out_ch = weight.shape[0];
    if weight.shape[1] != c * 9 {
        return Err(NeuralError::ShapeMismatch {
            expected: c * 9,
            got: weight.shape[1],
        });
    }
    let out = conv3x3_run(&input.values, [c, h, w], &weight.values, &bias.values, out_ch);
    Tensor::from_values(&[out_ch, h, w], out)
}

fn apply_forward(layer: &Layer, input: &[f64], shape: ActShape) -> Vec<f64> {
    match layer {
        Layer::Conv3x3 {
            out_ch,
            weight,
            bias,
            ..
        } => conv3x3_run(input, shape, &weight.values, &bias.values, *out_ch),
        Layer::Subsample2x2 => subsample_run(input, shape),
        Layer::Upsample2x => upsample_run(input, shape),
        Layer::FullyConnected {
            out_dim,
            weight,
            bias,
            ..
        } => {
            let mut out = bias.values.clone();
            dgemm(*out_dim, input.len(), 1, 1.0, &weight.values, input, 1.0, &mut out);
            out
        }
        Layer::Elu => input.iter().map(|&v| elu_scalar(v)).collect(),
    }
}

fn apply_backward(
    layer: &mut Layer,
    input: &[f64],
    in_shape: ActShape,
    out_grad: &[f64],
    scale: f64,
    accumulate: bool,
) -> Vec<f64> {
    match layer {
        Layer::Conv3x3 {
            in_ch,
            out_ch,
            weight,
            bias,
        } => {
            let (h, w) = (in_shape[1], in_shape[2]);
            let pixels = h * w;
            let cols = im2col(input, *in_ch, h, w);
            if accumulate {
                // dW += scale * out_grad(out_ch x pixels) . cols^T
                let mut dw = vec![0.0; weight.values.len()];
                dgemm_bt(*out_ch, pixels, *in_ch * 9, out_grad, &cols, &mut dw);
                for (g, d) in weight.grad.iter_mut().zip(&dw) {
                    *g += scale * d;
                }
                for oc in 0..*out_ch {
                    let s: f64 = out_grad[oc * pixels..(oc + 1) * pixels].iter().sum();
                    bias.grad[oc] += scale * s;
                }
            }
            // dcols = W^T . out_grad, then scatter back to the input grid.
            let mut dcols = vec![0.0; *in_ch * 9 * pixels];
            dgemm_at(*out_ch, *in_ch * 9, pixels, &weight.values, out_grad, &mut dcols);
            col2im(&dcols, *in_ch, h, w)
        }
        Layer::Subsample2x2 => {
            let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
            let (oh, ow) = (h / 2, w / 2);
            let mut dx = vec![0.0; c * h * w];
            for ch in 0..c {
                for r in 0..oh {
                    for col in 0..ow {
                        let g = 0.25 * out_grad[ch * oh * ow + r * ow + col];
                        let base = ch * h * w + 2 * r * w + 2 * col;
                        dx[base] += g;
                        dx[base + 1] += g;
                        dx[base + w] += g;
                        dx[base + w + 1] += g;
                    }
                }
            }
            dx
        }
        Layer::Upsample2x => {
            let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
            let (oh, ow) = (h * 2, w * 2);
            let mut dx = vec![0.0; c * h * w];
            for ch in 0..c {
                for r in 0..oh {
                    for col in 0..ow {
                        dx[ch * h * w + (r / 2) * w + col / 2] +=
                            out_grad[ch * oh * ow + r * ow + col];
                    }
                }
            }
            dx
        }
        Layer::FullyConnected {
            in_dim,
            out_dim,
            weight,
            bias,
            ..
        } => {
            if accumulate {
                for o in 0..*out_dim {
                    let g = out_grad[o];
                    if g != 0.0 {
                        let row = &mut weight.grad[o * *in_dim..(o + 1) * *in_dim];
                        for (wg, &x) in row.iter_mut().zip(input) {
                            *wg += scale * g * x;
                        }
                    }
                    bias.grad[o] += scale * g;
                }
            }
            let mut dx = vec![0.0; *in_dim];
            for o in 0..*out_dim {
                let g = out_grad[o];
                if g != 0.0 {
                    let row = &weight.values[o * *in_dim..(o + 1) * *in_dim];
                    for (d, &wv) in dx.iter_mut().zip(row) {
                        *d += g * wv;
                    }
                }
            }
            dx
        }
        Layer::Elu => input
            .iter()
            .zip(out_grad)
            .map(|(&x, &g)| if x > 0.0 { g } else { g * fmath::exp(x) })
            .collect(),
    }
}

/// im2col for a 3x3 same-padding kernel: `(c*9) x (h*w)` column matrix.
fn im2col(input: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let pixels = h * w;
    let mut cols = vec![0.0; c * 9 * pixels];
    for ch in 0..c {
        let plane = &input[ch * pixels..(ch + 1) * pixels];
        for kr in 0..3usize {
            for kc in 0..3usize {
                let krow = ch * 9 + kr * 3 + kc;
                let dst = &mut cols[krow * pixels..(krow + 1) * pixels];
                for r in 0..h {
                    let sr = r as isize + kr as isize - 1;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    let sr = sr as usize;
                    // shift the row by kc-1 with zero padding
                    let (dst_row, src_row) =
                        (&mut dst[r * w..(r + 1) * w], &plane[sr * w..(sr + 1) * w]);
                    match kc {
                        0 => dst_row[1..].copy_from_slice(&src_row[..w - 1]),
                        1 => dst_row.copy_from_slice(src_row),
                        _ => dst_row[..w - 1].copy_from_slice(&src_row[1..]),
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates column gradients back onto the grid.
fn col2im(dcols: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let pixels = h * w;
    let mut dx = vec![0.0; c * pixels];
    for ch in 0..c {
        let plane = &mut dx[ch * pixels..(ch + 1) * pixels];
        for kr in 0..3usize {
            for kc in 0..3usize {
                let krow = ch * 9 + kr * 3 + kc;
                let src = &dcols[krow * pixels..(krow + 1) * pixels];
                for r in 0..h {
                    let sr = r as isize + kr as isize - 1;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    let sr = sr as usize;
                    let dst_row = &mut plane[sr * w..(sr + 1) * w];
                    let src_row = &src[r * w..(r + 1) * w];
                    match kc {
                        0 => {
                            for i in 1..w {
                                dst_row[i - 1] += src_row[i];
                            }
                        }
                        1 => {
                            for i in 0..w {
                                dst_row[i] += src_row[i];
                            }
                        }
                        _ => {
                            for i in 0..w - 1 {
                                dst_row[i + 1] += src_row[i];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn conv3x3_run(
    input: &[f64],
    shape: ActShape,
    weight: &[f64],
    bias: &[f64],
    out_ch: usize,
) -> Vec<f64> {
    let [c, h, w] = shape;
    let pixels = h * w;
    let cols = im2col(input, c, h, w);
    let mut out = vec![0.0; out_ch * pixels];
    dgemm(out_ch, c * 9, pixels, 1.0, weight, &cols, 0.0, &mut out);
    for oc in 0..out_ch {
        let b = bias[oc];
        if b != 0.0 {
            for v in &mut out[oc * pixels..(oc + 1) * pixels] {
                *v += b;
            }
        }
    }
    out
}

fn subsample_run(input: &[f64], shape: ActShape) -> Vec<f64> {
    let [c, h, w] = shape;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for r in 0..oh {
            for col in 0..ow {
                let base = ch * h * w + 2 * r * w + 2 * col;
                out[ch * oh * ow + r * ow + col] =
                    0.25 * (input[base] + input[base + 1] + input[base + w] + input[base + w + 1]);
            }
        }
    }
    out
}

fn upsample_run(input: &[f64], shape: ActShape) -> Vec<f64> {
    let [c, h, w] = shape;
    let (oh, ow) = (h * 2, w * 2);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for r in 0..oh {
            for col in 0..ow {
                out[ch * oh * ow + r * ow + col] = input[ch * h * w + (r / 2) * w + col / 2];
            }
        }
    }
    out
}

/// `c += a . b^T` with `a` (m x k), `b` (n x k), `c` (m x n).
fn dgemm_bt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for l in 0..k {
                acc += arow[l] * brow[l];
            }
            c[i * n + j] += acc;
        }
    }
}

/// `c += a^T . b` with `a` (m x p), `b` (m x q), `c` (p x q).
fn dgemm_at(m: usize, p: usize, q: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * p..(i + 1) * p];
        let brow = &b[i * q..(i + 1) * q];
        for (l, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[l * q..(l + 1) * q];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Adam optimizer state over a network's parameter list.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(network: &Network, learning_rate: f64) -> Self {
        let sizes: Vec<usize> = network.parameters().iter().map(|p| p.numel()).collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update from the accumulated gradients.
    pub fn step(&mut self, network: &mut Network) -> Result<(), NeuralError> {
        let names = network.parameter_names();
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - fmath::powf(self.beta1, t);
        let bc2 = 1.0 - fmath::powf(self.beta2, t);
        for (((param, m), v), name) in network
            .parameters_mut()
            .into_iter()
            .zip(&mut self.m)
            .zip(&mut self.v)
            .zip(names)
        {
            for i in 0..param.values.len() {
                let g = param.grad[i];
                if !g.is_finite() {
                    return Err(NeuralError::NonFiniteGradient { parameter: name });
                }
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                param.values[i] -= self.learning_rate * mhat / (fmath::sqrt(vhat) + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Standalone Adam update over raw parameter/gradient buffers.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: &mut u64,
    learning_rate: f64,
) -> Result<(), NeuralError> {
    if grads.len() != params.len() || m.len() != params.len() || v.len() != params.len() {
        return Err(NeuralError::ShapeMismatch {
            expected: params.len(),
            got: grads.len(),
        });
    }
    let (beta1, beta2, eps) = (0.9, 0.999, 1e-8);
    *step += 1;
    let t = *step as f64;
    let bc1 = 1.0 - fmath::powf(beta1, t);
    let bc2 = 1.0 - fmath::powf(beta2, t);
    for i in 0..params.len() {
        let g = grads[i];
        if !g.is_finite() {
            return Err(NeuralError::NonFiniteGradient {
                parameter: alloc::format!("index {i}"),
            });
        }
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        params[i] -= learning_rate * (m[i] / bc1) / (fmath::sqrt(v[i] / bc2) + eps);
    }
    Ok(())
}

// --- checkpoint format -----------------------------------------------------
//
// magic "WGNN" | u32 version | u32x3 input shape | u32 layer count
// | per layer: u8 tag + dims | per parameterized layer: weight then bias as
//   u64 length + f64 little-endian values

const CHECKPOINT_MAGIC: &[u8; 4] = b"WGNN";
const CHECKPOINT_VERSION: u32 = 1;

/// Serializes a network to the versioned binary layout.
pub fn encode_network(network: &Network) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for d in network.input_shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    let specs = network.specs();
    out.extend_from_slice(&(specs.len() as u32).to_le_bytes());
    for spec in &specs {
        match spec {
            LayerSpec::Conv3x3 { in_ch, out_ch } => {
                out.push(1);
                out.extend_from_slice(&(*in_ch as u32).to_le_bytes());
                out.extend_from_slice(&(*out_ch as u32).to_le_bytes());
            }
            LayerSpec::Subsample2x2 => out.push(2),
            LayerSpec::Upsample2x => out.push(3),
            LayerSpec::FullyConnected {
                in_dim,
                out_dim,
                reshape_to,
            } => {
                out.push(4);
                out.extend_from_slice(&(*in_dim as u32).to_le_bytes());
                out.extend_from_slice(&(*out_dim as u32).to_le_bytes());
                match reshape_to {
                    Some([c, h, w]) => {
                        out.push(1);
                        for d in [c, h, w] {
                            out.extend_from_slice(&(*d as u32).to_le_bytes());
                        }
                    }
                    None => out.push(0),
                }
            }
            LayerSpec::Elu => out.push(5),
        }
    }
    for p in network.parameters() {
        out.extend_from_slice(&(p.values.len() as u64).to_le_bytes());
        for v in &p.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NeuralError> {
        if self.pos + n > self.data.len() {
            return Err(NeuralError::Checkpoint(String::from("truncated data")));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, NeuralError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, NeuralError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64, NeuralError> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn f64(&mut self) -> Result<f64, NeuralError> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(f64::from_le_bytes(a))
    }
}

/// Restores a network from checkpoint bytes, validating layout and shapes.
pub fn decode_network(data: &[u8]) -> Result<Network, NeuralError> {
    let mut r = Reader { data, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(NeuralError::Checkpoint(String::from("bad magic bytes")));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(NeuralError::Checkpoint(alloc::format!(
            "unsupported version {version}"
        )));
    }
    let input_shape = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let layer_count = r.u32()? as usize;
    let mut specs = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let spec = match r.u8()? {
            1 => LayerSpec::Conv3x3 {
                in_ch: r.u32()? as usize,
                out_ch: r.u32()? as usize,
            },
            2 => LayerSpec::Subsample2x2,
            3 => LayerSpec::Upsample2x,
            4 => {
                let in_dim = r.u32()? as usize;
                let out_dim = r.u32()? as usize;
                let reshape_to = match r.u8()? {
                    0 => None,
                    1 => Some([r.u32()? as usize, r.u32()? as usize, r.u32()? as usize]),
                    t => {
                        return Err(NeuralError::Checkpoint(alloc::format!(
                            "bad reshape tag {t}"
                        )))
                    }
                };
                LayerSpec::FullyConnected {
                    in_dim,
                    out_dim,
                    reshape_to,
                }
            }
            5 => LayerSpec::Elu,
            t => return Err(NeuralError::Checkpoint(alloc::format!("bad layer tag {t}"))),
        };
        specs.push(spec);
    }
    // Build with a throwaway RNG, then overwrite parameters from the blob.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut network = Network::new(input_shape, &specs, &mut rng)?;
    for p in network.parameters_mut() {
        let len = r.u64()? as usize;
        if len != p.numel() {
            return Err(NeuralError::Checkpoint(alloc::format!(
                "parameter blob has {len} values, expected {}",
                p.numel()
            )));
        }
        for v in p.values.iter_mut() {
            *v = r.f64()?;
        }
        p.grad.fill(0.0);
    }
    if r.pos != data.len() {
        return Err(NeuralError::Checkpoint(String::from("trailing bytes")));
    }
    Ok(network)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn elu_fixed_points_and_negative_branch() {
        assert_eq!(elu_scalar(0.0), 0.0);
        assert_eq!(elu_scalar(1.0), 1.0);
        assert!((elu_scalar(-1.0) - ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
        assert!((elu_scalar(-1.0) + 0.6321205588285577).abs() < 1e-12);
        let t = Tensor::from_values(&[3, 1, 1], vec![-0.5, 0.0, 2.0]).unwrap();
        let out = elu(&t);
        assert_eq!(out.values[1], 0.0);
        assert_eq!(out.values[2], 2.0);
    }

    #[test]
    fn conv_identity_kernel_reproduces_input() {
        let mut weight = Tensor::zeros(&[1, 9]);
        weight.values[4] = 1.0; // center tap
        let bias = Tensor::zeros(&[1]);
        let input = Tensor::from_values(
            &[1, 3, 4],
            (0..12).map(|i| i as f64 * 0.25 - 1.0).collect(),
        )
        .unwrap();
        let out = conv3x3_forward(&input, &weight, &bias).unwrap();
        assert_eq!(out.values, input.values);
    }

    #[test]
    fn conv_all_ones_kernel_spreads_an_impulse() {
        let weight = Tensor::from_values(&[1, 9], vec![1.0; 9]).unwrap();
        let bias = Tensor::zeros(&[1]);
        let mut img = vec![0.0; 25];
        img[12] = 1.0; // center of 5x5
        let input = Tensor::from_values(&[1, 5, 5], img).unwrap();
        let out = conv3x3_forward(&input, &weight, &bias).unwrap();
        for r in 0..5 {
            for c in 0..5 {
                let expect = if (1..=3).contains(&r) && (1..=3).contains(&c) {
                    1.0
                } else {
                    0.0
                };
                assert_eq!(out.values[r * 5 + c], expect, "({r},{c})");
            }
        }
    }

    /// Naive six-loop convolution oracle.
    fn conv_oracle(
        input: &[f64],
        (c, h, w): (usize, usize, usize),
        weight: &[f64],
        bias: &[f64],
        out_ch: usize,
    ) -> Vec<f64> {
        let mut out = vec![0.0; out_ch * h * w];
        for oc in 0..out_ch {
            for r in 0..h as isize {
                for col in 0..w as isize {
                    let mut acc = bias[oc];
                    for ic in 0..c {
                        for kr in -1..=1isize {
                            for kc in -1..=1isize {
                                let (sr, sc) = (r + kr, col + kc);
                                if sr < 0 || sr >= h as isize || sc < 0 || sc >= w as isize {
                                    continue;
                                }
                                let wv = weight
                                    [oc * c * 9 + ic * 9 + ((kr + 1) * 3 + (kc + 1)) as usize];
                                acc += wv * input[ic * h * w + sr as usize * w + sc as usize];
                            }
                        }
                    }
                    out[oc * h * w + r as usize * w + col as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_six_loop_oracle() {
        let mut r = rng(11);
        let (c, h, w, oc) = (3, 5, 5, 4);
        let input: Vec<f64> = (0..c * h * w).map(|_| r.gen_range(-1.0..1.0)).collect();
        let weight: Vec<f64> = (0..oc * c * 9).map(|_| r.gen_range(-1.0..1.0)).collect();
        let bias: Vec<f64> = (0..oc).map(|_| r.gen_range(-0.5..0.5)).collect();
        let got = conv3x3_run(&input, [c, h, w], &weight, &bias, oc);
        let expect = conv_oracle(&input, (c, h, w), &weight, &bias, oc);
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sum_loss_through_shape_layers_gives_unit_input_grads() {
        // Subsample then upsample: both are linear with column sums one, so
        // the gradient of sum(output) with respect to every input is 1.
        let mut r = rng(3);
        let specs = [LayerSpec::Subsample2x2, LayerSpec::Upsample2x];
        let mut net = Network::new([1, 4, 4], &specs, &mut r).unwrap();
        let input: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let (out, trace) = net.forward(&input).unwrap();
        let ones = vec![1.0; out.len()];
        let dx = net.backward(&trace, &ones, 1.0, true).unwrap();
        for g in dx {
            assert!((g - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fc_gradients_match_closed_form() {
        let mut r = rng(5);
        let specs = [LayerSpec::FullyConnected {
            in_dim: 3,
            out_dim: 2,
            reshape_to: None,
        }];
        let mut net = Network::new([3, 1, 1], &specs, &mut r).unwrap();
        let x = vec![0.5, -1.0, 2.0];
        let (y, trace) = net.forward(&x).unwrap();
        // Quadratic loss L = 0.5 sum(y^2): dL/dy = y, dL/dW = y x^T, dL/db = y.
        let dy: Vec<f64> = y.clone();
        let dx = net.backward(&trace, &dy, 1.0, true).unwrap();
        let w = net.parameters()[0].values.clone();
        for i in 0..3 {
            let expect = y[0] * w[i] + y[1] * w[3 + i];
            assert!((dx[i] - expect).abs() < 1e-12);
        }
        let wg = &net.parameters()[0].grad;
        for o in 0..2 {
            for i in 0..3 {
                assert!((wg[o * 3 + i] - y[o] * x[i]).abs() < 1e-12);
            }
        }
        let bg = &net.parameters()[1].grad;
        assert!((bg[0] - y[0]).abs() < 1e-12 && (bg[1] - y[1]).abs() < 1e-12);
    }

    /// Finite-difference check of dL/dtheta for L = 0.5 ||f(x)||^2.
    fn check_network_gradients(specs: &[LayerSpec], input_shape: ActShape, seed: u64) -> f64 {
        let mut r = rng(seed);
        let mut net = Network::new(input_shape, specs, &mut r).unwrap();
        let n_in: usize = input_shape.iter().product();
        let input: Vec<f64> = (0..n_in).map(|_| r.gen_range(-1.0..1.0)).collect();

        let loss_of = |net: &Network| {
            let out = net.infer(&input).unwrap();
            0.5 * out.iter().map(|v| v * v).sum::<f64>()
        };

        net.zero_grads();
        let (out, trace) = net.forward(&input).unwrap();
        let dy = out.clone();
        net.backward(&trace, &dy, 1.0, true).unwrap();

        let grads: Vec<Vec<f64>> = net.parameters().iter().map(|p| p.grad.clone()).collect();
        let scale = grads
            .iter()
            .flat_map(|g| g.iter())
            .fold(0.0f64, |m, g| m.max(g.abs()));
        let h = 1e-5;
        let mut worst = 0.0f64;
        let param_count = grads.len();
        for pi in 0..param_count {
            let len = grads[pi].len();
            let stride = (len / 7).max(1);
            for i in (0..len).step_by(stride) {
                let orig = net.parameters()[pi].values[i];
                net.parameters_mut()[pi].values[i] = orig + h;
                let lp = loss_of(&net);
                net.parameters_mut()[pi].values[i] = orig - h;
                let lm = loss_of(&net);
                net.parameters_mut()[pi].values[i] = orig;
                let fd = (lp - lm) / (2.0 * h);
                worst = worst.max((fd - grads[pi][i]).abs() / scale.max(1e-12));
            }
        }
        worst
    }

    #[test]
    fn every_layer_type_passes_finite_difference_checks() {
        let cases: Vec<(Vec<LayerSpec>, ActShape)> = vec![
            (vec![LayerSpec::Conv3x3 { in_ch: 2, out_ch: 3 }], [2, 4, 4]),
            (vec![LayerSpec::Subsample2x2], [2, 4, 4]),
            (vec![LayerSpec::Upsample2x], [2, 3, 3]),
            (
                vec![LayerSpec::FullyConnected {
                    in_dim: 12,
                    out_dim: 5,
                    reshape_to: None,
                }],
                [3, 2, 2],
            ),
            (vec![LayerSpec::Elu], [2, 3, 3]),
        ];
        for (i, (specs, shape)) in cases.iter().enumerate() {
            let worst = check_network_gradients(specs, *shape, 100 + i as u64);
            assert!(worst < 1e-4, "layer case {i}: max relative error {worst}");
        }
    }

    #[test]
    fn composite_network_passes_finite_difference_checks() {
        let specs = vec![
            LayerSpec::Conv3x3 { in_ch: 1, out_ch: 4 },
            LayerSpec::Elu,
            LayerSpec::Subsample2x2,
            LayerSpec::Conv3x3 { in_ch: 4, out_ch: 4 },
            LayerSpec::Elu,
            LayerSpec::FullyConnected {
                in_dim: 4 * 4 * 4,
                out_dim: 6,
                reshape_to: None,
            },
            LayerSpec::Elu,
            LayerSpec::FullyConnected {
                in_dim: 6,
                out_dim: 16,
                reshape_to: Some([1, 4, 4]),
            },
            LayerSpec::Upsample2x,
            LayerSpec::Conv3x3 { in_ch: 1, out_ch: 1 },
        ];
        let worst = check_network_gradients(&specs, [1, 8, 8], 42);
        assert!(worst < 1e-4, "composite net: max relative error {worst}");
    }

    #[test]
    fn backward_with_params_disabled_leaves_grads_untouched() {
        let mut r = rng(9);
        let specs = [LayerSpec::Conv3x3 { in_ch: 1, out_ch: 2 }, LayerSpec::Elu];
        let mut net = Network::new([1, 4, 4], &specs, &mut r).unwrap();
        let input: Vec<f64> = (0..16).map(|_| r.gen_range(-1.0..1.0)).collect();
        net.zero_grads();
        let (out, trace) = net.forward(&input).unwrap();
        let dy = vec![1.0; out.len()];
        net.backward(&trace, &dy, 1.0, false).unwrap();
        for p in net.parameters() {
            assert!(p.grad.iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn shape_algebra_halving_is_exact_and_enforced() {
        let mut r = rng(1);
        // 16 -> 8 -> 4 through two subsampling stages.
        let specs = [LayerSpec::Subsample2x2, LayerSpec::Subsample2x2];
        let net = Network::new([1, 16, 16], &specs, &mut r).unwrap();
        assert_eq!(net.output_shape(), [1, 4, 4]);
        // Odd side is rejected.
        let bad = Network::new(
            [1, 6, 6],
            &[LayerSpec::Subsample2x2, LayerSpec::Subsample2x2],
            &mut r,
        );
        assert!(matches!(bad, Err(NeuralError::NotDivisible { .. })));
    }

    #[test]
    fn seeded_initialization_is_deterministic() {
        let specs = [
            LayerSpec::Conv3x3 { in_ch: 1, out_ch: 3 },
            LayerSpec::Elu,
            LayerSpec::FullyConnected {
                in_dim: 3 * 4 * 4,
                out_dim: 2,
                reshape_to: None,
            },
        ];
        let a = Network::new([1, 4, 4], &specs, &mut rng(7)).unwrap();
        let b = Network::new([1, 4, 4], &specs, &mut rng(7)).unwrap();
        for (pa, pb) in a.parameters().iter().zip(b.parameters()) {
            assert_eq!(pa.values, pb.values);
        }
    }

    #[test]
    fn adam_leaves_params_alone_on_zero_gradient() {
        let params_before = vec![0.3, -0.7, 1.1];
        let mut params = params_before.clone();
        let grads = vec![0.0; 3];
        let mut m = vec![0.0; 3];
        let mut v = vec![0.0; 3];
        let mut step = 0;
        adam_step(&mut params, &grads, &mut m, &mut v, &mut step, 1e-3).unwrap();
        assert_eq!(params, params_before);
        assert_eq!(step, 1);
    }

    #[test]
    fn adam_first_step_matches_hand_computation() {
        // g = 1, lr = 1e-3: m_hat = 1, v_hat = 1, delta = lr / (1 + eps).
        let mut params = vec![0.0];
        let grads = vec![1.0];
        let (mut m, mut v, mut step) = (vec![0.0], vec![0.0], 0);
        adam_step(&mut params, &grads, &mut m, &mut v, &mut step, 1e-3).unwrap();
        let expect = -1e-3 / (1.0 + 1e-8);
        assert!((params[0] - expect).abs() < 1e-18);
    }

    #[test]
    fn adam_constant_gradient_approaches_sign_step() {
        let mut params = vec![0.0];
        let g = 0.37;
        let (mut m, mut v, mut step) = (vec![0.0], vec![0.0], 0);
        let lr = 1e-3;
        let mut prev = params[0];
        let mut last_delta = 0.0;
        for _ in 0..2000 {
            adam_step(&mut params, &[g], &mut m, &mut v, &mut step, lr).unwrap();
            last_delta = params[0] - prev;
            prev = params[0];
        }
        // Steady state steps toward -sign(g) * lr regardless of magnitude.
        assert!((last_delta + lr).abs() < 1e-6, "delta {last_delta}");
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut params = vec![0.0];
        let (mut m, mut v, mut step) = (vec![0.0], vec![0.0], 0);
        let err = adam_step(&mut params, &[f64::NAN], &mut m, &mut v, &mut step, 1e-3).unwrap_err();
        assert!(matches!(err, NeuralError::NonFiniteGradient { .. }));
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let specs = [
            LayerSpec::Conv3x3 { in_ch: 1, out_ch: 2 },
            LayerSpec::Elu,
            LayerSpec::Subsample2x2,
            LayerSpec::FullyConnected {
                in_dim: 2 * 2 * 2,
                out_dim: 4,
                reshape_to: Some([1, 2, 2]),
            },
            LayerSpec::Upsample2x,
        ];
        let net = Network::new([1, 4, 4], &specs, &mut rng(77)).unwrap();
        let bytes = encode_network(&net);
        let back = decode_network(&bytes).unwrap();
        assert_eq!(back.specs(), net.specs());
        assert_eq!(back.input_shape(), net.input_shape());
        for (a, b) in net.parameters().iter().zip(back.parameters()) {
            assert_eq!(a.values, b.values);
        }
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let specs = [LayerSpec::Elu];
        let net = Network::new([1, 2, 2], &specs, &mut rng(0)).unwrap();
        let bytes = encode_network(&net);
        assert!(decode_network(&bytes[..bytes.len() - 1]).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(decode_network(&bad_magic).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_network(&extra).is_err());
    }

    #[test]
    fn backward_rejects_mismatched_traces() {
        let mut r = rng(2);
        let mut net = Network::new([1, 2, 2], &[LayerSpec::Elu], &mut r).unwrap();
        let other = Network::new([1, 2, 2], &[LayerSpec::Elu, LayerSpec::Elu], &mut r).unwrap();
        let (_, trace) = other.forward(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        let err = net.backward(&trace, &[1.0; 4], 1.0, true).unwrap_err();
        assert!(matches!(err, NeuralError::TraceMismatch));
    }
}
