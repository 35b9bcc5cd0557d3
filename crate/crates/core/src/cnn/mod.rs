//! A small convolutional classifier written from first principles.
//!
//! The network is generic over the scalar type so the same forward and
//! backward code runs in `f32` for training and in `f64` for gradient
//! checking. Activations are stored row-major as `[row][col][channel]`.

mod adam;
mod gradcheck;
mod io;

use std::fmt;

use num_traits::Float;
use thiserror::Error;

use crate::rng::SplitMix64;
use crate::spectrogram::SpectrogramImage;

pub use adam::{AdamHyper, AdamState};
pub use gradcheck::{grad_check, grad_check_case};
pub use io::{decode_model, encode_model, load_model, save_model, MODEL_MAGIC, MODEL_VERSION};

pub const N_CLASSES: usize = 3;

#[derive(Debug, Error)]
pub enum CnnError {
    #[error("channel count must be 1 or 3, got {0}")]
    BadChannelCount(usize),
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported model version {0}")]
    VersionMismatch(u32),
    #[error("model file truncated")]
    Truncated,
    #[error("malformed model file: {0}")]
    Malformed(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Scalar types the network can run in.
pub trait Real:
    Float + std::ops::AddAssign + std::ops::SubAssign + fmt::Debug + Default + Send + Sync + 'static
{
}

impl<T> Real for T where
    T: Float + std::ops::AddAssign + std::ops::SubAssign + fmt::Debug + Default + Send + Sync + 'static
{
}

#[inline]
fn cast<T: Real>(x: f64) -> T {
    T::from(x).expect("f64 converts to any Real")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    /// 3×3 convolution, stride 1, zero "same" padding.
    Conv3x3 { filters: usize },
    Relu,
    /// 2×2 max pooling, stride 2.
    MaxPool2,
    Flatten,
    Dense { units: usize },
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv3x3 { .. } | LayerSpec::Dense { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// Three conv/ReLU/pool blocks (8, 16, 32 filters), then 2048 → 64 → 3.
    pub fn canonical(channels: usize) -> Result<Self, CnnError> {
        if channels != 1 && channels != 3 {
            return Err(CnnError::BadChannelCount(channels));
        }
        use LayerSpec::*;
        Ok(Self {
            input: Shape::new(64, 64, channels),
            layers: vec![
                Conv3x3 { filters: 8 },
                Relu,
                MaxPool2,
                Conv3x3 { filters: 16 },
                Relu,
                MaxPool2,
                Conv3x3 { filters: 32 },
                Relu,
                MaxPool2,
                Flatten,
                Dense { units: 64 },
                Relu,
                Dense { units: N_CLASSES },
            ],
        })
    }

    /// The reduced network used by the finite-difference gradient check.
    pub fn grad_check() -> Self {
        use LayerSpec::*;
        Self {
            input: Shape::new(8, 8, 1),
            layers: vec![Conv3x3 { filters: 2 }, Relu, MaxPool2, Flatten, Dense { units: N_CLASSES }],
        }
    }

    /// Output shape of every layer, validating the stack.
    pub fn shapes(&self) -> Result<Vec<Shape>, CnnError> {
        let mut cur = self.input;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match *layer {
                LayerSpec::Conv3x3 { filters } => Shape::new(cur.height, cur.width, filters),
                LayerSpec::Relu => cur,
                LayerSpec::MaxPool2 => {
                    if !cur.height.is_multiple_of(2) || !cur.width.is_multiple_of(2) {
                        return Err(CnnError::ShapeMismatch {
                            expected: format!("even spatial dims at layer {i}"),
                            actual: cur.to_string(),
                        });
                    }
                    Shape::new(cur.height / 2, cur.width / 2, cur.channels)
                }
                LayerSpec::Flatten => Shape::new(1, 1, cur.len()),
                LayerSpec::Dense { units } => {
                    if cur.height != 1 || cur.width != 1 {
                        return Err(CnnError::ShapeMismatch {
                            expected: format!("flat input to dense layer {i}"),
                            actual: cur.to_string(),
                        });
                    }
                    Shape::new(1, 1, units)
                }
            };
            out.push(cur);
        }
        Ok(out)
    }

    pub fn param_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| l.has_params()).count()
    }
}

/// Dense n-d array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub dims: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Self { dims, data: vec![T::zero(); n] }
    }
}

/// Weight and bias of one conv or dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub name: String,
    /// Conv: `[3, 3, in, out]`. Dense: `[in, out]`.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    arch: Architecture,
    shapes: Vec<Shape>,
    params: Vec<LayerParams<T>>,
    /// Index into `params` for each layer that has parameters.
    param_index: Vec<Option<usize>>,
    seed: Option<u64>,
}

/// The 32-bit canonical classifier.
pub type Model = Network<f32>;
/// Per-parameter gradients, shaped like the parameters.
pub type Gradients<T> = Vec<LayerParams<T>>;

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    /// `inputs[i]` is the input of layer `i`.
    inputs: Vec<Vec<T>>,
    /// Flat input index selected by each pooling output.
    argmax: Vec<Vec<u32>>,
}

/// Softmax probabilities over the three classes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassProbabilities(pub [f64; N_CLASSES]);

impl ClassProbabilities {
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn fault(&self) -> f64 {
        self.0[crate::ClassLabel::ExtruderFault.index()]
    }
}

pub fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Stable softmax (max subtracted first).
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - m).exp()).collect();
    let sum = exps.iter().copied().fold(T::zero(), |a, b| a + b);
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softmax cross-entropy and its gradient with respect to the logits.
pub fn loss_and_grad<T: Real>(logits: &[T], label: usize) -> (T, Vec<T>) {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let shifted: Vec<T> = logits.iter().map(|&z| z - m).collect();
    let lse = shifted.iter().map(|z| z.exp()).fold(T::zero(), |a, b| a + b).ln();
    let loss = lse - shifted[label];
    let mut d = softmax(logits);
    d[label] -= T::one();
    (loss, d)
}

impl<T: Real> Network<T> {
    /// All-zero parameters.
    pub fn zeros(arch: Architecture) -> Result<Self, CnnError> {
        let shapes = arch.shapes()?;
        let mut params = Vec::new();
        let mut param_index = Vec::with_capacity(arch.layers.len());
        let (mut n_conv, mut n_dense) = (0, 0);
        let mut cur = arch.input;
        for (layer, &out) in arch.layers.iter().zip(&shapes) {
            let p = match *layer {
                LayerSpec::Conv3x3 { filters } => {
                    n_conv += 1;
                    Some(LayerParams {
                        name: format!("conv{n_conv}"),
                        weight: Tensor::zeros(vec![3, 3, cur.channels, filters]),
                        bias: Tensor::zeros(vec![filters]),
                    })
                }
                LayerSpec::Dense { units } => {
                    n_dense += 1;
                    Some(LayerParams {
                        name: format!("dense{n_dense}"),
                        weight: Tensor::zeros(vec![cur.len(), units]),
                        bias: Tensor::zeros(vec![units]),
                    })
                }
                _ => None,
            };
            param_index.push(p.map(|p| {
                params.push(p);
                params.len() - 1
            }));
            cur = out;
        }
        Ok(Self { arch, shapes, params, param_index, seed: None })
    }

    /// He-normal weights (std = sqrt(2 / fan_in)), zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self, CnnError> {
        let mut net = Self::zeros(arch)?;
        let mut rng = SplitMix64::new(seed);
        for p in &mut net.params {
            let fan_in: usize = p.weight.dims[..p.weight.dims.len() - 1].iter().product();
            let std = (2.0 / fan_in as f64).sqrt();
            for w in &mut p.weight.data {
                *w = cast(std * rng.gaussian());
            }
        }
        net.seed = Some(seed);
        Ok(net)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn input_shape(&self) -> Shape {
        self.arch.input
    }

    pub fn params(&self) -> &[LayerParams<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [LayerParams<T>] {
        &mut self.params
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn zero_grads(&self) -> Gradients<T> {
        self.params
            .iter()
            .map(|p| LayerParams {
                name: p.name.clone(),
                weight: Tensor::zeros(p.weight.dims.clone()),
                bias: Tensor::zeros(p.bias.dims.clone()),
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.weight.data.iter().chain(&p.bias.data).all(|v| v.is_finite()))
    }

    /// Forward pass over a flat `[row][col][channel]` input.
    pub fn forward(&self, input: &[T]) -> Result<(Vec<T>, ForwardCache<T>), CnnError> {
        if input.len() != self.arch.input.len() {
            return Err(CnnError::ShapeMismatch {
                expected: format!("{} values ({})", self.arch.input.len(), self.arch.input),
                actual: format!("{} values", input.len()),
            });
        }
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(self.arch.layers.len()),
            argmax: vec![Vec::new(); self.arch.layers.len()],
        };
        let mut cur = input.to_vec();
        let mut in_shape = self.arch.input;
        for (i, layer) in self.arch.layers.iter().enumerate() {
            let out_shape = self.shapes[i];
            let out = match *layer {
                LayerSpec::Conv3x3 { .. } => {
                    let p = &self.params[self.param_index[i].expect("conv has params")];
                    conv3x3_forward(&cur, in_shape, p, out_shape.channels)
                }
                LayerSpec::Relu => cur.iter().map(|&v| v.max(T::zero())).collect(),
                LayerSpec::MaxPool2 => {
                    let (out, idx) = maxpool_forward(&cur, in_shape);
                    cache.argmax[i] = idx;
                    out
                }
                LayerSpec::Flatten => cur.clone(),
                LayerSpec::Dense { units } => {
                    let p = &self.params[self.param_index[i].expect("dense has params")];
                    dense_forward(&cur, p, units)
                }
            };
            cache.inputs.push(std::mem::replace(&mut cur, out));
            in_shape = out_shape;
        }
        Ok((cur, cache))
    }

    pub fn logits(&self, input: &[T]) -> Result<Vec<T>, CnnError> {
        self.forward(input).map(|(l, _)| l)
    }

    /// Accumulates (adds) parameter gradients of one example into `grads`.
    pub fn backward_into(&self, cache: &ForwardCache<T>, dlogits: &[T], grads: &mut Gradients<T>) {
        let mut dout = dlogits.to_vec();
        for i in (0..self.arch.layers.len()).rev() {
            let input = &cache.inputs[i];
            let in_shape = if i == 0 { self.arch.input } else { self.shapes[i - 1] };
            let need_input_grad = i > 0;
            dout = match self.arch.layers[i] {
                LayerSpec::Conv3x3 { .. } => {
                    let k = self.param_index[i].expect("conv has params");
                    conv3x3_backward(input, in_shape, &self.params[k], &dout, &mut grads[k], need_input_grad)
                }
                LayerSpec::Relu => input
                    .iter()
                    .zip(&dout)
                    .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                    .collect(),
                LayerSpec::MaxPool2 => {
                    let mut din = vec![T::zero(); input.len()];
                    for (&j, &g) in cache.argmax[i].iter().zip(&dout) {
                        din[j as usize] += g;
                    }
                    din
                }
                LayerSpec::Flatten => dout,
                LayerSpec::Dense { .. } => {
                    let k = self.param_index[i].expect("dense has params");
                    dense_backward(input, &self.params[k], &dout, &mut grads[k], need_input_grad)
                }
            };
        }
    }

    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: &[T]) -> Gradients<T> {
        let mut g = self.zero_grads();
        self.backward_into(cache, dlogits, &mut g);
        g
    }

    /// Loss of one example; convenience for finite differences.
    pub fn loss(&self, input: &[T], label: usize) -> Result<T, CnnError> {
        let logits = self.logits(input)?;
        Ok(loss_and_grad(&logits, label).0)
    }
}

impl Model {
    /// He-normal initialization of the canonical architecture.
    pub fn init_canonical(channels: usize, seed: u64) -> Result<Self, CnnError> {
        Self::init(Architecture::canonical(channels)?, seed)
    }

    /// Flattens a rendered image into the network's input layout.
    pub fn image_input(&self, image: &SpectrogramImage) -> Result<Vec<f32>, CnnError> {
        let shape = self.arch.input;
        let pixels = image.pixels().ok_or_else(|| CnnError::ShapeMismatch {
            expected: shape.to_string(),
            actual: "unrendered image".into(),
        })?;
        let actual = Shape::new(SpectrogramImage::HEIGHT, SpectrogramImage::WIDTH, image.channels());
        if actual != shape {
            return Err(CnnError::ShapeMismatch { expected: shape.to_string(), actual: actual.to_string() });
        }
        Ok(pixels.iter().map(|&v| v as f32).collect())
    }

    pub fn forward_image(&self, image: &SpectrogramImage) -> Result<(Vec<f32>, ForwardCache<f32>), CnnError> {
        self.forward(&self.image_input(image)?)
    }

    pub fn predict(&self, image: &SpectrogramImage) -> Result<ClassProbabilities, CnnError> {
        self.predict_input(&self.image_input(image)?)
    }

    pub fn predict_input(&self, input: &[f32]) -> Result<ClassProbabilities, CnnError> {
        let logits = self.logits(input)?;
        let p = softmax(&logits);
        Ok(ClassProbabilities([p[0] as f64, p[1] as f64, p[2] as f64]))
    }
}

fn conv3x3_forward<T: Real>(input: &[T], s: Shape, p: &LayerParams<T>, cout: usize) -> Vec<T> {
    let (h, w, cin) = (s.height, s.width, s.channels);
    let wt = &p.weight.data;
    let mut out = vec![T::zero(); h * w * cout];
    for y in 0..h {
        for x in 0..w {
            let o = &mut out[(y * w + x) * cout..(y * w + x + 1) * cout];
            o.copy_from_slice(&p.bias.data);
            for ky in 0..3 {
                let iy = y + ky;
                if iy < 1 || iy > h {
                    continue;
                }
                for kx in 0..3 {
                    let ix = x + kx;
                    if ix < 1 || ix > w {
                        continue;
                    }
                    let base = ((iy - 1) * w + (ix - 1)) * cin;
                    let px = &input[base..base + cin];
                    let kbase = (ky * 3 + kx) * cin * cout;
                    for (ci, &a) in px.iter().enumerate() {
                        if a == T::zero() {
                            continue;
                        }
                        let wrow = &wt[kbase + ci * cout..kbase + (ci + 1) * cout];
                        for (ov, &wv) in o.iter_mut().zip(wrow) {
                            *ov += a * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv3x3_backward<T: Real>(
    input: &[T],
    s: Shape,
    p: &LayerParams<T>,
    dout: &[T],
    g: &mut LayerParams<T>,
    need_input_grad: bool,
) -> Vec<T> {
    let (h, w, cin) = (s.height, s.width, s.channels);
    let cout = p.bias.data.len();
    let wt = &p.weight.data;
    let mut din = if need_input_grad { vec![T::zero(); input.len()] } else { Vec::new() };
    for y in 0..h {
        for x in 0..w {
            let d = &dout[(y * w + x) * cout..(y * w + x + 1) * cout];
            for (gb, &dv) in g.bias.data.iter_mut().zip(d) {
                *gb += dv;
            }
            for ky in 0..3 {
                let iy = y + ky;
                if iy < 1 || iy > h {
                    continue;
                }
                for kx in 0..3 {
                    let ix = x + kx;
                    if ix < 1 || ix > w {
                        continue;
                    }
                    let base = ((iy - 1) * w + (ix - 1)) * cin;
                    let kbase = (ky * 3 + kx) * cin * cout;
                    for ci in 0..cin {
                        let a = input[base + ci];
                        let range = kbase + ci * cout..kbase + (ci + 1) * cout;
                        if a != T::zero() {
                            for (gw, &dv) in g.weight.data[range.clone()].iter_mut().zip(d) {
                                *gw += a * dv;
                            }
                        }
                        if need_input_grad {
                            let mut acc = T::zero();
                            for (&wv, &dv) in wt[range].iter().zip(d) {
                                acc += wv * dv;
                            }
                            din[base + ci] += acc;
                        }
                    }
                }
            }
        }
    }
    din
}

/// Ties go to the first element in row-major window order.
fn maxpool_forward<T: Real>(input: &[T], s: Shape) -> (Vec<T>, Vec<u32>) {
    let (h, w, c) = (s.height, s.width, s.channels);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(oh * ow * c);
    let mut idx = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        for x in 0..ow {
            for ch in 0..c {
                let mut best = ((2 * y) * w + 2 * x) * c + ch;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = ((2 * y + dy) * w + 2 * x + dx) * c + ch;
                    if input[j] > input[best] {
                        best = j;
                    }
                }
                out.push(input[best]);
                idx.push(best as u32);
            }
        }
    }
    (out, idx)
}

fn dense_forward<T: Real>(input: &[T], p: &LayerParams<T>, units: usize) -> Vec<T> {
    let mut out = p.bias.data.clone();
    for (i, &a) in input.iter().enumerate() {
        if a == T::zero() {
            continue;
        }
        let row = &p.weight.data[i * units..(i + 1) * units];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += a * wv;
        }
    }
    out
}

fn dense_backward<T: Real>(
    input: &[T],
    p: &LayerParams<T>,
    dout: &[T],
    g: &mut LayerParams<T>,
    need_input_grad: bool,
) -> Vec<T> {
    let units = dout.len();
    for (gb, &d) in g.bias.data.iter_mut().zip(dout) {
        *gb += d;
    }
    let mut din = if need_input_grad { vec![T::zero(); input.len()] } else { Vec::new() };
    for (i, &a) in input.iter().enumerate() {
        let range = i * units..(i + 1) * units;
        if a != T::zero() {
            for (gw, &d) in g.weight.data[range.clone()].iter_mut().zip(dout) {
                *gw += a * d;
            }
        }
        if need_input_grad {
            let mut acc = T::zero();
            for (&wv, &d) in p.weight.data[range].iter().zip(dout) {
                acc += wv * d;
            }
            din[i] = acc;
        }
    }
    din
}

/// Adds `src` into `dst` elementwise.
pub fn accumulate<T: Real>(dst: &mut Gradients<T>, src: &Gradients<T>) {
    for (d, s) in dst.iter_mut().zip(src) {
        for (a, &b) in d.weight.data.iter_mut().zip(&s.weight.data) {
            *a += b;
        }
        for (a, &b) in d.bias.data.iter_mut().zip(&s.bias.data) {
            *a += b;
        }
    }
}

/// Multiplies every gradient entry by `k`.
pub fn scale<T: Real>(grads: &mut Gradients<T>, k: T) {
    for g in grads {
        for v in g.weight.data.iter_mut().chain(g.bias.data.iter_mut()) {
            *v = *v * k;
        }
    }
}
