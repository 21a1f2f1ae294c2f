use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{matmul, Mat, Real, Tensor};
use crate::error::{QpiError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    Conv,
    MaxPool,
    Dense,
    ReLU,
    Tanh,
    Sigmoid,
    Dropout,
    Flatten,
}

impl LayerKind {
    pub fn code(self) -> u8 {
        match self {
            LayerKind::Conv => 0,
            LayerKind::MaxPool => 1,
            LayerKind::Dense => 2,
            LayerKind::ReLU => 3,
            LayerKind::Tanh => 4,
            LayerKind::Sigmoid => 5,
            LayerKind::Dropout => 6,
            LayerKind::Flatten => 7,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => LayerKind::Conv,
            1 => LayerKind::MaxPool,
            2 => LayerKind::Dense,
            3 => LayerKind::ReLU,
            4 => LayerKind::Tanh,
            5 => LayerKind::Sigmoid,
            6 => LayerKind::Dropout,
            7 => LayerKind::Flatten,
            _ => return None,
        })
    }

    pub fn short_name(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::MaxPool => "pool",
            LayerKind::Dense => "fc",
            LayerKind::ReLU => "relu",
            LayerKind::Tanh => "tanh",
            LayerKind::Sigmoid => "sigmoid",
            LayerKind::Dropout => "drop",
            LayerKind::Flatten => "flatten",
        }
    }
}

/// How a strided window count is rounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Rounding {
    Floor,
    /// Extra zero padding on the bottom/right edge admits one more window.
    Ceil,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: (usize, usize),
    /// Output channels for convolutions, output features for dense layers.
    pub filters: usize,
    pub stride: usize,
    pub pad: usize,
    pub dropout_rate: f64,
    pub rounding: Rounding,
}

impl LayerSpec {
    fn plain(kind: LayerKind) -> Self {
        Self {
            kind,
            kernel: (0, 0),
            filters: 0,
            stride: 0,
            pad: 0,
            dropout_rate: 0.0,
            rounding: Rounding::Floor,
        }
    }

    pub fn conv(kernel: usize, filters: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel: (kernel, kernel),
            filters,
            stride,
            pad,
            ..Self::plain(LayerKind::Conv)
        }
    }

    pub fn with_rounding(mut self, rounding: Rounding) -> Self {
        self.rounding = rounding;
        self
    }

    pub fn max_pool(kernel: usize, stride: usize) -> Self {
        Self {
            kernel: (kernel, kernel),
            stride,
            ..Self::plain(LayerKind::MaxPool)
        }
    }

    pub fn dense(out_features: usize) -> Self {
        Self {
            filters: out_features,
            ..Self::plain(LayerKind::Dense)
        }
    }

    pub fn dropout(rate: f64) -> Self {
        Self {
            dropout_rate: rate,
            ..Self::plain(LayerKind::Dropout)
        }
    }

    pub fn relu() -> Self {
        Self::plain(LayerKind::ReLU)
    }

    pub fn tanh() -> Self {
        Self::plain(LayerKind::Tanh)
    }

    pub fn sigmoid() -> Self {
        Self::plain(LayerKind::Sigmoid)
    }

    pub fn flatten() -> Self {
        Self::plain(LayerKind::Flatten)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(QpiError::Config(msg));
        match self.kind {
            LayerKind::Conv | LayerKind::MaxPool => {
                if self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride == 0 {
                    return bad(format!("{:?} needs a kernel and stride of at least 1", self.kind));
                }
                if self.kind == LayerKind::Conv && self.filters == 0 {
                    return bad("convolution needs at least one filter".into());
                }
            }
            LayerKind::Dense if self.filters == 0 => return bad("dense layer needs at least one output".into()),
            LayerKind::Dropout if !(0.0..1.0).contains(&self.dropout_rate) => {
                return bad(format!("dropout rate {} outside [0, 1)", self.dropout_rate))
            }
            _ => {}
        }
        Ok(())
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        let spatial = |input: &[usize]| -> Result<(usize, usize, usize)> {
            match input {
                &[c, h, w] => Ok((c, h, w)),
                _ => Err(QpiError::Shape(format!(
                    "{:?} expects a (C, H, W) input, got {input:?}",
                    self.kind
                ))),
            }
        };
        match self.kind {
            LayerKind::Conv | LayerKind::MaxPool => {
                let (c, h, w) = spatial(input)?;
                let (kh, kw) = self.kernel;
                let pad = if self.kind == LayerKind::Conv { self.pad } else { 0 };
                let side = |n: usize, k: usize| -> Result<usize> {
                    let span = n + 2 * pad;
                    if span < k {
                        return Err(QpiError::Shape(format!(
                            "kernel {k} does not fit padded input {span} in {:?}",
                            self.kind
                        )));
                    }
                    let steps = span - k;
                    Ok(match self.rounding {
                        Rounding::Floor => steps / self.stride,
                        Rounding::Ceil => steps.div_ceil(self.stride),
                    } + 1)
                };
                let channels = if self.kind == LayerKind::Conv { self.filters } else { c };
                Ok(vec![channels, side(h, kh)?, side(w, kw)?])
            }
            LayerKind::Dense => {
                if input.len() != 1 {
                    return Err(QpiError::Shape(format!("dense layer expects a flat input, got {input:?}")));
                }
                Ok(vec![self.filters])
            }
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
            _ => Ok(input.to_vec()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable array with its gradient and momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub velocity: Vec<T>,
    /// Whether L2 regularisation applies (weights yes, biases no).
    pub decay: bool,
}

impl<T: Real> Param<T> {
    pub fn new(value: Vec<T>, decay: bool) -> Self {
        let n = value.len();
        Self {
            value,
            grad: vec![T::zero(); n],
            velocity: vec![T::zero(); n],
            decay,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ConvLayer<T> {
    pub spec: LayerSpec,
    pub in_shape: [usize; 3],
    pub out_hw: (usize, usize),
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub(crate) struct PoolLayer {
    pub spec: LayerSpec,
    pub in_shape: [usize; 3],
    pub out_hw: (usize, usize),
    argmax: Option<(usize, Vec<u32>)>,
}

#[derive(Debug, Clone)]
pub(crate) struct DenseLayer<T> {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub(crate) enum Layer<T> {
    Conv(ConvLayer<T>),
    Pool(PoolLayer),
    Dense(DenseLayer<T>),
    ReLU(Option<Vec<bool>>),
    Tanh(Option<Tensor<T>>),
    Sigmoid(Option<Tensor<T>>),
    Dropout { rate: f64, mask: Option<Vec<T>> },
    Flatten(Option<Vec<usize>>),
}

fn state_error<T>(what: &str) -> Result<T> {
    Err(QpiError::State(format!("{what} backward called without a cached forward pass")))
}

fn check_input<T: Real>(x: &Tensor<T>, per_sample: &[usize], layer: &str) -> Result<()> {
    if x.shape().len() != per_sample.len() + 1 || &x.shape()[1..] != per_sample {
        return Err(QpiError::Shape(format!(
            "{layer} expects (B, {per_sample:?}), got {:?}",
            x.shape()
        )));
    }
    Ok(())
}

impl<T: Real> ConvLayer<T> {
    pub fn new(spec: LayerSpec, in_shape: [usize; 3], weight: Vec<T>) -> Result<Self> {
        let out = spec.output_shape(&in_shape)?;
        let (kh, kw) = spec.kernel;
        if weight.len() != spec.filters * in_shape[0] * kh * kw {
            return Err(QpiError::Shape(format!(
                "convolution weights have {} values, expected {}",
                weight.len(),
                spec.filters * in_shape[0] * kh * kw
            )));
        }
        Ok(Self {
            spec,
            in_shape,
            out_hw: (out[1], out[2]),
            weight: Param::new(weight, true),
            bias: Param::new(vec![T::zero(); spec.filters], false),
            input: None,
        })
    }

    fn patch_rows(&self) -> usize {
        self.in_shape[0] * self.spec.kernel.0 * self.spec.kernel.1
    }

    /// Unfolds one sample into a `(C·kh·kw) × (OH·OW)` matrix.
    fn im2col(&self, x: &[T], cols: &mut [T]) {
        let [c_in, h, w] = self.in_shape;
        let (kh, kw) = self.spec.kernel;
        let (oh, ow) = self.out_hw;
        let (s, pad) = (self.spec.stride as isize, self.spec.pad as isize);
        let p = oh * ow;
        for c in 0..c_in {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = ((c * kh + ki) * kw + kj) * p;
                    for orow in 0..oh {
                        let ih = orow as isize * s + ki as isize - pad;
                        let dst = &mut cols[row + orow * ow..row + (orow + 1) * ow];
                        if ih < 0 || ih >= h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[ih as usize * w..(ih as usize + 1) * w];
                        for (ocol, d) in dst.iter_mut().enumerate() {
                            let iw = ocol as isize * s + kj as isize - pad;
                            *d = if iw < 0 || iw >= w as isize { T::zero() } else { src[iw as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[T], dx: &mut [T]) {
        let [c_in, h, w] = self.in_shape;
        let (kh, kw) = self.spec.kernel;
        let (oh, ow) = self.out_hw;
        let (s, pad) = (self.spec.stride as isize, self.spec.pad as isize);
        let p = oh * ow;
        for c in 0..c_in {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = ((c * kh + ki) * kw + kj) * p;
                    for orow in 0..oh {
                        let ih = orow as isize * s + ki as isize - pad;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let src = &cols[row + orow * ow..row + (orow + 1) * ow];
                        let dst = &mut plane[ih as usize * w..(ih as usize + 1) * w];
                        for (ocol, &v) in src.iter().enumerate() {
                            let iw = ocol as isize * s + kj as isize - pad;
                            if iw >= 0 && iw < w as isize {
                                dst[iw as usize] = dst[iw as usize] + v;
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward(&mut self, x: Tensor<T>) -> Result<Tensor<T>> {
        check_input(&x, &self.in_shape, "convolution")?;
        let b = x.batch();
        let f = self.spec.filters;
        let (oh, ow) = self.out_hw;
        let p = oh * ow;
        let rows = self.patch_rows();
        let in_len: usize = self.in_shape.iter().product();
        let mut out = Tensor::zeros(&[b, f, oh, ow]);
        let mut cols = vec![T::zero(); rows * p];
        for n in 0..b {
            self.im2col(&x.data()[n * in_len..(n + 1) * in_len], &mut cols);
            let y = &mut out.data_mut()[n * f * p..(n + 1) * f * p];
            matmul(T::one(), &self.weight.value, Mat::new(f, rows), &cols, Mat::new(rows, p), T::zero(), y);
            for (fi, chunk) in y.chunks_mut(p).enumerate() {
                let bias = self.bias.value[fi];
                chunk.iter_mut().for_each(|v| *v = *v + bias);
            }
        }
        self.input = Some(x);
        Ok(out)
    }

    /// Accumulates parameter gradients; the input gradient only when asked.
    fn backward(&mut self, grad: Tensor<T>, need_dx: bool) -> Result<Option<Tensor<T>>> {
        let Some(x) = self.input.take() else {
            return state_error("convolution");
        };
        let b = x.batch();
        let f = self.spec.filters;
        let p = self.out_hw.0 * self.out_hw.1;
        check_input(&grad, &[f, self.out_hw.0, self.out_hw.1], "convolution gradient")?;
        let rows = self.patch_rows();
        let in_len: usize = self.in_shape.iter().product();
        let mut dx = Tensor::zeros(if need_dx { x.shape() } else { &[0] });
        let mut cols = vec![T::zero(); rows * p];
        let mut dcols = vec![T::zero(); if need_dx { rows * p } else { 0 }];
        for n in 0..b {
            self.im2col(&x.data()[n * in_len..(n + 1) * in_len], &mut cols);
            let dy = &grad.data()[n * f * p..(n + 1) * f * p];
            matmul(T::one(), dy, Mat::new(f, p), &cols, Mat::t(rows, p), T::one(), &mut self.weight.grad);
            for (fi, chunk) in dy.chunks(p).enumerate() {
                let s: T = chunk.iter().copied().sum();
                self.bias.grad[fi] = self.bias.grad[fi] + s;
            }
            if need_dx {
                matmul(T::one(), &self.weight.value, Mat::t(f, rows), dy, Mat::new(f, p), T::zero(), &mut dcols);
                self.col2im(&dcols, &mut dx.data_mut()[n * in_len..(n + 1) * in_len]);
            }
        }
        Ok(need_dx.then_some(dx))
    }
}

impl PoolLayer {
    pub fn new(spec: LayerSpec, in_shape: [usize; 3]) -> Result<Self> {
        let out = spec.output_shape(&in_shape)?;
        Ok(Self {
            spec,
            in_shape,
            out_hw: (out[1], out[2]),
            argmax: None,
        })
    }

    fn forward<T: Real>(&mut self, x: Tensor<T>) -> Result<Tensor<T>> {
        check_input(&x, &self.in_shape, "max pooling")?;
        let [c, h, w] = self.in_shape;
        let (oh, ow) = self.out_hw;
        let (kh, kw) = self.spec.kernel;
        let s = self.spec.stride;
        let b = x.batch();
        let mut out = Tensor::zeros(&[b, c, oh, ow]);
        let mut argmax = vec![0u32; b * c * oh * ow];
        let src = x.data();
        let dst = out.data_mut();
        let mut o = 0;
        for plane in 0..b * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut at = 0usize;
                    for di in 0..kh {
                        let r = i * s + di;
                        if r >= h {
                            break;
                        }
                        for dj in 0..kw {
                            let cc = j * s + dj;
                            if cc >= w {
                                break;
                            }
                            let v = src[base + r * w + cc];
                            // NaN propagates so the numeric guard can see it.
                            if v > best || v.is_nan() {
                                best = v;
                                at = r * w + cc;
                            }
                        }
                    }
                    dst[o] = best;
                    argmax[o] = at as u32;
                    o += 1;
                }
            }
        }
        self.argmax = Some((b, argmax));
        Ok(out)
    }

    fn backward<T: Real>(&mut self, grad: Tensor<T>) -> Result<Tensor<T>> {
        let Some((b, argmax)) = self.argmax.take() else {
            return state_error("max pooling");
        };
        let [c, h, w] = self.in_shape;
        let (oh, ow) = self.out_hw;
        check_input(&grad, &[c, oh, ow], "max pooling gradient")?;
        let mut dx = Tensor::zeros(&[b, c, h, w]);
        let g = grad.data();
        let d = dx.data_mut();
        for plane in 0..b * c {
            for k in 0..oh * ow {
                let o = plane * oh * ow + k;
                let at = plane * h * w + argmax[o] as usize;
                d[at] = d[at] + g[o];
            }
        }
        Ok(dx)
    }
}

impl<T: Real> DenseLayer<T> {
    pub fn new(in_features: usize, out_features: usize, weight: Vec<T>) -> Result<Self> {
        if weight.len() != in_features * out_features {
            return Err(QpiError::Shape(format!(
                "dense weights have {} values, expected {out_features}x{in_features}",
                weight.len()
            )));
        }
        Ok(Self {
            in_features,
            out_features,
            weight: Param::new(weight, true),
            bias: Param::new(vec![T::zero(); out_features], false),
            input: None,
        })
    }

    fn forward(&mut self, x: Tensor<T>) -> Result<Tensor<T>> {
        check_input(&x, &[self.in_features], "dense layer")?;
        let b = x.batch();
        let (i, o) = (self.in_features, self.out_features);
        let mut y = Tensor::zeros(&[b, o]);
        matmul(T::one(), x.data(), Mat::new(b, i), &self.weight.value, Mat::t(o, i), T::zero(), y.data_mut());
        for row in y.data_mut().chunks_mut(o) {
            row.iter_mut().zip(&self.bias.value).for_each(|(v, &bias)| *v = *v + bias);
        }
        self.input = Some(x);
        Ok(y)
    }

    fn backward(&mut self, grad: Tensor<T>) -> Result<Tensor<T>> {
        let Some(x) = self.input.take() else {
            return state_error("dense layer");
        };
        let b = x.batch();
        let (i, o) = (self.in_features, self.out_features);
        check_input(&grad, &[o], "dense gradient")?;
        matmul(T::one(), grad.data(), Mat::t(b, o), x.data(), Mat::new(b, i), T::one(), &mut self.weight.grad);
        for row in grad.data().chunks(o) {
            self.bias.grad.iter_mut().zip(row).for_each(|(g, &v)| *g = *g + v);
        }
        let mut dx = Tensor::zeros(&[b, i]);
        matmul(T::one(), grad.data(), Mat::new(b, o), &self.weight.value, Mat::new(o, i), T::zero(), dx.data_mut());
        Ok(dx)
    }
}

impl<T: Real> Layer<T> {
    pub fn forward(&mut self, mut x: Tensor<T>, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(l) => l.forward(x),
            Layer::Pool(l) => l.forward(x),
            Layer::Dense(l) => l.forward(x),
            Layer::ReLU(cache) => {
                let mut mask = Vec::with_capacity(x.len());
                for v in x.data_mut() {
                    let on = *v > T::zero();
                    if !on && !v.is_nan() {
                        *v = T::zero();
                    }
                    mask.push(on);
                }
                *cache = Some(mask);
                Ok(x)
            }
            Layer::Tanh(cache) => {
                x.data_mut().iter_mut().for_each(|v| *v = v.tanh());
                *cache = Some(x.clone());
                Ok(x)
            }
            Layer::Sigmoid(cache) => {
                x.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
                *cache = Some(x.clone());
                Ok(x)
            }
            Layer::Dropout { rate, mask } => {
                if mode == Mode::Eval || *rate == 0.0 {
                    *mask = None;
                    return Ok(x);
                }
                let keep = 1.0 - *rate;
                let scale = T::from_f64_lossy(1.0 / keep);
                let m: Vec<T> = (0..x.len())
                    .map(|_| if rng.gen::<f64>() < keep { scale } else { T::zero() })
                    .collect();
                x.data_mut().iter_mut().zip(&m).for_each(|(v, &k)| *v = *v * k);
                *mask = Some(m);
                Ok(x)
            }
            Layer::Flatten(cache) => {
                let shape = x.shape().to_vec();
                let b = shape[0];
                let rest = x.len() / b;
                *cache = Some(shape);
                x.reshape(&[b, rest])
            }
        }
    }

    /// Parameter gradients only: skips the input gradient of a convolution.
    pub fn backward_params(&mut self, grad: Tensor<T>) -> Result<()> {
        match self {
            Layer::Conv(l) => l.backward(grad, false).map(|_| ()),
            _ => self.backward(grad).map(|_| ()),
        }
    }

    pub fn backward(&mut self, mut grad: Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(l) => l.backward(grad, true).map(|dx| dx.expect("input gradient requested")),
            Layer::Pool(l) => l.backward(grad),
            Layer::Dense(l) => l.backward(grad),
            Layer::ReLU(cache) => {
                let Some(mask) = cache.take() else {
                    return state_error("ReLU");
                };
                grad.data_mut()
                    .iter_mut()
                    .zip(&mask)
                    .for_each(|(g, &on)| if !on { *g = T::zero() });
                Ok(grad)
            }
            Layer::Tanh(cache) => {
                let Some(y) = cache.take() else {
                    return state_error("tanh");
                };
                grad.data_mut()
                    .iter_mut()
                    .zip(y.data())
                    .for_each(|(g, &y)| *g = *g * (T::one() - y * y));
                Ok(grad)
            }
            Layer::Sigmoid(cache) => {
                let Some(y) = cache.take() else {
                    return state_error("sigmoid");
                };
                grad.data_mut()
                    .iter_mut()
                    .zip(y.data())
                    .for_each(|(g, &y)| *g = *g * y * (T::one() - y));
                Ok(grad)
            }
            Layer::Dropout { mask, .. } => {
                if let Some(m) = mask.take() {
                    grad.data_mut().iter_mut().zip(&m).for_each(|(g, &k)| *g = *g * k);
                }
                Ok(grad)
            }
            Layer::Flatten(cache) => {
                let Some(shape) = cache.take() else {
                    return state_error("flatten");
                };
                grad.reshape(&shape)
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Layer::Conv(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Dense(l) => vec![&mut l.weight, &mut l.bias],
            _ => Vec::new(),
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        match self {
            Layer::Conv(l) => vec![&l.weight, &l.bias],
            Layer::Dense(l) => vec![&l.weight, &l.bias],
            _ => Vec::new(),
        }
    }
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
