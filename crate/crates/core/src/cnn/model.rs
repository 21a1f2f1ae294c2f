use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{ConvLayer, DenseLayer, Layer, LayerKind, LayerSpec, Mode, Param, PoolLayer, Rounding};
use super::tensor::{Real, Tensor};
use crate::error::{QpiError, Result};
use crate::seed;

/// Side of the square network input.
pub const INPUT_SIDE: usize = 120;

/// Weight initialisation. Biases always start at zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum Init {
    /// N(0, std²) for every weight.
    Gaussian { std: f64 },
    /// N(0, 2/fan_in).
    He,
}

/// The layer stack of the customized classifier, input 120×120×3.
pub fn classifier_specs() -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv(3, 64, 1, 1),
        LayerSpec::relu(),
        LayerSpec::conv(3, 96, 2, 2),
        LayerSpec::relu(),
        LayerSpec::max_pool(2, 2),
        LayerSpec::conv(2, 128, 2, 1),
        LayerSpec::relu(),
        LayerSpec::dropout(0.2),
        LayerSpec::conv(3, 256, 1, 1),
        LayerSpec::relu(),
        LayerSpec::max_pool(2, 2),
        LayerSpec::conv(3, 256, 2, 1).with_rounding(Rounding::Ceil),
        LayerSpec::relu(),
        LayerSpec::flatten(),
        LayerSpec::dense(1000),
        LayerSpec::tanh(),
        LayerSpec::dropout(0.5),
        LayerSpec::dense(1),
        LayerSpec::sigmoid(),
    ]
}

/// Names like `conv1`, `relu3`, `fc6`: convolutions, pools and dense layers
/// share one counter so names follow the usual row labels.
fn layer_names(specs: &[LayerSpec]) -> Vec<String> {
    let mut stage = 0;
    let mut names = Vec::with_capacity(specs.len());
    for spec in specs {
        match spec.kind {
            LayerKind::Conv | LayerKind::Dense => {
                stage += 1;
                names.push(format!("{}{stage}", spec.kind.short_name()));
            }
            _ => names.push(format!("{}{}", spec.kind.short_name(), stage.max(1))),
        }
    }
    names
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    input_shape: [usize; 3],
    specs: Vec<LayerSpec>,
    names: Vec<String>,
    layers: Vec<Layer<T>>,
    /// Layers run by the last forward pass, for backward.
    depth: Option<usize>,
}

impl<T: Real> Model<T> {
    pub fn new(input_shape: [usize; 3], specs: Vec<LayerSpec>, init: Init, seed_value: u64) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        let names = layer_names(&specs);
        for (spec, name) in specs.iter().zip(&names) {
            let out = spec.output_shape(&shape)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed_value, &format!("init:{name}")));
            let mut draw = |n: usize, fan_in: usize| -> Vec<T> {
                let std = match init {
                    Init::Gaussian { std } => std,
                    Init::He => (2.0 / fan_in as f64).sqrt(),
                };
                let normal = Normal::new(0.0, std).expect("standard deviation is finite");
                (0..n).map(|_| T::from_f64_lossy(normal.sample(&mut rng))).collect()
            };
            let layer = match spec.kind {
                LayerKind::Conv => {
                    let in3 = [shape[0], shape[1], shape[2]];
                    let fan_in = in3[0] * spec.kernel.0 * spec.kernel.1;
                    Layer::Conv(ConvLayer::new(*spec, in3, draw(spec.filters * fan_in, fan_in))?)
                }
                LayerKind::MaxPool => Layer::Pool(PoolLayer::new(*spec, [shape[0], shape[1], shape[2]])?),
                LayerKind::Dense => Layer::Dense(DenseLayer::new(shape[0], spec.filters, draw(shape[0] * spec.filters, shape[0]))?),
                LayerKind::ReLU => Layer::ReLU(None),
                LayerKind::Tanh => Layer::Tanh(None),
                LayerKind::Sigmoid => Layer::Sigmoid(None),
                LayerKind::Dropout => Layer::Dropout {
                    rate: spec.dropout_rate,
                    mask: None,
                },
                LayerKind::Flatten => Layer::Flatten(None),
            };
            layers.push(layer);
            shape = out;
        }
        Ok(Self {
            input_shape,
            specs,
            names,
            layers,
            depth: None,
        })
    }

    pub fn classifier(init: Init, seed_value: u64) -> Result<Self> {
        Self::new([3, INPUT_SIDE, INPUT_SIDE], classifier_specs(), init, seed_value)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Per-sample output shape after every layer.
    pub fn shape_trace(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let mut shape = self.input_shape.to_vec();
        let mut trace = Vec::with_capacity(self.specs.len());
        for (spec, name) in self.specs.iter().zip(&self.names) {
            shape = spec.output_shape(&shape)?;
            trace.push((name.clone(), shape.clone()));
        }
        Ok(trace)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.params())
            .map(|p| p.value.len())
            .sum()
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    fn ends_in_sigmoid(&self) -> bool {
        matches!(self.specs.last().map(|s| s.kind), Some(LayerKind::Sigmoid))
    }

    fn run(&mut self, x: Tensor<T>, mode: Mode, rng: &mut ChaCha8Rng, depth: usize) -> Result<Tensor<T>> {
        let expected = [x.batch(), self.input_shape[0], self.input_shape[1], self.input_shape[2]];
        if x.shape() != expected {
            return Err(QpiError::Shape(format!(
                "model expects (B, {}, {}, {}), got {:?}",
                self.input_shape[0],
                self.input_shape[1],
                self.input_shape[2],
                x.shape()
            )));
        }
        self.depth = None;
        let mut h = x;
        for (layer, name) in self.layers[..depth].iter_mut().zip(&self.names) {
            h = layer.forward(h, mode, rng)?;
            if !h.all_finite() {
                return Err(QpiError::NumericFault {
                    layer: name.clone(),
                    detail: "non-finite activation".into(),
                });
            }
        }
        self.depth = Some(depth);
        Ok(h)
    }

    /// Output of the full stack (probabilities for a sigmoid head).
    pub fn forward(&mut self, x: Tensor<T>, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
        let depth = self.layers.len();
        self.run(x, mode, rng, depth)
    }

    /// Output before a trailing sigmoid; the whole stack otherwise.
    pub fn logits(&mut self, x: Tensor<T>, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
        let depth = self.layers.len() - usize::from(self.ends_in_sigmoid());
        self.run(x, mode, rng, depth)
    }

    /// Backpropagates `grad` (with respect to the last forward output)
    /// through the layers that produced it, accumulating parameter gradients.
    pub fn backward(&mut self, grad: Tensor<T>) -> Result<Tensor<T>> {
        let Some(depth) = self.depth.take() else {
            return Err(QpiError::State("backward called without a cached forward pass".into()));
        };
        let mut g = grad;
        for layer in self.layers[..depth].iter_mut().rev() {
            g = layer.backward(g)?;
        }
        Ok(g)
    }

    /// Like [`Model::backward`] but skips the gradient with respect to the
    /// input, which training never uses.
    pub fn backward_params(&mut self, grad: Tensor<T>) -> Result<()> {
        let Some(depth) = self.depth.take() else {
            return Err(QpiError::State("backward called without a cached forward pass".into()));
        };
        if depth == 0 {
            return Ok(());
        }
        let mut g = grad;
        for layer in self.layers[1..depth].iter_mut().rev() {
            g = layer.backward(g)?;
        }
        self.layers[0].backward_params(g)
    }

    /// Adds `lambda·w` to the gradient of every decayed parameter.
    pub fn add_l2_gradient(&mut self, lambda: f64) {
        let l = T::from_f64_lossy(lambda);
        for p in self.params_mut() {
            if p.decay {
                p.grad.iter_mut().zip(&p.value).for_each(|(g, &w)| *g = *g + l * w);
            }
        }
    }

    /// `λ/2 · Σ w²` over decayed parameters.
    pub fn l2_penalty(&self, lambda: f64) -> f64 {
        let sum: f64 = self
            .params()
            .iter()
            .filter(|p| p.decay)
            .flat_map(|p| p.value.iter())
            .map(|w| w.as_f64().powi(2))
            .sum();
        0.5 * lambda * sum
    }

    /// Converts every parameter to another scalar type.
    pub fn cast<U: Real>(&self) -> Result<Model<U>> {
        let mut out = Model::<U>::new(self.input_shape, self.specs.clone(), Init::Gaussian { std: 0.0 }, 0)?;
        for (dst, src) in out.params_mut().into_iter().zip(self.params()) {
            dst.value = src.value.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect();
        }
        Ok(out)
    }

    /// Overwrites parameter values in declaration order.
    pub fn set_params(&mut self, values: Vec<Vec<T>>) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != values.len() {
            return Err(QpiError::Shape(format!(
                "model has {} parameter arrays, got {}",
                params.len(),
                values.len()
            )));
        }
        for (p, v) in params.iter_mut().zip(values) {
            if p.value.len() != v.len() {
                return Err(QpiError::Shape(format!(
                    "parameter array of {} values given {}",
                    p.value.len(),
                    v.len()
                )));
            }
            p.value = v;
        }
        Ok(())
    }
}
