use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Mode, Param};
use super::model::{Init, Model};
use super::tensor::{Real, Tensor};
use crate::error::{QpiError, Result};
use crate::seed;

/// Weight initialisation selected by name in configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitScheme {
    /// N(0, init_std²).
    #[default]
    Gaussian,
    /// N(0, 2/fan_in); `init_std` is ignored.
    He,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub l2_lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_decay_every: usize,
    pub lr_decay_gamma: f64,
    pub init: InitScheme,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            momentum: 0.9,
            l2_lambda: 1e-3,
            batch_size: 32,
            epochs: 15,
            lr_decay_every: 4,
            lr_decay_gamma: 1.0,
            init: InitScheme::Gaussian,
            init_std: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr0 > 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.l2_lambda >= 0.0
            && self.batch_size > 0
            && self.epochs > 0
            && self.lr_decay_every > 0
            && self.lr_decay_gamma >= 0.0
            && self.init_std > 0.0;
        if ok {
            Ok(())
        } else {
            Err(QpiError::Config(format!("invalid training configuration {self:?}")))
        }
    }

    pub fn init(&self) -> Init {
        match self.init {
            InitScheme::Gaussian => Init::Gaussian { std: self.init_std },
            InitScheme::He => Init::He,
        }
    }
}

/// Inverse decay: `lr0 / (1 + γ·⌊epoch / every⌋)`.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    config.lr0 / (1.0 + config.lr_decay_gamma * (epoch / config.lr_decay_every) as f64)
}

/// Momentum update: `v ← μ·v − lr·g`, then `w ← w + v`.
pub fn sgd_step<T: Real>(weights: &mut [T], grads: &[T], velocity: &mut [T], lr: f64, momentum: f64) {
    let lr = T::from_f64_lossy(lr);
    let mu = T::from_f64_lossy(momentum);
    for ((w, &g), v) in weights.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = mu * *v - lr * g;
        *w = *w + *v;
    }
}

pub fn sgd_step_param<T: Real>(param: &mut Param<T>, lr: f64, momentum: f64) {
    let Param {
        value, grad, velocity, ..
    } = param;
    sgd_step(value, grad, velocity, lr, momentum);
}

/// Mean binary cross-entropy of sigmoid(logits) against 0/1 targets, and its
/// gradient with respect to the logits, `(σ(z) − y)/B`.
pub fn bce_with_logits<T: Real>(logits: &Tensor<T>, targets: &[f32]) -> Result<(f64, Tensor<T>)> {
    let b = logits.batch();
    if logits.len() != b || targets.len() != b {
        return Err(QpiError::Shape(format!(
            "binary loss needs one logit per target: {:?} vs {}",
            logits.shape(),
            targets.len()
        )));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(b);
    for (&z, &y) in logits.data().iter().zip(targets) {
        let z = z.as_f64();
        let y = y as f64;
        // log(1 + e^z) − y·z, computed without overflow.
        loss += z.max(0.0) - y * z + (-z.abs()).exp().ln_1p();
        let p = 1.0 / (1.0 + (-z).exp());
        grad.push(T::from_f64_lossy((p - y) / b as f64));
    }
    Ok((loss / b as f64, Tensor::from_vec(logits.shape(), grad)?))
}

/// A batch of network inputs with binary targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Minibatch {
    pub inputs: Tensor<f32>,
    pub targets: Vec<f32>,
}

/// Training and validation data for [`train`]. Batches are assembled on
/// demand from sample indices.
pub trait DataSource {
    fn train_len(&self) -> usize;
    fn val_len(&self) -> usize;
    fn train_batch(&self, indices: &[usize]) -> Result<Minibatch>;
    fn val_batch(&self, indices: &[usize]) -> Result<Minibatch>;

    /// Training order for one epoch.
    fn train_order(&self, epoch_seed: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.train_len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        order
    }
}

/// Samples held in memory, each `(C·H·W values, target)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InMemoryData {
    pub sample_shape: [usize; 3],
    pub train: Vec<(Vec<f32>, f32)>,
    pub val: Vec<(Vec<f32>, f32)>,
}

/// Stacks `(values, target)` samples of one shape into a minibatch.
pub fn stack_samples<'a>(
    samples: impl IntoIterator<Item = (&'a [f32], f32)>,
    shape: [usize; 3],
) -> Result<Minibatch> {
    let mut data = Vec::new();
    let mut targets = Vec::new();
    for (values, target) in samples {
        data.extend_from_slice(values);
        targets.push(target);
    }
    Ok(Minibatch {
        inputs: Tensor::from_vec(&[targets.len(), shape[0], shape[1], shape[2]], data)?,
        targets,
    })
}

fn pick<'a>(pool: &'a [(Vec<f32>, f32)], indices: &'a [usize]) -> Result<Vec<(&'a [f32], f32)>> {
    indices
        .iter()
        .map(|&i| {
            pool.get(i)
                .map(|s| (s.0.as_slice(), s.1))
                .ok_or_else(|| QpiError::Contract(format!("sample index {i} out of range")))
        })
        .collect()
}

impl DataSource for InMemoryData {
    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn val_len(&self) -> usize {
        self.val.len()
    }

    fn train_batch(&self, indices: &[usize]) -> Result<Minibatch> {
        stack_samples(pick(&self.train, indices)?, self.sample_shape)
    }

    fn val_batch(&self, indices: &[usize]) -> Result<Minibatch> {
        stack_samples(pick(&self.val, indices)?, self.sample_shape)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub batches: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub log: Vec<EpochLog>,
    /// Set when training stopped on a non-finite loss; `model` is then the
    /// state at the start of the failing epoch.
    pub diverged: Option<String>,
}

/// Loss and accuracy (threshold 0.5) over the validation split, Eval mode.
pub fn evaluate(model: &mut Model<f32>, data: &dyn DataSource, batch_size: usize) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut n = 0usize;
    let order: Vec<usize> = (0..data.val_len()).collect();
    for chunk in order.chunks(batch_size.max(1)) {
        let batch = data.val_batch(chunk)?;
        let logits = model.logits(batch.inputs, Mode::Eval, &mut rng)?;
        let (l, _) = bce_with_logits(&logits, &batch.targets)?;
        loss += l * batch.targets.len() as f64;
        for (&z, &y) in logits.data().iter().zip(&batch.targets) {
            if (z >= 0.0) == (y >= 0.5) {
                correct += 1;
            }
        }
        n += batch.targets.len();
    }
    if n == 0 {
        return Err(QpiError::EmptyInput("no samples to evaluate".into()));
    }
    Ok((loss / n as f64, correct as f64 / n as f64))
}

/// Minibatch SGD with momentum, L2 and inverse learning-rate decay.
pub fn train(mut model: Model<f32>, data: &dyn DataSource, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if data.val_len() == 0 {
        return Err(QpiError::EmptyInput("validation split is empty".into()));
    }
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = lr_schedule(epoch, config);
        let order = data.train_order(seed::derive(config.seed, &format!("epoch:{epoch}")));
        if order.is_empty() {
            return Err(QpiError::EmptyInput("training split is empty".into()));
        }
        let snapshot = model.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(config.seed, &format!("dropout:{epoch}")));
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut batches = 0;
        for (i, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = data.train_batch(chunk)?;
            batches += 1;
            model.zero_grads();
            let step = model
                .logits(batch.inputs, Mode::Train, &mut rng)
                .and_then(|logits| bce_with_logits(&logits, &batch.targets))
                .and_then(|(loss, grad)| model.backward_params(grad).map(|_| loss));
            let loss = match step {
                Ok(loss) if loss.is_finite() => loss,
                Ok(loss) => {
                    return Ok(diverged(snapshot, log, format!("epoch {epoch} batch {i}: loss {loss}")));
                }
                Err(e @ QpiError::NumericFault { .. }) => {
                    return Ok(diverged(snapshot, log, format!("epoch {epoch} batch {i}: {e}")));
                }
                Err(e) => return Err(e),
            };
            model.add_l2_gradient(config.l2_lambda);
            for p in model.params_mut() {
                sgd_step_param(p, lr, config.momentum);
            }
            loss_sum += loss * batch.targets.len() as f64;
            seen += batch.targets.len();
        }
        let (val_loss, val_accuracy) = match evaluate(&mut model, data, config.batch_size) {
            Ok(v) => v,
            Err(e @ QpiError::NumericFault { .. }) => {
                return Ok(diverged(snapshot, log, format!("epoch {epoch} validation: {e}")));
            }
            Err(e) => return Err(e),
        };
        let record = EpochLog {
            epoch,
            lr,
            batches,
            train_loss: loss_sum / seen as f64,
            val_loss,
            val_accuracy,
        };
        info!(
            "epoch {epoch} lr {lr:.3e} train_loss {:.4} val_loss {val_loss:.4} val_acc {val_accuracy:.4}",
            record.train_loss
        );
        log.push(record);
    }
    Ok(TrainOutcome {
        model,
        log,
        diverged: None,
    })
}

fn diverged(model: Model<f32>, log: Vec<EpochLog>, reason: String) -> TrainOutcome {
    warn!("training diverged: {reason}");
    TrainOutcome {
        model,
        log,
        diverged: Some(reason),
    }
}

/// Sigmoid scores for a batch, Eval mode.
pub fn predict<T: Real>(model: &mut Model<T>, inputs: Tensor<T>) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = model.forward(inputs, Mode::Eval, &mut rng)?;
    Ok(out.data().iter().map(|v| v.as_f64()).collect())
}
