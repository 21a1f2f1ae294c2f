//! Dense-tensor network engine with hand-written backpropagation, the
//! five-convolution classifier and its SGD trainer.

mod checkpoint;
mod layers;
mod model;
mod tensor;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, sidecar_path};
pub use layers::{sigmoid, LayerKind, LayerSpec, Mode, Param, Rounding};
pub use model::{classifier_specs, Init, Model, INPUT_SIDE};
pub use tensor::{Real, Tensor};
pub use train::{
    bce_with_logits, evaluate, lr_schedule, predict, sgd_step, sgd_step_param, stack_samples, train, DataSource, EpochLog,
    InMemoryData, InitScheme, Minibatch, TrainConfig, TrainOutcome,
};

#[cfg(test)]
mod tests;
