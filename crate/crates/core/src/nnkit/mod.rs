//! A small layered neural-network core: conv, transposed conv, max pool,
//! dense and activation layers with exact reverse-mode gradients.

mod network;
mod ops;
mod optim;
mod params;
mod spec;

pub mod loss;
pub mod train;

pub use loss::{grad, loss_value, output_grad, Loss, Target};
pub use network::{
    argmax, sigmoid, softmax, ActivationStack, Batch, ClassScores, Embedding, Network, Taps, Trace,
};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use params::{EpochStats, Gradients, LayerParams, NetworkParams, ParamsMeta};
pub use spec::{critic_spec, spec_cnn, upsampler_spec, Activation, LayerSpec, NetworkSpec, Shape};
pub use train::{
    accuracy, normalize_rows, predict_classes, train_autoencoder, train_classifier,
    train_classifier_on, Autoencoder, AutoencoderConfig, TrainConfig,
};
