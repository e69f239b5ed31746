//! A small trainable network with binarized layers and manual backpropagation.

pub mod checkpoint;
pub mod engine;
pub mod gradcheck;
pub mod spec;
pub mod state;
pub mod train;

pub use engine::{backward, forward, softmax_cross_entropy, ForwardCache, Mode};
pub use gradcheck::{gradient_check, GradientCheck};
pub use spec::{Architecture, LayerSpec, PoolKind, Shape3, Variant};
pub use state::{Gradients, LayerGradient, LayerState, NetworkState};
pub use train::{epoch_begin_rotate, evaluate, layer_metrics, train, TrainConfig};
