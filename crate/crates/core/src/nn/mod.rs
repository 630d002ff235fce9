//! Minimal feed-forward classification engine.
//!
//! Models are a stack of conv1d, dense and ReLU layers with an implicit
//! softmax head. Parameters are stored as `f32`; all arithmetic runs in `f64`
//! so gradients can be checked against finite differences.

mod arch;
mod model;
mod ops;
mod train;

pub use arch::{ArchSpec, LayerSpec, TensorRole, TensorSlot};
pub use model::{FpModel, Prediction, Trace};
pub use ops::OpCounts;
pub use train::{
    accuracy, backward_stats, loss_and_gradients, mean_loss, train_epoch, train_epoch_on, Gradients, TrainConfig,
};
