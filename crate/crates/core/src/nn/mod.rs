//! From-scratch differentiable layers, the two custom classifier
//! architectures, their losses, optimizer and schedule, plus weight files.

pub mod graph;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;
pub mod store;
pub mod tensor;
pub mod train;

pub use graph::{build_model, LayerSpec, ModelGraph, Shape};
pub use layers::{Ctx, Layer, Mode};
pub use loss::{batch_loss_and_grad, cross_entropy, poly_loss, softmax, LossKind};
pub use model::Model;
pub use optim::{adam_step, cosine_lr, AdamState};
pub use store::{load_model, save_model};
pub use tensor::{Param, Tensor};
pub use train::{accuracy, train, train_demo, Example, StepLog, TrainConfig};
