//! Small differentiable networks: dense, convolution, average pooling and
//! element-wise activations, trained with softmax cross-entropy and SGD.

mod net;
mod params;
mod spec;
mod train;

pub use net::{backward, backward_soft, forward, log_softmax, predict, softmax, ForwardCache};
pub use params::{init_params, sgd_step, Gradient, ModelParams, ParamBlock, ParamRole};
pub use spec::{Activation, LayerKind, ModelSpec};
pub use train::{accuracy, evaluate_loss, train_local, LocalTraining};
