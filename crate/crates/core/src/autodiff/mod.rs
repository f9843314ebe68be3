//! Tensors, a reverse-mode tape, optimizers and checkpoint I/O.

mod checkpoint;
mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, VERSION as CHECKPOINT_VERSION};
pub use gradcheck::{gradient_check, gradient_check_params, DEFAULT_STEP};
pub use optim::{Adam, AdamConfig, EarlyStopping, MultiStepLr};
pub use params::{Init, ParamId, ParamStore, Parameter};
pub use tape::{huber_value, ConvPadding, Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
