//! Differentiable building blocks: dense, convolutional and recurrent layers
//! with hand-derived reverse-mode gradients, the optimizer, and the
//! checkpoint format.

mod adam;
pub mod checkpoint;
mod conv;
mod gradcheck;
pub mod linalg;
mod linear;
mod lstm;
pub mod math;
mod param;
mod tensor;

pub use adam::Adam;
pub use conv::{conv2d_forward, conv_out_size, Conv2d, ConvCache, ConvTranspose2d, ConvTransposeCache};
pub use gradcheck::{grad_check, GradCheckReport, GRAD_FLOOR};
pub use linear::{relu_backward_in_place, relu_in_place, Linear};
pub use lstm::{lstm_step, LstmCell, LstmGrad, LstmState, LstmStepCache};
pub use math::{gaussian_log_pdf, softmax};
pub use param::{ParamId, ParamSet};
pub use tensor::Tensor;
