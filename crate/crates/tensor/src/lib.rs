//! Dense `f64` tensors, tape-based reverse-mode differentiation, real 2-D
//! FFTs and truncated Fourier bases.

pub mod error;
pub mod fft;
pub mod modes;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use fft::{fft2, ifft2, signed_index, Fft2Plan, Spectrum};
pub use modes::ModeBasis;
pub use tape::{apply_taps, gelu_value, ElemOp, Gradients, Tap, Tape, Var};
pub use tensor::{broadcast_shape, Tensor};
