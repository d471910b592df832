//! Deterministic tensor math with tape-based reverse-mode automatic
//! differentiation, plus the optimizer set used by the training harness.
//!
//! All operations are pure functions of their inputs; a [`Tape`] records one
//! forward pass and supports a single backward sweep. Training runs in `f32`;
//! gradient checks instantiate the same code at `f64`.

mod gradcheck;
mod init;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{compare_gradients, grad_check, GradCheckReport, InputReport};
pub use init::{he_uniform, xavier_uniform};
pub use optim::{adam_step, AdamParams, AdamState, LrSchedule};
pub use tape::{BnMode, Tape, ValueId};
pub use tensor::{Real, Tensor};
