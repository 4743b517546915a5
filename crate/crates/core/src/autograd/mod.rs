//! Reverse-mode differentiation for training, Adam, and finite-difference
//! gradient verification.

mod adam;
mod gradcheck;
mod params;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{
    grad_check, Evaluation, GradCheckConfig, GradCheckReport, Objective, KINK_MARGIN,
};
pub use params::{Grads, ParamStore};
pub use tape::{Gradients, NodeId, OpKind, Tape};
