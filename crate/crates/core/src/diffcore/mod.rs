//! Minimal reverse-mode differentiation core for MLP classifiers.
//!
//! A [`Tape`] records vector-valued operations during the forward pass and
//! replays them in reverse to accumulate adjoints. Stop-gradient nodes pass
//! their value through but never propagate an adjoint, which is the contract
//! the pseudo-labeling losses rely on: the branch that decides a pseudo-label
//! enters the loss as a constant.

mod gradcheck;
mod mlp;
mod optim;
mod tape;

pub use gradcheck::grad_check;
pub use mlp::{mlp_forward, mlp_forward_taped, softmax_ce, softmax_ce_taped, Activation, Layer, ModelParams, TapeParams};
pub use optim::{lr_schedule, sgd_step, LrSchedule, OptimState};
pub use tape::{Gradients, NodeId, Op, Tape};
