//! Learned diffusion-time schedules on toy flow-matching problems.
//!
//! A frozen velocity field transports Gaussian noise to a target mixture
//! with Euler steps. A small policy network looks at each step's state and
//! velocity and predicts a Beta law over the multiplicative decay of the
//! diffusion time; the policy is trained with PPO on a step-discounted
//! final-sample reward using leave-one-out advantages.

// Range checks are written `!(x > 0.0)` on purpose so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod flow;
pub mod harness;
pub mod rl;
pub mod sampler;
pub mod special_math;
pub mod tensor_nn;
pub mod tpm;

pub use error::{Error, Result};
