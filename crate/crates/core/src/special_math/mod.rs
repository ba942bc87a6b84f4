//! Special functions, the Beta decay-rate law and the seeded random streams
//! shared by every other module.

mod beta;
mod gamma;
mod rng;

pub use beta::{
    beta_kl, beta_kl_grad_q, beta_log_density, beta_log_pdf, beta_log_pdf_grad, beta_sample, gamma_sample, BetaParams,
    SAMPLE_EPS,
};
pub use gamma::{digamma, log_gamma};
pub use rng::{stream_key, RngStream};
