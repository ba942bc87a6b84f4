//! The Beta law over decay rates: density, sampling and KL divergence.

use serde::{Deserialize, Serialize};

use super::gamma::{ln_beta, psi};
use super::rng::RngStream;
use crate::error::{domain, Result};

/// Lower clamp applied to Beta draws; the upper clamp is `1 - SAMPLE_EPS`.
pub const SAMPLE_EPS: f64 = 1e-6;

/// Shape pair of a unimodal Beta law (`alpha > 1`, `beta > 1`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    alpha: f64,
    beta: f64,
}

impl BetaParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !alpha.is_finite() || !beta.is_finite() {
            return Err(domain(format!("Beta shapes must be finite, got ({alpha}, {beta})")));
        }
        if !(alpha > 1.0 && beta > 1.0) {
            return Err(domain(format!("Beta shapes must exceed 1, got ({alpha}, {beta})")));
        }
        Ok(Self { alpha, beta })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    /// `(alpha - 1) / (alpha + beta - 2)`, well defined since both shapes exceed 1.
    pub fn mode(&self) -> f64 {
        (self.alpha - 1.0) / (self.alpha + self.beta - 2.0)
    }
}

/// Log-density of a Beta law with arbitrary positive shapes.
pub fn beta_log_density(r: f64, alpha: f64, beta: f64) -> Result<f64> {
    if !(r > 0.0 && r < 1.0) {
        return Err(domain(format!("Beta density needs r in (0, 1), got {r}")));
    }
    if !(alpha > 0.0 && beta > 0.0) || !alpha.is_finite() || !beta.is_finite() {
        return Err(domain(format!("Beta shapes must be positive, got ({alpha}, {beta})")));
    }
    Ok(log_density(r, alpha, beta))
}

/// `(α−1) ln r + (β−1) ln(1−r) − ln B(α, β)`.
pub fn beta_log_pdf(r: f64, p: &BetaParams) -> Result<f64> {
    beta_log_density(r, p.alpha, p.beta)
}

pub(crate) fn log_density(r: f64, alpha: f64, beta: f64) -> f64 {
    (alpha - 1.0) * r.ln() + (beta - 1.0) * (-r).ln_1p() - ln_beta(alpha, beta)
}

/// Partial derivatives of the log-density with respect to `(alpha, beta)`.
pub fn beta_log_pdf_grad(r: f64, p: &BetaParams) -> (f64, f64) {
    let common = psi(p.alpha + p.beta);
    (r.ln() - psi(p.alpha) + common, (-r).ln_1p() - psi(p.beta) + common)
}

/// Gamma(shape, 1) draw by Marsaglia–Tsang, with the `U^{1/a}` boost for
/// shapes below one.
pub fn gamma_sample(shape: f64, rng: &mut RngStream) -> f64 {
    if shape < 1.0 {
        let u = rng.uniform_open();
        return gamma_sample(shape + 1.0, rng) * u.powf(1.0 / shape);
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let (x, v) = loop {
            let x = rng.standard_normal();
            let v = 1.0 + c * x;
            if v > 0.0 {
                break (x, v * v * v);
            }
        };
        let u = rng.uniform_open();
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

/// Exact Beta draw via the ratio of two independent Gamma variates, clamped
/// to `[SAMPLE_EPS, 1 - SAMPLE_EPS]`.
pub fn beta_sample(p: &BetaParams, rng: &mut RngStream) -> f64 {
    let x = gamma_sample(p.alpha, rng);
    let y = gamma_sample(p.beta, rng);
    (x / (x + y)).clamp(SAMPLE_EPS, 1.0 - SAMPLE_EPS)
}

/// `KL(p ‖ q)` between two Beta laws.
pub fn beta_kl(p: &BetaParams, q: &BetaParams) -> f64 {
    let (ap, bp, aq, bq) = (p.alpha, p.beta, q.alpha, q.beta);
    let kl = ln_beta(aq, bq) - ln_beta(ap, bp)
        + (ap - aq) * psi(ap)
        + (bp - bq) * psi(bp)
        + (aq - ap + bq - bp) * psi(ap + bp);
    // Cancellation can leave a tiny negative residue when p ≈ q.
    kl.max(0.0)
}

/// Gradient of `KL(p ‖ q)` with respect to the second argument's `(alpha, beta)`.
pub fn beta_kl_grad_q(p: &BetaParams, q: &BetaParams) -> (f64, f64) {
    let ref_common = psi(p.alpha + p.beta);
    let q_common = psi(q.alpha + q.beta);
    (psi(q.alpha) - q_common - psi(p.alpha) + ref_common, psi(q.beta) - q_common - psi(p.beta) + ref_common)
}
