//! Log-gamma and digamma on the positive reals.
//!
//! Both use upward recurrence into the region `x >= SHIFT` followed by the
//! Stirling / de Moivre asymptotic series.

use crate::error::{domain, Result};

const SHIFT: f64 = 10.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

// B_{2k} / (2k (2k - 1)) for k = 1..8.
const STIRLING: [f64; 8] = [
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360_360.0,
    1.0 / 156.0,
    -3617.0 / 122_400.0,
];

// B_{2k} / (2k) for k = 1..8.
const DIGAMMA_SERIES: [f64; 8] =
    [1.0 / 12.0, -1.0 / 120.0, 1.0 / 252.0, -1.0 / 240.0, 1.0 / 132.0, -691.0 / 32_760.0, 1.0 / 12.0, -3617.0 / 8160.0];

/// `ln Γ(x)` for `x > 0`.
pub fn log_gamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(domain(format!("log_gamma requires finite x > 0, got {x}")));
    }
    Ok(lgamma(x))
}

/// `ψ(x) = d/dx ln Γ(x)` for `x > 0`.
pub fn digamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(domain(format!("digamma requires finite x > 0, got {x}")));
    }
    Ok(psi(x))
}

/// Unchecked `ln Γ`; callers guarantee `x > 0`.
pub(crate) fn lgamma(mut x: f64) -> f64 {
    let mut log_prod = 0.0;
    if x < SHIFT {
        let mut prod = 1.0;
        while x < SHIFT {
            prod *= x;
            x += 1.0;
        }
        log_prod = prod.ln();
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let mut series = 0.0;
    let mut pow = inv;
    for c in STIRLING {
        series += c * pow;
        pow *= inv2;
    }
    (x - 0.5) * x.ln() - x + HALF_LN_2PI + series - log_prod
}

/// Unchecked digamma; callers guarantee `x > 0`.
pub(crate) fn psi(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < SHIFT {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv2 = 1.0 / (x * x);
    let mut series = 0.0;
    let mut pow = inv2;
    for c in DIGAMMA_SERIES {
        series += c * pow;
        pow *= inv2;
    }
    acc + x.ln() - 0.5 / x - series
}

/// `ln B(a, b)`; callers guarantee positive shapes.
pub(crate) fn ln_beta(a: f64, b: f64) -> f64 {
    lgamma(a) + lgamma(b) - lgamma(a + b)
}
