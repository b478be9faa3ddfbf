//! Negative binomial measurement distribution parameterized by mean and
//! dispersion: mean `mu`, variance `mu + mu^2 / tau`.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use statrs::function::gamma::ln_gamma;

use crate::error::{PompError, Result};

/// Latent means at or below this floor are treated as structurally empty.
pub const MEAN_FLOOR: f64 = 1e-8;

/// `ln Γ(y + tau) - ln Γ(tau)` without cancellation for small counts.
fn ln_rising(tau: f64, y: u64) -> f64 {
    if y < 64 {
        (0..y).map(|k| (tau + k as f64).ln()).sum()
    } else {
        ln_gamma(y as f64 + tau) - ln_gamma(tau)
    }
}

fn ln_factorial(y: u64) -> f64 {
    if y < 2 {
        0.0
    } else {
        ln_gamma(y as f64 + 1.0)
    }
}

fn logpmf_unchecked(y: u64, mu: f64, tau: f64) -> f64 {
    let yf = y as f64;
    // tau * ln(tau / (tau + mu)) = -tau * ln(1 + mu / tau)
    let size_term = -tau * (mu / tau).ln_1p();
    let count_term = if y == 0 {
        0.0
    } else {
        yf * (mu.ln() - (tau + mu).ln())
    };
    ln_rising(tau, y) - ln_factorial(y) + size_term + count_term
}

/// Log probability of count `y` under NB(mean `mu`, dispersion `tau`).
///
/// A mean at or below [`MEAN_FLOOR`] gives probability one to `y = 0`; a
/// positive count is then scored at the floor mean, which is finite but very
/// negative.
pub fn nbinom_logpmf(y: u64, mu: f64, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(PompError::InvalidArgument(format!(
            "negative binomial dispersion must be positive, got {tau}"
        )));
    }
    if !(mu >= 0.0) {
        return Err(PompError::InvalidArgument(format!(
            "negative binomial mean must be nonnegative, got {mu}"
        )));
    }
    Ok(nbinom_logpmf_floored(y, mu, tau))
}

/// Unchecked variant for hot loops; `tau > 0` is the caller's contract and
/// negative or NaN means are treated as empty.
#[inline]
pub fn nbinom_logpmf_floored(y: u64, mu: f64, tau: f64) -> f64 {
    if !(mu > MEAN_FLOOR) {
        return if y == 0 {
            0.0
        } else {
            logpmf_unchecked(y, MEAN_FLOOR, tau)
        };
    }
    if mu.is_infinite() {
        return f64::NEG_INFINITY;
    }
    logpmf_unchecked(y, mu, tau)
}

/// Gamma-Poisson draw from NB(mean `mu`, dispersion `tau`).
pub fn rnbinom<R: Rng + ?Sized>(mu: f64, tau: f64, rng: &mut R) -> u64 {
    if !(mu > 0.0) {
        return 0;
    }
    let lambda = Gamma::new(tau, mu / tau)
        .expect("dispersion and mean checked positive")
        .sample(rng);
    if !(lambda > 0.0) {
        return 0;
    }
    Poisson::new(lambda)
        .map(|p| p.sample(rng) as u64)
        .unwrap_or(0)
}
