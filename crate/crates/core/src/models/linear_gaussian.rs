//! Stationary Gaussian AR(1) observed with Gaussian noise.
//!
//! `X_t = mu + phi (X_{t-1} - mu) + sigma e_t`, `Y_t = X_t + tau h_t`. Spans
//! of arbitrary length are simulated exactly, so integer observation times
//! reproduce the discrete AR(1) chain. Used as a ground-truth model because
//! its likelihood is available from the Kalman filter.

use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::params::{ParamSpec, Transform};
use crate::pomp::{Observation, PompModel, StepStats};
use crate::rng::StreamRng;

pub const MU: usize = 0;
pub const PHI: usize = 1;
pub const SIGMA: usize = 2;
pub const TAU: usize = 3;

#[derive(Clone, Debug)]
pub struct LinearGaussian {
    state_labels: Vec<String>,
    obs_labels: Vec<String>,
}

impl Default for LinearGaussian {
    fn default() -> Self {
        LinearGaussian {
            state_labels: vec!["x".into()],
            obs_labels: vec!["y".into()],
        }
    }
}

impl LinearGaussian {
    pub fn new() -> Self {
        Self::default()
    }

    /// `mu` and `tau` estimated, `phi` and `sigma` fixed.
    pub fn default_values() -> Vec<f64> {
        vec![0.0, 0.8, 1.0, 1.0]
    }
}

fn normal_logpdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

impl PompModel for LinearGaussian {
    fn name(&self) -> &str {
        "linear_gaussian"
    }

    fn state_labels(&self) -> &[String] {
        &self.state_labels
    }

    fn obs_labels(&self) -> &[String] {
        &self.obs_labels
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        vec![
            ParamSpec::estimated("mu", Transform::Identity),
            ParamSpec::fixed("phi", Transform::Identity),
            ParamSpec::fixed("sigma", Transform::Log),
            ParamSpec::estimated("tau", Transform::Log),
        ]
    }

    fn rinit(&self, params: &[f64], _t0: f64, rng: &mut StreamRng) -> Vec<f64> {
        let (mu, phi, sigma) = (params[MU], params[PHI], params[SIGMA]);
        let sd = sigma / (1.0 - phi * phi).sqrt();
        let z: f64 = StandardNormal.sample(rng);
        vec![mu + sd * z]
    }

    fn rprocess(
        &self,
        state: &mut [f64],
        params: &[f64],
        t_from: f64,
        t_to: f64,
        rng: &mut StreamRng,
    ) -> Result<StepStats> {
        let (mu, phi, sigma) = (params[MU], params[PHI], params[SIGMA]);
        let span = t_to - t_from;
        let a = phi.powf(span);
        let sd = if (1.0 - phi * phi).abs() < 1e-12 {
            sigma * span.sqrt()
        } else {
            sigma * ((1.0 - a * a) / (1.0 - phi * phi)).sqrt()
        };
        let z: f64 = StandardNormal.sample(rng);
        state[0] = mu + a * (state[0] - mu) + sd * z;
        Ok(StepStats::default())
    }

    fn dmeasure_label(&self, label: usize, obs: &Observation, state: &[f64], params: &[f64]) -> f64 {
        match obs.values[label] {
            Some(y) => normal_logpdf(y, state[0], params[TAU]),
            None => 0.0,
        }
    }

    fn rmeasure(&self, state: &[f64], params: &[f64], rng: &mut StreamRng) -> Vec<f64> {
        let z: f64 = StandardNormal.sample(rng);
        vec![state[0] + params[TAU] * z]
    }
}
