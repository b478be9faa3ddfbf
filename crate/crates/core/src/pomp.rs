//! The plug-and-play model interface.
//!
//! A model is specified by an initializer, a simulator of the latent process
//! and a measurement density. Transition densities are never required.

use crate::error::Result;
use crate::params::ParamSpec;
use crate::rng::StreamRng;

/// One measurement time for one unit. `values[i]` corresponds to the i-th
/// entry of the label list it was resolved against; `None` marks a missing
/// measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub time: f64,
    pub values: Vec<Option<f64>>,
}

impl Observation {
    pub fn new(time: f64, values: Vec<Option<f64>>) -> Self {
        Observation { time, values }
    }

    pub fn all_missing(&self) -> bool {
        self.values.iter().all(Option::is_none)
    }
}

/// Latent state paired with compartment labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub labels: Vec<String>,
    pub values: Vec<f64>,
}

/// Diagnostics reported by one call to [`PompModel::rprocess`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepStats {
    /// Number of compartment values clamped at zero.
    pub clamps: u64,
}

impl std::ops::AddAssign for StepStats {
    fn add_assign(&mut self, rhs: Self) {
        self.clamps += rhs.clamps;
    }
}

/// Plug-and-play model. Implementations hold no mutable state; randomness
/// always comes from the caller's stream, so calls are reentrant and
/// reproducible.
///
/// Parameter slices are on the natural scale, ordered as in
/// [`PompModel::param_specs`].
pub trait PompModel: Send + Sync {
    fn name(&self) -> &str;

    fn state_labels(&self) -> &[String];

    fn obs_labels(&self) -> &[String];

    /// Default parameter declarations in the order the model expects.
    fn param_specs(&self) -> Vec<ParamSpec>;

    fn state_dim(&self) -> usize {
        self.state_labels().len()
    }

    fn rinit(&self, params: &[f64], t0: f64, rng: &mut StreamRng) -> Vec<f64>;

    /// Advances `state` from `t_from` to `t_to` in place.
    fn rprocess(
        &self,
        state: &mut [f64],
        params: &[f64],
        t_from: f64,
        t_to: f64,
        rng: &mut StreamRng,
    ) -> Result<StepStats>;

    /// Log measurement density of `obs` (resolved against `obs_labels`).
    /// Missing entries contribute nothing. Never NaN.
    fn dmeasure(&self, obs: &Observation, state: &[f64], params: &[f64]) -> f64 {
        (0..self.obs_labels().len())
            .map(|i| self.dmeasure_label(i, obs, state, params))
            .sum()
    }

    /// Contribution of observation label `label` to [`PompModel::dmeasure`].
    fn dmeasure_label(&self, label: usize, obs: &Observation, state: &[f64], params: &[f64]) -> f64;

    /// Draws a measurement given the latent state.
    fn rmeasure(&self, state: &[f64], params: &[f64], rng: &mut StreamRng) -> Vec<f64>;
}
