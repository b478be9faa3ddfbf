//! Forward simulation of latent trajectories and measurements, and
//! pointwise quantile bands over an ensemble.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{PompError, Result};
use crate::pomp::PompModel;
use crate::rng::{self, tag};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Trajectory {
    /// `states[n]` is the latent state at `times[n]`.
    pub states: Vec<Vec<f64>>,
    pub measurements: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Ensemble {
    pub times: Vec<f64>,
    pub state_labels: Vec<String>,
    pub obs_labels: Vec<String>,
    pub trajectories: Vec<Trajectory>,
}

/// Simulates `n_sims` independent runs from `t0`, recording the state and a
/// measurement draw at each of `times`. Run `i` draws from its own stream,
/// so the ensemble does not depend on the worker count.
pub fn simulate(
    model: &dyn PompModel,
    params: &[f64],
    t0: f64,
    times: &[f64],
    n_sims: usize,
    seed: u64,
) -> Result<Ensemble> {
    if n_sims == 0 {
        return Err(PompError::InvalidArgument("need at least one simulation".into()));
    }
    let mut prev = t0;
    for &t in times {
        if !(t >= prev) {
            return Err(PompError::InvalidArgument(format!("simulation times must be nondecreasing from t0 = {t0}, got {t}")));
        }
        prev = t;
    }
    let trajectories = (0..n_sims)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, &[tag::SIMULATE, i as u64]);
            let mut x = model.rinit(params, t0, &mut r);
            let mut t_prev = t0;
            let mut states = Vec::with_capacity(times.len());
            let mut measurements = Vec::with_capacity(times.len());
            for &t in times {
                if t > t_prev {
                    model.rprocess(&mut x, params, t_prev, t, &mut r)?;
                }
                t_prev = t;
                measurements.push(model.rmeasure(&x, params, &mut r));
                states.push(x.clone());
            }
            Ok(Trajectory { states, measurements })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Ensemble {
        times: times.to_vec(),
        state_labels: model.state_labels().to_vec(),
        obs_labels: model.obs_labels().to_vec(),
        trajectories,
    })
}

/// Linear-interpolation sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub const BAND_PROBS: [f64; 3] = [0.025, 0.5, 0.975];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BandRow {
    pub time: f64,
    pub label: String,
    /// One value per entry of the requested probabilities.
    pub quantiles: Vec<f64>,
}

/// Pointwise quantiles across the ensemble for every latent compartment and
/// every measurement label.
pub fn quantile_bands(ens: &Ensemble, probs: &[f64]) -> Vec<BandRow> {
    let mut rows = Vec::new();
    let series = |extract: &dyn Fn(&Trajectory, usize) -> f64, label: &str, rows: &mut Vec<BandRow>| {
        for (n, &time) in ens.times.iter().enumerate() {
            let mut v: Vec<f64> = ens.trajectories.iter().map(|tr| extract(tr, n)).collect();
            v.sort_by(f64::total_cmp);
            rows.push(BandRow {
                time,
                label: label.to_string(),
                quantiles: probs.iter().map(|&p| quantile_sorted(&v, p)).collect(),
            });
        }
    };
    for (k, label) in ens.state_labels.iter().enumerate() {
        series(&|tr, n| tr.states[n][k], label, &mut rows);
    }
    for (k, label) in ens.obs_labels.iter().enumerate() {
        series(&|tr, n| tr.measurements[n][k], &format!("obs_{label}"), &mut rows);
    }
    rows
}
