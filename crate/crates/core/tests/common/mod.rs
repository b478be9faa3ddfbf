#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use panelpomp::models::linear_gaussian::LinearGaussian;
use panelpomp::panel::{PanelDataset, PanelPomp};
use panelpomp::params::{ParamSpec, Role, Transform};
use panelpomp::pomp::Observation;
use panelpomp::simulate::simulate;

/// Exact log-likelihood of the stationary AR(1) plus noise model observed at
/// times 1..=n, started from the stationary law at time 0.
pub fn kalman_loglik(y: &[f64], mu: f64, phi: f64, sigma: f64, tau: f64) -> f64 {
    let mut m = mu;
    let mut p = sigma * sigma / (1.0 - phi * phi);
    let mut ll = 0.0;
    for &yt in y {
        m = mu + phi * (m - mu);
        p = phi * phi * p + sigma * sigma;
        let s = p + tau * tau;
        let e = yt - m;
        ll += -0.5 * ((2.0 * std::f64::consts::PI * s).ln() + e * e / s);
        let k = p / s;
        m += k * e;
        p *= 1.0 - k;
    }
    ll
}

/// Maximizer of a unimodal `f` on `[lo, hi]`.
pub fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - g * (hi - lo);
    let mut b = lo + g * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    while hi - lo > tol {
        if fa < fb {
            lo = a;
            a = b;
            fa = fb;
            b = lo + g * (hi - lo);
            fb = f(b);
        } else {
            hi = b;
            b = a;
            fb = fa;
            a = hi - g * (hi - lo);
            fa = f(a);
        }
    }
    0.5 * (lo + hi)
}

pub fn unit_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("u{i}")).collect()
}

/// Linear-Gaussian panel with shared `tau` and unit-specific `mu`; `phi`
/// and `sigma` fixed.
pub fn lg_panel(n_units: usize) -> PanelPomp {
    let specs = vec![
        ParamSpec::estimated("mu", Transform::Identity).with_role(Role::UnitSpecific),
        ParamSpec::fixed("phi", Transform::Identity),
        ParamSpec::fixed("sigma", Transform::Log),
        ParamSpec::estimated("tau", Transform::Log),
    ];
    PanelPomp::from_roles(&unit_ids(n_units), Arc::new(LinearGaussian::new()), 0.0, specs).unwrap()
}

/// One simulated series per entry of `mus` at times 1..=n_obs.
pub fn lg_data(mus: &[f64], phi: f64, sigma: f64, tau: f64, n_obs: usize, seed: u64) -> PanelDataset {
    let model = LinearGaussian::new();
    let times: Vec<f64> = (1..=n_obs).map(|t| t as f64).collect();
    let mut units = BTreeMap::new();
    for (id, &mu) in unit_ids(mus.len()).into_iter().zip(mus) {
        let ens = simulate(&model, &[mu, phi, sigma, tau], 0.0, &times, 1, seed ^ panelpomp::rng::hash_str(&id)).unwrap();
        let obs = ens.trajectories[0]
            .measurements
            .iter()
            .zip(&times)
            .map(|(y, &t)| Observation::new(t, vec![Some(y[0])]))
            .collect();
        units.insert(id, obs);
    }
    PanelDataset::new(vec!["y".into()], units).unwrap()
}

pub fn series(data: &PanelDataset, unit: &str) -> Vec<f64> {
    data.units[unit].iter().map(|o| o.values[0].unwrap()).collect()
}
