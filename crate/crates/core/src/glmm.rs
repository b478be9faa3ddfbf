//! Negative binomial mixed models with polynomial time trends and a normal
//! random intercept per unit, used as non-mechanistic benchmarks.
//!
//! `log mu_{u,n} = beta_0 + beta_1 t + ... + beta_d t^d + b_u`,
//! `b_u ~ N(0, sigma_b^2)`, counts `NB(mu, tau)`. Each unit's intercept is
//! integrated out by adaptive Gauss-Hermite quadrature around its
//! conditional mode.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use argmin::core::{CostFunction, Error as ArgminError, Executor, State, TerminationReason, TerminationStatus};
use argmin::solver::neldermead::NelderMead;
use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{PompError, Result};
use crate::nbinom::{nbinom_logpmf_floored, rnbinom};
use crate::panel::PanelDataset;
use crate::rng;

pub const GH_NODES: usize = 20;

/// Gauss-Hermite nodes and weights for `int exp(-x^2) f(x) dx`.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    const PIM4: f64 = 0.751_125_544_464_942_5;
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    let mut z = 0.0f64;
    for i in 0..n.div_ceil(2) {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

fn gh20() -> &'static (Vec<f64>, Vec<f64>) {
    static NODES: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    NODES.get_or_init(|| gauss_hermite(GH_NODES))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GlmmUnit {
    pub id: String,
    pub times: Vec<f64>,
    pub counts: Vec<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GlmmData {
    pub units: Vec<GlmmUnit>,
}

impl GlmmData {
    /// Non-missing counts of `label`, one unit per panel unit that has any.
    pub fn from_panel(data: &PanelDataset, label: &str) -> Result<Self> {
        let col = data
            .labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| PompError::Data(format!("no column `{label}` in the data")))?;
        let mut units = Vec::new();
        for (id, obs) in &data.units {
            let mut times = Vec::new();
            let mut counts = Vec::new();
            for o in obs {
                if let Some(y) = o.values[col] {
                    if !(y >= 0.0 && y.fract() == 0.0) {
                        return Err(PompError::Data(format!("unit `{id}` at t = {}: `{label}` = {y} is not a count", o.time)));
                    }
                    times.push(o.time);
                    counts.push(y as u64);
                }
            }
            if !times.is_empty() {
                units.push(GlmmUnit { id: id.clone(), times, counts });
            }
        }
        Ok(GlmmData { units })
    }

    pub fn n_obs(&self) -> usize {
        self.units.iter().map(|u| u.counts.len()).sum()
    }

    fn max_abs_time(&self) -> f64 {
        self.units
            .iter()
            .flat_map(|u| u.times.iter())
            .fold(0.0, |m: f64, t| m.max(t.abs()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GlmmSpec {
    pub degree: usize,
    /// `beta[k]` multiplies `t^k`.
    pub beta: Vec<f64>,
    pub tau: f64,
    pub sigma_b: f64,
}

impl GlmmSpec {
    pub fn new(beta: Vec<f64>, tau: f64, sigma_b: f64) -> Result<Self> {
        let degree = beta.len().saturating_sub(1);
        if !(1..=3).contains(&degree) {
            return Err(PompError::InvalidArgument(format!("polynomial degree must be 1, 2 or 3, got {degree}")));
        }
        if !(tau > 0.0) || !(sigma_b >= 0.0) {
            return Err(PompError::InvalidArgument(format!(
                "need tau > 0 and sigma_b >= 0, got tau = {tau}, sigma_b = {sigma_b}"
            )));
        }
        Ok(GlmmSpec { degree, beta, tau, sigma_b })
    }

    /// Estimated parameters: coefficients, dispersion and intercept sd.
    pub fn n_params(&self) -> usize {
        self.degree + 3
    }

    fn eta(&self, t: f64) -> f64 {
        self.beta.iter().rev().fold(0.0, |acc, b| acc * t + b)
    }
}

fn nb_mode_terms(y: u64, mu: f64, tau: f64) -> (f64, f64) {
    let yf = y as f64;
    let d1 = yf - (yf + tau) * mu / (mu + tau);
    let d2 = -(yf + tau) * tau * mu / ((mu + tau) * (mu + tau));
    (d1, d2)
}

/// Log-likelihood of one unit with `nodes` quadrature points.
fn unit_loglik(spec: &GlmmSpec, unit: &GlmmUnit, nodes: &(Vec<f64>, Vec<f64>)) -> Result<f64> {
    let eta: Vec<f64> = unit.times.iter().map(|&t| spec.eta(t)).collect();
    let cond = |b: f64| -> f64 {
        eta.iter()
            .zip(&unit.counts)
            .map(|(e, &y)| nbinom_logpmf_floored(y, (e + b).exp(), spec.tau))
            .sum()
    };
    if spec.sigma_b == 0.0 {
        return Ok(cond(0.0));
    }
    let s2 = spec.sigma_b * spec.sigma_b;
    let log_prior = |b: f64| -0.5 * b * b / s2 - 0.5 * (2.0 * std::f64::consts::PI * s2).ln();
    let g = |b: f64| cond(b) + log_prior(b);
    let derivs = |b: f64| {
        let (mut d1, mut d2) = (-b / s2, -1.0 / s2);
        for (e, &y) in eta.iter().zip(&unit.counts) {
            let (a, c) = nb_mode_terms(y, (e + b).exp(), spec.tau);
            d1 += a;
            d2 += c;
        }
        (d1, d2)
    };
    let mut b = 0.0;
    let mut gb = g(b);
    for _ in 0..200 {
        let (d1, d2) = derivs(b);
        let mut step = -d1 / d2;
        let mut moved = false;
        for _ in 0..60 {
            let cand = b + step;
            let gc = g(cand);
            if gc >= gb || (gc - gb).abs() < 1e-14 {
                b = cand;
                gb = gc;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if !moved || step.abs() < 1e-12 * (1.0 + b.abs()) {
            break;
        }
    }
    let (_, d2) = derivs(b);
    let scale = 1.0 / (-d2).sqrt();
    let (x, w) = nodes;
    let terms: Vec<f64> = x
        .iter()
        .zip(w)
        .map(|(&xk, &wk)| wk.ln() + xk * xk + g(b + std::f64::consts::SQRT_2 * scale * xk))
        .collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ll = (std::f64::consts::SQRT_2 * scale).ln() + max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
    if !ll.is_finite() {
        return Err(PompError::Numerical(format!("unit `{}`: quadrature gave {ll}", unit.id)));
    }
    Ok(ll)
}

/// Marginal log-likelihood with the default 20-node quadrature.
pub fn glmm_loglik(spec: &GlmmSpec, data: &GlmmData) -> Result<f64> {
    let nodes = gh20();
    data.units.iter().map(|u| unit_loglik(spec, u, nodes)).sum()
}

pub fn glmm_loglik_nodes(spec: &GlmmSpec, data: &GlmmData, n_nodes: usize) -> Result<f64> {
    let nodes = gauss_hermite(n_nodes);
    data.units.iter().map(|u| unit_loglik(spec, u, &nodes)).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlmmFitSettings {
    pub restarts: usize,
    pub max_iters: u64,
    pub seed: u64,
}

impl Default for GlmmFitSettings {
    fn default() -> Self {
        GlmmFitSettings {
            restarts: 3,
            max_iters: 4000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GlmmFit {
    pub spec: GlmmSpec,
    pub loglik: f64,
    /// Standard errors of `beta` from the observed information.
    pub se_beta: Vec<f64>,
    pub converged: bool,
}

/// Negative log-likelihood over `(beta on scaled time, ln tau, ln sigma_b)`.
#[derive(Clone, Copy)]
struct Objective<'a> {
    data: &'a GlmmData,
    degree: usize,
    scale: f64,
}

impl Objective<'_> {
    fn spec(&self, z: &[f64]) -> GlmmSpec {
        let beta = (0..=self.degree).map(|k| z[k] / self.scale.powi(k as i32)).collect();
        GlmmSpec {
            degree: self.degree,
            beta,
            tau: z[self.degree + 1].exp(),
            sigma_b: z[self.degree + 2].exp(),
        }
    }

    fn value(&self, z: &[f64]) -> f64 {
        if z.iter().any(|v| !v.is_finite()) || z[self.degree + 1] > 40.0 || z[self.degree + 2] > 10.0 {
            return f64::INFINITY;
        }
        match glmm_loglik(&self.spec(z), self.data) {
            Ok(ll) if ll.is_finite() => -ll,
            _ => f64::INFINITY,
        }
    }
}

impl CostFunction for Objective<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, z: &Self::Param) -> std::result::Result<f64, ArgminError> {
        let v = self.value(z);
        Ok(if v.is_finite() { v } else { 1e300 })
    }
}

fn nelder_mead(obj: &Objective, start: &[f64], max_iters: u64) -> Result<(Vec<f64>, f64, bool)> {
    let mut simplex = vec![start.to_vec()];
    for i in 0..start.len() {
        let mut v = start.to_vec();
        v[i] += 0.5;
        simplex.push(v);
    }
    let solver = NelderMead::new(simplex)
        .with_sd_tolerance(1e-10)
        .map_err(|e| PompError::Numerical(e.to_string()))?;
    let res = Executor::new(*obj, solver)
        .configure(|s| s.max_iters(max_iters))
        .run()
        .map_err(|e| PompError::Numerical(e.to_string()))?;
    let state = res.state();
    let best = state
        .get_best_param()
        .cloned()
        .ok_or_else(|| PompError::Numerical("simplex search returned no point".into()))?;
    let converged = matches!(
        state.get_termination_status(),
        TerminationStatus::Terminated(TerminationReason::SolverConverged)
    );
    Ok((best, state.get_best_cost(), converged))
}

fn hessian(f: impl Fn(&[f64]) -> f64, z: &[f64], h: f64) -> DMatrix<f64> {
    let n = z.len();
    let f0 = f(z);
    let mut hm = DMatrix::zeros(n, n);
    let at = |di: usize, si: f64, dj: usize, sj: f64| {
        let mut v = z.to_vec();
        v[di] += si * h;
        v[dj] += sj * h;
        f(&v)
    };
    for i in 0..n {
        hm[(i, i)] = (at(i, 1.0, i, 1.0) - 2.0 * f0 + at(i, -1.0, i, -1.0)) / (4.0 * h * h);
        for j in 0..i {
            let v = (at(i, 1.0, j, 1.0) - at(i, 1.0, j, -1.0) - at(i, -1.0, j, 1.0) + at(i, -1.0, j, -1.0))
                / (4.0 * h * h);
            hm[(i, j)] = v;
            hm[(j, i)] = v;
        }
    }
    hm
}

/// Maximum likelihood fit by simplex search on scaled time, restarted from
/// jittered moment-based starts; keeps the best restart.
pub fn glmm_fit(degree: usize, data: &GlmmData, settings: &GlmmFitSettings) -> Result<GlmmFit> {
    if !(1..=3).contains(&degree) {
        return Err(PompError::InvalidArgument(format!("polynomial degree must be 1, 2 or 3, got {degree}")));
    }
    if data.n_obs() == 0 {
        return Err(PompError::Data("no counts to fit".into()));
    }
    let scale = data.max_abs_time().max(1e-12);
    let obj = Objective { data, degree, scale };
    let ys: Vec<f64> = data.units.iter().flat_map(|u| u.counts.iter().map(|&y| y as f64)).collect();
    let n = ys.len() as f64;
    let mean = ys.iter().sum::<f64>() / n;
    let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let tau0 = if var > mean + 1e-9 { mean * mean / (var - mean) } else { 10.0 };
    let mut start = vec![0.0; degree + 3];
    start[0] = (mean + 0.5).ln();
    start[degree + 1] = tau0.clamp(1e-3, 1e3).ln();
    start[degree + 2] = 0.3f64.ln();

    let mut r = rng::stream(settings.seed, &[0x474c_4d4d]);
    let jitter = Normal::new(0.0, 0.3).expect("valid sd");
    let mut best: Option<(Vec<f64>, f64, bool)> = None;
    for k in 0..settings.restarts.max(1) {
        let mut s = start.clone();
        if k > 0 {
            for v in s.iter_mut() {
                *v += jitter.sample(&mut r);
            }
        }
        let (z, cost, conv) = nelder_mead(&obj, &s, settings.max_iters)?;
        // restart once from the end point to shake off a collapsed simplex
        let (z, cost, conv) = {
            let (z2, c2, conv2) = nelder_mead(&obj, &z, settings.max_iters)?;
            if c2 <= cost { (z2, c2, conv2) } else { (z, cost, conv) }
        };
        if best.as_ref().is_none_or(|b| cost < b.1) {
            best = Some((z, cost, conv));
        }
    }
    let (z, cost, converged) = best.expect("at least one restart");
    if !cost.is_finite() || cost >= 1e300 {
        return Err(PompError::Numerical("GLMM fit found no finite likelihood".into()));
    }
    if !converged {
        log::warn!("GLMM degree {degree}: simplex search hit the iteration limit");
    }
    let spec = obj.spec(&z);
    let h = hessian(|v| obj.value(v), &z, 1e-4);
    let se_beta = match h.clone().try_inverse() {
        Some(cov) => (0..=degree)
            .map(|k| {
                let v = cov[(k, k)];
                if v > 0.0 { v.sqrt() / scale.powi(k as i32) } else { f64::NAN }
            })
            .collect(),
        None => vec![f64::NAN; degree + 1],
    };
    Ok(GlmmFit {
        loglik: -cost,
        spec,
        se_beta,
        converged,
    })
}

/// Independent fits per response label; log-likelihoods and parameter
/// counts add up across labels.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GlmmCategoryFit {
    pub degree: usize,
    pub fits: BTreeMap<String, GlmmFit>,
    pub loglik: f64,
    pub n_params: usize,
}

pub fn glmm_fit_categories(
    degree: usize,
    data: &PanelDataset,
    labels: &[String],
    settings: &GlmmFitSettings,
) -> Result<GlmmCategoryFit> {
    let mut fits = BTreeMap::new();
    for label in labels {
        let d = GlmmData::from_panel(data, label)?;
        fits.insert(label.clone(), glmm_fit(degree, &d, settings)?);
    }
    let loglik = fits.values().map(|f| f.loglik).sum();
    let n_params = fits.values().map(|f| f.spec.n_params()).sum();
    Ok(GlmmCategoryFit {
        degree,
        fits,
        loglik,
        n_params,
    })
}

/// Draws a dataset from `spec`: `units` units observed at `times`.
pub fn simulate_glmm(spec: &GlmmSpec, times: &[f64], units: usize, seed: u64) -> GlmmData {
    let mut r = rng::stream(seed, &[rng::tag::SIMULATE]);
    let normal = Normal::new(0.0, spec.sigma_b.max(0.0)).expect("valid sd");
    GlmmData {
        units: (0..units)
            .map(|u| {
                let b = if spec.sigma_b > 0.0 { normal.sample(&mut r) } else { 0.0 };
                GlmmUnit {
                    id: format!("u{u:02}"),
                    times: times.to_vec(),
                    counts: times.iter().map(|&t| rnbinom((spec.eta(t) + b).exp(), spec.tau, &mut r)).collect(),
                }
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hermite_rule_integrates_moments() {
        let (x, w) = gauss_hermite(GH_NODES);
        let sqrt_pi = std::f64::consts::PI.sqrt();
        assert!((w.iter().sum::<f64>() - sqrt_pi).abs() < 1e-12);
        let m2: f64 = x.iter().zip(&w).map(|(x, w)| w * x * x).sum();
        assert!((m2 - sqrt_pi / 2.0).abs() < 1e-12);
        let m4: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(4)).sum();
        assert!((m4 - 3.0 * sqrt_pi / 4.0).abs() < 1e-11);
        let odd: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(3)).sum();
        assert!(odd.abs() < 1e-12);
    }

    fn one_unit(times: Vec<f64>, counts: Vec<u64>) -> GlmmData {
        GlmmData {
            units: vec![GlmmUnit { id: "a".into(), times, counts }],
        }
    }

    #[test]
    fn no_random_effect_is_plain_regression() {
        let spec = GlmmSpec::new(vec![1.0, 0.1], 2.0, 0.0).unwrap();
        let d = one_unit(vec![1.0, 2.0, 3.0], vec![2, 5, 1]);
        let direct: f64 = [(1.0, 2u64), (2.0, 5), (3.0, 1)]
            .iter()
            .map(|&(t, y)| nbinom_logpmf_floored(y, (1.0f64 + 0.1 * t).exp(), 2.0))
            .sum();
        assert_eq!(glmm_loglik(&spec, &d).unwrap(), direct);
    }

    #[test]
    fn quadrature_matches_trapezoid() {
        let spec = GlmmSpec::new(vec![0.5, 0.2], 3.0, 0.7).unwrap();
        let d = one_unit(vec![2.0], vec![4]);
        let ll = glmm_loglik(&spec, &d).unwrap();
        let s = spec.sigma_b;
        let n = 64;
        let (lo, hi) = (-8.0 * s, 8.0 * s);
        let h = (hi - lo) / (n - 1) as f64;
        let f = |b: f64| {
            let dens = (-0.5 * b * b / (s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
            nbinom_logpmf_floored(4, (0.5f64 + 0.4 + b).exp(), 3.0).exp() * dens
        };
        let integral: f64 = (0..n)
            .map(|i| {
                let wt = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
                wt * f(lo + i as f64 * h)
            })
            .sum::<f64>()
            * h;
        assert!((ll - integral.ln()).abs() < 1e-6, "{ll} vs {}", integral.ln());
    }

    #[test]
    fn node_refinement_is_stable() {
        let spec = GlmmSpec::new(vec![1.0, 0.05, -0.002], 2.0, 0.5).unwrap();
        let d = simulate_glmm(&spec, &[2.0, 7.0, 12.0, 17.0, 22.0], 6, 3);
        let a = glmm_loglik_nodes(&spec, &d, 20).unwrap();
        let b = glmm_loglik_nodes(&spec, &d, 40).unwrap();
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(GlmmSpec::new(vec![1.0], 1.0, 0.1).is_err());
        assert!(GlmmSpec::new(vec![1.0, 0.0, 0.0, 0.0, 0.0], 1.0, 0.1).is_err());
        assert!(GlmmSpec::new(vec![1.0, 0.0], 0.0, 0.1).is_err());
        assert!(glmm_fit(4, &GlmmData::default(), &GlmmFitSettings::default()).is_err());
    }
}
