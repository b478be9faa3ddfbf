//! Profile likelihood designs, Monte Carlo adjusted profiles (MCAP) and
//! poor man's profiles of composite parameters.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{PompError, Result};
use crate::mif::{draw_starts, pif_run, MifSettings, Swarm, EVAL_REPLICATES};
use crate::panel::{panel_loglik, PanelDataset, PanelParams, PanelPomp};
use crate::params::{ParamSpec, ParamVector, Role};
use crate::rng::{self, tag};

/// One profile evaluation. `params` holds every natural-scale value, with
/// unit-specific entries keyed `name[unit]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub focal: f64,
    pub loglik: f64,
    pub replicate: usize,
    pub params: BTreeMap<String, f64>,
}

pub fn flatten_params(p: &PanelParams) -> BTreeMap<String, f64> {
    let mut out: BTreeMap<String, f64> = p.shared.iter().map(|(k, v)| (k.to_string(), v)).collect();
    for (unit, v) in &p.specific {
        for (k, x) in v.iter() {
            out.insert(format!("{k}[{unit}]"), x);
        }
    }
    out
}

/// Half the `confidence` quantile of chi-squared with one degree of freedom.
pub fn half_chisq1(confidence: f64) -> f64 {
    let z = Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(0.5 * (1.0 + confidence));
    0.5 * z * z
}

#[derive(Clone, Debug)]
pub struct ProfileTask {
    pub focal_value: f64,
    pub replicate: usize,
    pub start: PanelParams,
}

/// A panel with the focal parameter pinned and the searches to run on it.
#[derive(Clone, Debug)]
pub struct ProfileDesign {
    pub focal: String,
    pub panel: PanelPomp,
    pub tasks: Vec<ProfileTask>,
}

fn pin(spec: &[ParamSpec], focal: &str) -> Vec<ParamSpec> {
    spec.iter()
        .map(|s| if s.name == focal { s.clone().with_role(Role::Fixed) } else { s.clone() })
        .collect()
}

/// For each grid value, `n_starts` starting points (other estimated
/// parameters drawn within their bounds) on a copy of `panel` where `focal`
/// is fixed at that value.
pub fn profile_design(
    panel: &PanelPomp,
    base: &PanelParams,
    focal: &str,
    grid: &[f64],
    n_starts: usize,
    seed: u64,
) -> Result<ProfileDesign> {
    if grid.len() < 5 {
        return Err(PompError::InvalidArgument(format!("profile grid needs at least 5 values, got {}", grid.len())));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(PompError::InvalidArgument("profile grid must be strictly increasing".into()));
    }
    if n_starts == 0 {
        return Err(PompError::InvalidArgument("n_starts must be positive".into()));
    }
    let in_shared = panel.shared_spec().iter().any(|s| s.name == focal);
    let in_specific = panel.specific_spec().iter().any(|s| s.name == focal);
    if !in_shared && !in_specific {
        return Err(PompError::UnknownParameter(focal.to_string()));
    }
    let units = panel
        .units()
        .iter()
        .map(|u| (u.id.clone(), u.model.clone(), u.t0))
        .collect();
    let pinned = PanelPomp::new(units, pin(panel.shared_spec(), focal), pin(panel.specific_spec(), focal))?;
    let rebind = |v: &ParamVector, spec| ParamVector::new(spec, v.values().to_vec());
    let base = PanelParams {
        shared: rebind(&base.shared, pinned.shared_spec().clone())?,
        specific: base
            .specific
            .iter()
            .map(|(u, v)| rebind(v, pinned.specific_spec().clone()).map(|v| (u.clone(), v)))
            .collect::<Result<_>>()?,
    };
    let mut tasks = Vec::with_capacity(grid.len() * n_starts);
    for (g, &value) in grid.iter().enumerate() {
        let starts = draw_starts(&pinned, &base, n_starts, rng::derive(seed, &[tag::SEARCH, g as u64]))?;
        for (replicate, mut start) in starts.into_iter().enumerate() {
            if in_shared {
                start.shared.set(focal, value)?;
            } else {
                for v in start.specific.values_mut() {
                    v.set(focal, value)?;
                }
            }
            tasks.push(ProfileTask {
                focal_value: value,
                replicate,
                start,
            });
        }
    }
    Ok(ProfileDesign {
        focal: focal.to_string(),
        panel: pinned,
        tasks,
    })
}

/// Runs one task: the stages in sequence, each restarting from the previous
/// swarm mean, then evaluates the final mean.
pub fn run_profile_task(
    design: &ProfileDesign,
    task: &ProfileTask,
    data: &PanelDataset,
    stages: &[MifSettings],
    seed: u64,
) -> Result<ProfilePoint> {
    let key = rng::derive(seed, &[task.focal_value.to_bits(), task.replicate as u64]);
    let mut current = task.start.clone();
    let mut particles = 2;
    for (s, settings) in stages.iter().enumerate() {
        let swarm = Swarm::replicate(&design.panel, &current, settings.particles)?;
        let rec = pif_run(&design.panel, data, swarm, settings, rng::derive(key, &[tag::SEARCH, s as u64]))?;
        current = rec.final_mean(&design.panel)?;
        particles = settings.particles;
    }
    let ll = panel_loglik(&design.panel, data, &current, particles, EVAL_REPLICATES, rng::derive(key, &[tag::EVAL]))?;
    Ok(ProfilePoint {
        focal: task.focal_value,
        loglik: ll.total,
        replicate: task.replicate,
        params: flatten_params(&current),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct McapResult {
    pub grid: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub mle: f64,
    pub ci: (f64, f64),
    /// The interval reaches the lower or upper end of the profiled range.
    pub open_lower: bool,
    pub open_upper: bool,
    pub se_mc: f64,
    pub se_stat: f64,
    pub cutoff: f64,
}

pub const MCAP_GRID: usize = 1000;

fn tricube(u: f64) -> f64 {
    if u >= 1.0 {
        0.0
    } else {
        (1.0 - u * u * u).powi(3)
    }
}

/// Weighted least squares; returns coefficients, their covariance and the
/// residual variance. `None` when the design is rank deficient.
fn wls(x: &DMatrix<f64>, y: &DVector<f64>, w: &[f64]) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let p = x.ncols();
    let mut xtwx = DMatrix::<f64>::zeros(p, p);
    let mut xtwy = DVector::<f64>::zeros(p);
    for i in 0..x.nrows() {
        if w[i] == 0.0 {
            continue;
        }
        for a in 0..p {
            xtwy[a] += w[i] * x[(i, a)] * y[i];
            for b in 0..p {
                xtwx[(a, b)] += w[i] * x[(i, a)] * x[(i, b)];
            }
        }
    }
    let inv = xtwx.try_inverse()?;
    let beta = &inv * xtwy;
    let n_used = w.iter().filter(|&&v| v > 0.0).count();
    let rss: f64 = (0..x.nrows())
        .map(|i| {
            let fit: f64 = (0..p).map(|a| x[(i, a)] * beta[a]).sum();
            w[i] * (y[i] - fit).powi(2)
        })
        .sum();
    let sigma2 = if n_used > p { rss / (n_used - p) as f64 } else { 0.0 };
    Some((beta, inv * sigma2))
}

/// Local quadratic regression with tricube weights over the nearest
/// `span` fraction of points, evaluated at `at`.
pub fn loess_quadratic(x: &[f64], y: &[f64], span: f64, at: f64) -> f64 {
    let n = x.len();
    let q = ((span * n as f64).floor() as usize).clamp(3.min(n), n);
    let mut d: Vec<f64> = x.iter().map(|xi| (xi - at).abs()).collect();
    let mut sorted = d.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut h = sorted[q - 1];
    if span > 1.0 {
        h *= span;
    }
    if h <= 0.0 {
        h = f64::MIN_POSITIVE;
    }
    let w: Vec<f64> = d.iter_mut().map(|di| tricube(*di / (h * (1.0 + 1e-10)))).collect();
    let xm = DMatrix::from_fn(n, 3, |i, j| (x[i] - at).powi(j as i32));
    let ym = DVector::from_column_slice(y);
    match wls(&xm, &ym, &w) {
        Some((beta, _)) => beta[0],
        None => {
            // fall back to a local linear fit, then a weighted mean
            let xl = DMatrix::from_fn(n, 2, |i, j| (x[i] - at).powi(j as i32));
            match wls(&xl, &ym, &w) {
                Some((beta, _)) => beta[0],
                None => {
                    let sw: f64 = w.iter().sum();
                    w.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / sw
                }
            }
        }
    }
}

/// Monte Carlo adjusted profile: smooth the profile, fit a weighted
/// quadratic near the smoothed maximum, and widen the likelihood-ratio
/// cutoff by the Monte Carlo variance implied by that fit.
///
/// Replicates at the same focal value are reduced to their maximum first.
pub fn mcap(points: &[ProfilePoint], span: f64, confidence: f64) -> Result<McapResult> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(PompError::InvalidArgument(format!("confidence must lie in (0, 1), got {confidence}")));
    }
    if !(span > 0.0) {
        return Err(PompError::InvalidArgument(format!("span must be positive, got {span}")));
    }
    let mut best: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
    for p in points {
        if !p.loglik.is_finite() || !p.focal.is_finite() {
            return Err(PompError::Numerical(format!(
                "profile point at {} has log-likelihood {}",
                p.focal, p.loglik
            )));
        }
        let key = if p.focal == 0.0 { 0.0f64.to_bits() } else { p.focal.to_bits() };
        let e = best.entry(key).or_insert((p.focal, f64::NEG_INFINITY));
        e.1 = e.1.max(p.loglik);
    }
    let mut pts: Vec<(f64, f64)> = best.into_values().collect();
    pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    if pts.len() < 5 {
        return Err(PompError::InvalidArgument(format!(
            "mcap needs at least 5 distinct focal values, got {}",
            pts.len()
        )));
    }
    let x: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let y: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let (lo, hi) = (x[0], x[x.len() - 1]);
    let grid: Vec<f64> = (0..MCAP_GRID)
        .map(|i| lo + (hi - lo) * i as f64 / (MCAP_GRID - 1) as f64)
        .collect();
    let smoothed: Vec<f64> = grid.iter().map(|&g| loess_quadratic(&x, &y, span, g)).collect();
    let (imax, smax) = smoothed
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
    let arg = grid[imax];

    // weighted quadratic in the neighbourhood of the smoothed maximum
    let n = x.len();
    let dist: Vec<f64> = x.iter().map(|xi| (xi - arg).abs()).collect();
    let mut sorted = dist.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let cut = sorted[((span * n as f64).floor() as usize).clamp(1, n) - 1];
    let included: Vec<bool> = dist.iter().map(|&d| d < cut).collect();
    let maxdist = dist
        .iter()
        .zip(&included)
        .filter(|(_, &inc)| inc)
        .map(|(d, _)| *d)
        .fold(0.0, f64::max);
    let w: Vec<f64> = dist
        .iter()
        .zip(&included)
        .map(|(&d, &inc)| if inc && maxdist > 0.0 { (1.0 - (d / maxdist).powi(3)).powi(3) } else { 0.0 })
        .collect();
    let xm = DMatrix::from_fn(n, 3, |i, j| match j {
        0 => 1.0,
        1 => -x[i] * x[i],
        _ => x[i],
    });
    let ym = DVector::from_column_slice(&y);
    let (mut se_mc, mut se_stat) = (0.0, f64::INFINITY);
    if let Some((beta, cov)) = wls(&xm, &ym, &w) {
        let (a, b) = (beta[1], beta[2]);
        // curvature lost in rounding (linear or flat profiles) counts as none
        let range = hi - lo;
        let yscale = y.iter().map(|v| (v - smax).abs()).fold(1.0, f64::max);
        if a.is_finite() && a * range * range > 1e-9 * yscale {
            let (var_a, var_b, cov_ab) = (cov[(1, 1)], cov[(2, 2)], cov[(1, 2)]);
            let mc2 = (var_b - (2.0 * b / a) * cov_ab + (b * b / (a * a)) * var_a) / (4.0 * a * a);
            se_mc = mc2.max(0.0).sqrt();
            se_stat = (1.0 / (2.0 * a)).sqrt();
        }
    }
    let ratio = if se_stat.is_finite() { (se_mc / se_stat).powi(2) } else { 0.0 };
    let cutoff = half_chisq1(confidence) * (1.0 + ratio);
    let inside: Vec<usize> = (0..MCAP_GRID).filter(|&i| smax - smoothed[i] < cutoff).collect();
    let (ilo, ihi) = (inside[0], inside[inside.len() - 1]);
    Ok(McapResult {
        ci: (grid[ilo], grid[ihi]),
        open_lower: ilo == 0,
        open_upper: ihi == MCAP_GRID - 1,
        mle: arg,
        grid,
        smoothed,
        se_mc,
        se_stat,
        cutoff,
    })
}

/// Product or quotient of named parameters and constants, such as
/// `p_n*f_n` or `r_n*f_n/theta_j_n`.
#[derive(Clone, Debug, PartialEq)]
pub struct Composite {
    pub expr: String,
    factors: Vec<(Factor, bool)>,
}

#[derive(Clone, Debug, PartialEq)]
enum Factor {
    Name(String),
    Const(f64),
}

impl Composite {
    pub fn parse(expr: &str) -> Result<Self> {
        let mut factors = Vec::new();
        let mut divide = false;
        let mut token = String::new();
        let push = |token: &mut String, divide: bool, factors: &mut Vec<(Factor, bool)>| -> Result<()> {
            let t = token.trim();
            if t.is_empty() {
                return Err(PompError::InvalidArgument(format!("malformed composite `{expr}`")));
            }
            let f = match t.parse::<f64>() {
                Ok(c) => Factor::Const(c),
                Err(_) => {
                    if !t.chars().all(|c| c.is_alphanumeric() || "_[]".contains(c)) {
                        return Err(PompError::InvalidArgument(format!("bad name `{t}` in composite `{expr}`")));
                    }
                    Factor::Name(t.to_string())
                }
            };
            factors.push((f, divide));
            token.clear();
            Ok(())
        };
        for c in expr.chars() {
            match c {
                '*' | '/' => {
                    push(&mut token, divide, &mut factors)?;
                    divide = c == '/';
                }
                _ => token.push(c),
            }
        }
        push(&mut token, divide, &mut factors)?;
        Ok(Composite {
            expr: expr.to_string(),
            factors,
        })
    }

    pub fn names(&self) -> Vec<&str> {
        self.factors
            .iter()
            .filter_map(|(f, _)| match f {
                Factor::Name(n) => Some(n.as_str()),
                Factor::Const(_) => None,
            })
            .collect()
    }

    pub fn eval(&self, params: &BTreeMap<String, f64>) -> Result<f64> {
        let mut acc = 1.0;
        for (f, divide) in &self.factors {
            let v = match f {
                Factor::Const(c) => *c,
                Factor::Name(n) => *params
                    .get(n)
                    .ok_or_else(|| PompError::UnknownParameter(n.clone()))?,
            };
            if *divide {
                acc /= v;
            } else {
                acc *= v;
            }
        }
        Ok(acc)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PoorMansProfile {
    pub points: Vec<ProfilePoint>,
    /// Grid values whose bins received no point.
    pub empty_bins: Vec<f64>,
}

/// Bins every point by its composite value (nearest grid value, bin edges
/// at midpoints, the outer bins as wide as their inner halves) and keeps the
/// highest log-likelihood per bin. Points outside the outer edges are
/// ignored.
pub fn poor_mans_profile(points: &[ProfilePoint], composite: &Composite, grid: &[f64]) -> Result<PoorMansProfile> {
    if grid.len() < 2 || grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(PompError::InvalidArgument("composite grid must be strictly increasing with 2+ values".into()));
    }
    let g = grid.len();
    let lower = grid[0] - 0.5 * (grid[1] - grid[0]);
    let upper = grid[g - 1] + 0.5 * (grid[g - 1] - grid[g - 2]);
    let mut bins: Vec<Option<ProfilePoint>> = vec![None; g];
    for p in points {
        let v = composite.eval(&p.params)?;
        if !(v >= lower && v <= upper) {
            continue;
        }
        let k = grid.partition_point(|&c| c < v);
        let k = if k == 0 {
            0
        } else if k == g || (v - grid[k - 1]) <= (grid[k] - v) {
            k - 1
        } else {
            k
        };
        let replace = bins[k].as_ref().is_none_or(|b| p.loglik > b.loglik);
        if replace {
            bins[k] = Some(ProfilePoint {
                focal: grid[k],
                ..p.clone()
            });
        }
    }
    let empty_bins: Vec<f64> = grid
        .iter()
        .zip(&bins)
        .filter(|(_, b)| b.is_none())
        .map(|(g, _)| *g)
        .collect();
    if !empty_bins.is_empty() {
        log::warn!("composite `{}`: no points near {:?}", composite.expr, empty_bins);
    }
    Ok(PoorMansProfile {
        points: bins.into_iter().flatten().collect(),
        empty_bins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(focal: f64, loglik: f64) -> ProfilePoint {
        let mut params = BTreeMap::new();
        params.insert("x".to_string(), focal);
        ProfilePoint {
            focal,
            loglik,
            replicate: 0,
            params,
        }
    }

    fn quadratic(n: usize) -> Vec<ProfilePoint> {
        (0..n)
            .map(|i| {
                let x = 4.0 * i as f64 / (n - 1) as f64;
                point(x, -5.0 * (x - 2.0).powi(2))
            })
            .collect()
    }

    #[test]
    fn cutoff_constant() {
        assert!((half_chisq1(0.95) - 1.920729).abs() < 1e-6);
    }

    #[test]
    fn exact_quadratic() {
        let r = mcap(&quadratic(41), 0.75, 0.95).unwrap();
        assert!((r.mle - 2.0).abs() < 0.01);
        let half = (1.920729f64 / 5.0).sqrt();
        assert!((r.ci.0 - (2.0 - half)).abs() < 0.02, "{:?}", r.ci);
        assert!((r.ci.1 - (2.0 + half)).abs() < 0.02, "{:?}", r.ci);
        assert!((r.cutoff - half_chisq1(0.95)).abs() < 1e-6);
        assert!(!r.open_lower && !r.open_upper);
    }

    #[test]
    fn flat_profile_is_uninformative() {
        let pts: Vec<ProfilePoint> = (0..12).map(|i| point(i as f64, -10.0)).collect();
        let r = mcap(&pts, 0.75, 0.95).unwrap();
        assert_eq!(r.ci, (0.0, 11.0));
        assert!(r.open_lower && r.open_upper);
        assert!(r.cutoff >= 1.92);
    }

    #[test]
    fn monotone_profile_is_one_sided() {
        let pts: Vec<ProfilePoint> = (0..15).map(|i| point(i as f64, 2.0 * i as f64)).collect();
        let r = mcap(&pts, 0.75, 0.95).unwrap();
        assert!(r.open_upper && !r.open_lower);
        assert_eq!(r.se_mc, 0.0);
        assert!(r.ci.0 > 13.0);
    }

    #[test]
    fn replicates_reduce_to_max() {
        let mut pts = quadratic(21);
        let extra: Vec<ProfilePoint> = pts.iter().map(|p| ProfilePoint { loglik: p.loglik - 3.0, replicate: 1, ..p.clone() }).collect();
        pts.extend(extra);
        let a = mcap(&pts, 0.75, 0.95).unwrap();
        let b = mcap(&quadratic(21), 0.75, 0.95).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn composite_parsing() {
        let c = Composite::parse("p_n*f_n/theta_i_n").unwrap();
        assert_eq!(c.names(), vec!["p_n", "f_n", "theta_i_n"]);
        let mut m = BTreeMap::new();
        m.insert("p_n".to_string(), 2.0);
        m.insert("f_n".to_string(), 3.0);
        m.insert("theta_i_n".to_string(), 4.0);
        assert_eq!(c.eval(&m).unwrap(), 1.5);
        assert_eq!(Composite::parse("2*p_n").unwrap().eval(&m).unwrap(), 4.0);
        assert!(Composite::parse("p_n**f_n").is_err());
        assert!(Composite::parse("p_n+f_n").is_err());
        assert!(Composite::parse("q").unwrap().eval(&m).is_err());
    }

    #[test]
    fn poor_mans_identity_and_max() {
        let pts = quadratic(11);
        let grid: Vec<f64> = pts.iter().map(|p| p.focal).collect();
        let id = Composite::parse("x").unwrap();
        let out = poor_mans_profile(&pts, &id, &grid).unwrap();
        assert_eq!(out.points, pts);
        assert!(out.empty_bins.is_empty());

        let two = vec![point(1.01, -3.0), point(0.99, -1.0), point(3.0, -2.0)];
        let out = poor_mans_profile(&two, &id, &[0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(out.points.len(), 2);
        assert_eq!(out.points[0].loglik, -1.0);
        assert_eq!(out.points[0].focal, 1.0);
        assert_eq!(out.empty_bins, vec![0.0, 2.0]);
        let global = two.iter().map(|p| p.loglik).fold(f64::NEG_INFINITY, f64::max);
        assert!(out.points.iter().all(|p| p.loglik <= global));
    }
}
