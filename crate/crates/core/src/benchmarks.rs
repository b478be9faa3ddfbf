//! Model comparison: AIC tables, scoring of externally supplied mean
//! trajectories, and observation-level conditional log-likelihood anomalies.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{PompError, Result};
use crate::nbinom::nbinom_logpmf_floored;
use crate::panel::{assemble_unit_params, bind_data, unit_seed, PanelDataset, PanelParams, PanelPomp};
use crate::pfilter::{pfilter, FilterOptions, FilterResult};

/// `2k - 2 loglik`.
pub fn aic(n_params: usize, loglik: f64) -> f64 {
    2.0 * n_params as f64 - 2.0 * loglik
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AicRow {
    pub model: String,
    pub n_params: usize,
    pub loglik: f64,
    pub aic: f64,
}

impl AicRow {
    pub fn new(model: impl Into<String>, n_params: usize, loglik: f64) -> Self {
        AicRow {
            model: model.into(),
            n_params,
            loglik,
            aic: aic(n_params, loglik),
        }
    }
}

/// Rows sorted by ascending AIC; ties broken by model name.
pub fn aic_table(mut rows: Vec<AicRow>) -> Vec<AicRow> {
    for r in &rows {
        assert_eq!(r.aic, aic(r.n_params, r.loglik), "row `{}` carries an inconsistent AIC", r.model);
    }
    rows.sort_by(|a, b| a.aic.total_cmp(&b.aic).then_with(|| a.model.cmp(&b.model)));
    rows
}

/// Predicted mean for one observed count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub unit: String,
    pub time: f64,
    pub label: String,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExternalScore {
    pub best_tau: f64,
    pub loglik: f64,
    /// `(tau, loglik)` for every grid value.
    pub profile: Vec<(f64, f64)>,
}

/// Negative binomial log-likelihood of `data` around `predictions` for each
/// dispersion in `tau_grid`; reports the best grid value.
pub fn score_external_predictions(
    predictions: &[Prediction],
    data: &PanelDataset,
    tau_grid: &[f64],
) -> Result<ExternalScore> {
    if tau_grid.is_empty() || tau_grid.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
        return Err(PompError::InvalidArgument("tau grid must be non-empty, finite and positive".into()));
    }
    let lookup: HashMap<(&str, u64, &str), f64> = predictions
        .iter()
        .map(|p| ((p.unit.as_str(), p.time.to_bits(), p.label.as_str()), p.mean))
        .collect();
    let mut pairs = Vec::new();
    let mut gaps = Vec::new();
    for (unit, obs) in &data.units {
        for o in obs {
            for (label, v) in data.labels.iter().zip(&o.values) {
                let Some(y) = v else { continue };
                if !(*y >= 0.0 && y.fract() == 0.0) {
                    return Err(PompError::Data(format!("unit `{unit}` at t = {}: `{label}` = {y} is not a count", o.time)));
                }
                match lookup.get(&(unit.as_str(), o.time.to_bits(), label.as_str())) {
                    Some(&mu) => pairs.push((*y as u64, mu)),
                    None => gaps.push(format!("({unit}, {}, {label})", o.time)),
                }
            }
        }
    }
    if !gaps.is_empty() {
        return Err(PompError::Data(format!("no prediction for {} observation(s): {}", gaps.len(), gaps.join(", "))));
    }
    let profile: Vec<(f64, f64)> = tau_grid
        .iter()
        .map(|&tau| (tau, pairs.iter().map(|&(y, mu)| nbinom_logpmf_floored(y, mu, tau)).sum()))
        .collect();
    let &(best_tau, loglik) = profile
        .iter()
        .fold(&profile[0], |best, p| if p.1 > best.1 { p } else { best });
    Ok(ExternalScore {
        best_tau,
        loglik,
        profile,
    })
}

/// Filter output for every unit of a panel, with the observation times and
/// labels it was computed against.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterRun {
    pub labels: Vec<String>,
    pub units: BTreeMap<String, (Vec<f64>, FilterResult)>,
}

impl FilterRun {
    pub fn loglik(&self) -> f64 {
        self.units.values().map(|(_, r)| r.loglik).sum()
    }
}

/// One filter pass per unit with per-label decomposition switched on.
pub fn filter_run(
    panel: &PanelPomp,
    data: &PanelDataset,
    params: &PanelParams,
    particles: usize,
    seed: u64,
) -> Result<FilterRun> {
    let bound = bind_data(panel, data)?;
    let options = FilterOptions {
        label_decomposition: true,
        ..FilterOptions::default()
    };
    let labels = panel.units()[0].model.obs_labels().to_vec();
    let mut units = BTreeMap::new();
    for (idx, obs) in bound {
        let unit = &panel.units()[idx];
        if unit.model.obs_labels() != labels.as_slice() {
            return Err(PompError::InvalidArgument("units report different observation labels".into()));
        }
        let p = assemble_unit_params(panel, params, &unit.id)?;
        let res = pfilter(unit.model.as_ref(), p.values(), unit.t0, &obs, particles, unit_seed(seed, &unit.id, 0), &options)
            .map_err(|e| match e {
                PompError::FilterFailure { step, .. } => PompError::FilterFailure { unit: unit.id.clone(), step },
                other => other,
            })?;
        units.insert(unit.id.clone(), (obs.iter().map(|o| o.time).collect(), res));
    }
    Ok(FilterRun { labels, units })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnomalyRow {
    pub unit: String,
    pub time: f64,
    /// `None` for the joint conditional log-likelihood of the observation.
    pub label: Option<String>,
    pub a: f64,
    pub b: f64,
    pub diff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnomalyTable {
    pub rows: Vec<AnomalyRow>,
    /// Joint anomalies summed over time.
    pub per_unit: BTreeMap<String, f64>,
    /// Label anomalies summed over units and times.
    pub per_label: BTreeMap<String, f64>,
    /// Sum of joint anomalies.
    pub total: f64,
}

/// Conditional log-likelihood differences `a - b` per observation, and per
/// label where both runs carry the label decomposition.
pub fn conditional_loglik_compare(run_a: &FilterRun, run_b: &FilterRun) -> Result<AnomalyTable> {
    let mismatch = |what: String| PompError::InvalidArgument(format!("runs cover different observations: {what}"));
    if run_a.labels != run_b.labels {
        return Err(mismatch("labels differ".into()));
    }
    let ua: Vec<&String> = run_a.units.keys().collect();
    let ub: Vec<&String> = run_b.units.keys().collect();
    if ua != ub {
        return Err(mismatch(format!("units {ua:?} vs {ub:?}")));
    }
    let mut rows = Vec::new();
    let mut per_unit = BTreeMap::new();
    let mut per_label: BTreeMap<String, f64> = BTreeMap::new();
    let mut total = 0.0;
    for (unit, (ta, ra)) in &run_a.units {
        let (tb, rb) = &run_b.units[unit];
        if ta != tb {
            return Err(mismatch(format!("unit `{unit}` has different observation times")));
        }
        let mut unit_sum = 0.0;
        for (n, &time) in ta.iter().enumerate() {
            let (a, b) = (ra.cond_logliks[n], rb.cond_logliks[n]);
            rows.push(AnomalyRow {
                unit: unit.clone(),
                time,
                label: None,
                a,
                b,
                diff: a - b,
            });
            unit_sum += a - b;
            if let (Some(la), Some(lb)) = (&ra.label_cond_logliks, &rb.label_cond_logliks) {
                for (l, name) in run_a.labels.iter().enumerate() {
                    match (la[n][l], lb[n][l]) {
                        (Some(a), Some(b)) => {
                            rows.push(AnomalyRow {
                                unit: unit.clone(),
                                time,
                                label: Some(name.clone()),
                                a,
                                b,
                                diff: a - b,
                            });
                            *per_label.entry(name.clone()).or_default() += a - b;
                        }
                        (None, None) => {}
                        _ => return Err(mismatch(format!("unit `{unit}` at t = {time}: `{name}` observed in one run only"))),
                    }
                }
            }
        }
        total += unit_sum;
        per_unit.insert(unit.clone(), unit_sum);
    }
    Ok(AnomalyTable {
        rows,
        per_unit,
        per_label,
        total,
    })
}
