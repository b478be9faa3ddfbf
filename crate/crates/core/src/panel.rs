//! Panels of independent units linked by shared parameters.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{PompError, Result};
use crate::params::{spec_list, ParamSpec, ParamVector, Role, SpecList};
use crate::pfilter::{check_observations, log_mean_exp, pfilter, FilterOptions};
use crate::pomp::{Observation, PompModel};
use crate::rng::{self, tag};

/// Where a unit model's parameter comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Source {
    Shared(usize),
    Specific(usize),
}

#[derive(Clone)]
pub struct PanelUnit {
    pub id: String,
    pub model: Arc<dyn PompModel>,
    pub t0: f64,
    spec: SpecList,
    layout: Vec<Source>,
}

impl PanelUnit {
    /// Spec list of the assembled `(phi, psi_u)` vector, in model order.
    pub fn spec(&self) -> &SpecList {
        &self.spec
    }

    pub(crate) fn layout(&self) -> &[Source] {
        &self.layout
    }

    /// Fills `out` (model order) from the shared and specific blocks.
    pub(crate) fn assemble_into(&self, shared: &[f64], specific: &[f64], out: &mut [f64]) {
        for (o, src) in out.iter_mut().zip(&self.layout) {
            *o = match *src {
                Source::Shared(i) => shared[i],
                Source::Specific(i) => specific[i],
            };
        }
    }
}

impl std::fmt::Debug for PanelUnit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PanelUnit")
            .field("id", &self.id)
            .field("model", &self.model.name())
            .field("t0", &self.t0)
            .finish()
    }
}

/// Units in ascending id order, with the shared (phi) and unit-specific
/// (psi) parameter declarations.
#[derive(Clone, Debug)]
pub struct PanelPomp {
    units: Vec<PanelUnit>,
    shared_spec: SpecList,
    specific_spec: SpecList,
}

impl PanelPomp {
    /// Each unit's model must find every parameter it declares in exactly one
    /// of the two blocks. Blocks may carry names a given model ignores.
    pub fn new(
        units: Vec<(String, Arc<dyn PompModel>, f64)>,
        shared: Vec<ParamSpec>,
        specific: Vec<ParamSpec>,
    ) -> Result<Self> {
        if units.is_empty() {
            return Err(PompError::InvalidArgument("a panel needs at least one unit".into()));
        }
        let shared = shared
            .into_iter()
            .map(|s| if s.role == Role::UnitSpecific { s.with_role(Role::Shared) } else { s })
            .collect::<Vec<_>>();
        let specific = specific
            .into_iter()
            .map(|s| if s.role == Role::Shared { s.with_role(Role::UnitSpecific) } else { s })
            .collect::<Vec<_>>();
        for s in &specific {
            if shared.iter().any(|o| o.name == s.name) {
                return Err(PompError::DuplicateParameter(s.name.clone()));
            }
        }
        let shared_spec = spec_list(shared)?;
        let specific_spec = spec_list(specific)?;

        let mut built: Vec<PanelUnit> = Vec::with_capacity(units.len());
        for (id, model, t0) in units {
            if built.iter().any(|u| u.id == id) {
                return Err(PompError::InvalidArgument(format!("duplicate unit id `{id}`")));
            }
            let mut layout = Vec::new();
            let mut spec = Vec::new();
            for ms in model.param_specs() {
                let (src, s) = if let Some(i) = shared_spec.iter().position(|s| s.name == ms.name) {
                    (Source::Shared(i), shared_spec[i].clone())
                } else if let Some(i) = specific_spec.iter().position(|s| s.name == ms.name) {
                    (Source::Specific(i), specific_spec[i].clone())
                } else {
                    return Err(PompError::InvalidArgument(format!(
                        "unit `{id}`: model `{}` needs parameter `{}` which is in neither block",
                        model.name(),
                        ms.name
                    )));
                };
                layout.push(src);
                spec.push(s);
            }
            built.push(PanelUnit {
                id,
                model,
                t0,
                spec: spec.into(),
                layout,
            });
        }
        built.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(PanelPomp {
            units: built,
            shared_spec,
            specific_spec,
        })
    }

    /// Panel whose units all use `model` and whose blocks follow the roles
    /// declared in `specs` (fixed parameters go to the shared block).
    pub fn from_roles(
        unit_ids: &[String],
        model: Arc<dyn PompModel>,
        t0: f64,
        specs: Vec<ParamSpec>,
    ) -> Result<Self> {
        let (specific, shared): (Vec<_>, Vec<_>) =
            specs.into_iter().partition(|s| s.role == Role::UnitSpecific);
        Self::new(
            unit_ids.iter().map(|id| (id.clone(), model.clone(), t0)).collect(),
            shared,
            specific,
        )
    }

    pub fn units(&self) -> &[PanelUnit] {
        &self.units
    }

    pub fn unit(&self, id: &str) -> Result<&PanelUnit> {
        self.units
            .iter()
            .find(|u| u.id == id)
            .ok_or_else(|| PompError::UnknownUnit(id.to_string()))
    }

    pub fn unit_ids(&self) -> Vec<String> {
        self.units.iter().map(|u| u.id.clone()).collect()
    }

    pub fn shared_spec(&self) -> &SpecList {
        &self.shared_spec
    }

    pub fn specific_spec(&self) -> &SpecList {
        &self.specific_spec
    }

    /// Estimated parameter count: shared once, unit-specific once per unit.
    pub fn n_estimated(&self) -> usize {
        let shared = self.shared_spec.iter().filter(|s| !s.is_fixed()).count();
        let specific = self.specific_spec.iter().filter(|s| !s.is_fixed()).count();
        shared + specific * self.units.len()
    }
}

/// Observations keyed by unit id; `values` follow `labels`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PanelDataset {
    pub labels: Vec<String>,
    pub units: BTreeMap<String, Vec<Observation>>,
}

impl PanelDataset {
    pub fn new(labels: Vec<String>, units: BTreeMap<String, Vec<Observation>>) -> Result<Self> {
        for (id, obs) in &units {
            for o in obs {
                if o.values.len() != labels.len() {
                    return Err(PompError::Data(format!(
                        "unit `{id}` at t = {}: {} values for {} labels",
                        o.time,
                        o.values.len(),
                        labels.len()
                    )));
                }
            }
        }
        Ok(PanelDataset { labels, units })
    }

    pub fn n_obs(&self, unit: &str) -> usize {
        self.units.get(unit).map_or(0, Vec::len)
    }

    /// Observations of `unit` re-expressed in the order of `obs_labels`.
    /// Labels absent from the data are missing; extra data labels are
    /// dropped.
    pub fn resolve(&self, unit: &str, obs_labels: &[String]) -> Result<Vec<Observation>> {
        let obs = self
            .units
            .get(unit)
            .ok_or_else(|| PompError::UnknownUnit(unit.to_string()))?;
        let map: Vec<Option<usize>> = obs_labels
            .iter()
            .map(|l| self.labels.iter().position(|d| d == l))
            .collect();
        Ok(obs
            .iter()
            .map(|o| Observation {
                time: o.time,
                values: map.iter().map(|m| m.and_then(|i| o.values[i])).collect(),
            })
            .collect())
    }
}

/// Resolved observations for every data unit, in panel unit order.
pub(crate) fn bind_data(panel: &PanelPomp, data: &PanelDataset) -> Result<Vec<(usize, Vec<Observation>)>> {
    for id in data.units.keys() {
        panel.unit(id)?;
    }
    let mut out = Vec::new();
    for (k, u) in panel.units.iter().enumerate() {
        if data.units.contains_key(&u.id) {
            let obs = data.resolve(&u.id, u.model.obs_labels())?;
            check_observations(u.t0, &obs).map_err(|e| match e {
                PompError::Data(m) => PompError::Data(format!("unit `{}`: {m}", u.id)),
                other => other,
            })?;
            out.push((k, obs));
        }
    }
    Ok(out)
}

/// Shared block and one specific block per unit id.
#[derive(Clone, Debug, PartialEq)]
pub struct PanelParams {
    pub shared: ParamVector,
    pub specific: BTreeMap<String, ParamVector>,
}

impl PanelParams {
    pub fn new(panel: &PanelPomp, shared: ParamVector, specific: BTreeMap<String, ParamVector>) -> Result<Self> {
        let p = PanelParams { shared, specific };
        p.check(panel)?;
        Ok(p)
    }

    /// Same specific values for every unit.
    pub fn uniform(panel: &PanelPomp, shared: &[f64], specific: &[f64]) -> Result<Self> {
        let shared = ParamVector::new(panel.shared_spec.clone(), shared.to_vec())?;
        let specific = panel
            .units
            .iter()
            .map(|u| {
                ParamVector::new(panel.specific_spec.clone(), specific.to_vec()).map(|v| (u.id.clone(), v))
            })
            .collect::<Result<_>>()?;
        Ok(PanelParams { shared, specific })
    }

    /// Splits named natural-scale values into the two blocks; `specific`
    /// maps unit id to that unit's values.
    pub fn from_named(
        panel: &PanelPomp,
        shared: &BTreeMap<String, f64>,
        specific: &BTreeMap<String, BTreeMap<String, f64>>,
    ) -> Result<Self> {
        let pairs: Vec<(&str, f64)> = shared.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        let shared = ParamVector::from_pairs(panel.shared_spec.clone(), &pairs)?;
        let mut map = BTreeMap::new();
        for u in &panel.units {
            let pairs: Vec<(&str, f64)> = match specific.get(&u.id) {
                Some(v) => v.iter().map(|(k, v)| (k.as_str(), *v)).collect(),
                None if panel.specific_spec.is_empty() => Vec::new(),
                None => {
                    return Err(PompError::InvalidArgument(format!(
                        "no unit-specific values for unit `{}`",
                        u.id
                    )))
                }
            };
            map.insert(u.id.clone(), ParamVector::from_pairs(panel.specific_spec.clone(), &pairs)?);
        }
        for id in specific.keys() {
            panel.unit(id)?;
        }
        Ok(PanelParams { shared, specific: map })
    }

    fn check(&self, panel: &PanelPomp) -> Result<()> {
        if self.shared.spec().len() != panel.shared_spec.len() {
            return Err(PompError::Length {
                expected: panel.shared_spec.len(),
                got: self.shared.len(),
            });
        }
        for u in &panel.units {
            let v = self
                .specific
                .get(&u.id)
                .ok_or_else(|| PompError::InvalidArgument(format!("no unit-specific values for unit `{}`", u.id)))?;
            if v.len() != panel.specific_spec.len() {
                return Err(PompError::Length {
                    expected: panel.specific_spec.len(),
                    got: v.len(),
                });
            }
        }
        for id in self.specific.keys() {
            panel.unit(id)?;
        }
        Ok(())
    }
}

/// The `(phi, psi_u)` vector for `unit_id`, ordered as its model expects.
pub fn assemble_unit_params(panel: &PanelPomp, params: &PanelParams, unit_id: &str) -> Result<ParamVector> {
    let unit = panel.unit(unit_id)?;
    let specific = params
        .specific
        .get(unit_id)
        .ok_or_else(|| PompError::UnknownUnit(unit_id.to_string()))?;
    let mut values = vec![0.0; unit.layout.len()];
    unit.assemble_into(params.shared.values(), specific.values(), &mut values);
    ParamVector::new(unit.spec.clone(), values)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UnitLoglik {
    pub loglik: f64,
    /// Jackknife standard error over replicates; NaN with one replicate.
    pub se: f64,
    pub replicates: Vec<f64>,
    pub n_fail: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PanelLoglik {
    pub total: f64,
    pub se: f64,
    pub per_unit: BTreeMap<String, UnitLoglik>,
}

/// Per-replicate filter seed for one unit.
pub fn unit_seed(seed: u64, unit_id: &str, replicate: usize) -> u64 {
    rng::derive(seed, &[tag::REPLICATE, rng::hash_str(unit_id), replicate as u64])
}

/// Jackknife standard error of the log-mean-exp of `x`.
pub fn jackknife_se_lme(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 2 {
        return f64::NAN;
    }
    let loo: Vec<f64> = (0..n)
        .map(|i| {
            let rest: Vec<f64> = x.iter().enumerate().filter(|&(k, _)| k != i).map(|(_, &v)| v).collect();
            log_mean_exp(&rest)
        })
        .collect();
    let mean = loo.iter().sum::<f64>() / n as f64;
    let ss: f64 = loo.iter().map(|v| (v - mean).powi(2)).sum();
    ((n - 1) as f64 / n as f64 * ss).sqrt()
}

/// Panel log-likelihood: per unit, log-mean-exp over `n_reps` independent
/// filters; total summed over units in id order. Streams are keyed by unit
/// id so the result does not depend on unit order or worker count.
pub fn panel_loglik(
    panel: &PanelPomp,
    data: &PanelDataset,
    params: &PanelParams,
    particles: usize,
    n_reps: usize,
    seed: u64,
) -> Result<PanelLoglik> {
    if n_reps == 0 {
        return Err(PompError::InvalidArgument("n_reps must be at least 1".into()));
    }
    params.check(panel)?;
    let bound = bind_data(panel, data)?;
    let jobs: Vec<(usize, usize)> = (0..bound.len())
        .flat_map(|b| (0..n_reps).map(move |r| (b, r)))
        .collect();
    let options = FilterOptions::default();
    let results = jobs
        .par_iter()
        .map(|&(b, r)| {
            let (k, obs) = &bound[b];
            let unit = &panel.units[*k];
            let mut theta = vec![0.0; unit.layout.len()];
            unit.assemble_into(
                params.shared.values(),
                params.specific[&unit.id].values(),
                &mut theta,
            );
            pfilter(
                unit.model.as_ref(),
                &theta,
                unit.t0,
                obs,
                particles,
                unit_seed(seed, &unit.id, r),
                &options,
            )
            .map_err(|e| match e {
                PompError::FilterFailure { step, .. } => PompError::FilterFailure {
                    unit: unit.id.clone(),
                    step,
                },
                other => other,
            })
        })
        .collect::<Vec<_>>();

    let mut per_unit = BTreeMap::new();
    for (b, (k, _)) in bound.iter().enumerate() {
        let unit = &panel.units[*k];
        let reps = &results[b * n_reps..(b + 1) * n_reps];
        let mut lls = Vec::with_capacity(n_reps);
        let mut n_fail = 0;
        let mut first_fail = None;
        let mut all_failed = true;
        for r in reps {
            let r = r.as_ref().map_err(Clone::clone)?;
            lls.push(r.loglik);
            n_fail += r.n_fail;
            if r.n_fail == 0 {
                all_failed = false;
            } else if first_fail.is_none() {
                first_fail = r.first_fail;
            }
        }
        if all_failed {
            return Err(PompError::FilterFailure {
                unit: unit.id.clone(),
                step: first_fail.unwrap_or(0),
            });
        }
        per_unit.insert(
            unit.id.clone(),
            UnitLoglik {
                loglik: log_mean_exp(&lls),
                se: jackknife_se_lme(&lls),
                replicates: lls,
                n_fail,
            },
        );
    }
    let total = per_unit.values().map(|u| u.loglik).sum();
    let se = per_unit.values().map(|u| u.se * u.se).sum::<f64>().sqrt();
    Ok(PanelLoglik { total, se, per_unit })
}
