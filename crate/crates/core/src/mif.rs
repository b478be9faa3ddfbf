//! Panel iterated filtering (PIF), its marginalized form (MPIF) and the
//! staged multi-start search built on them.
//!
//! The parameter swarm lives on the estimation scale. Within iteration `m`
//! units are visited in ascending id order; for each unit the shared block
//! and that unit's block are perturbed with sd `sd * rho^m` before
//! initialization and before every observation, then resampled together with
//! the latent states. Blocks of other units are reindexed as well under PIF
//! and left in place under MPIF.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{PompError, Result};
use crate::panel::{bind_data, panel_loglik, PanelDataset, PanelParams, PanelPomp, Source};
use crate::params::{ParamSpec, ParamVector, Role, SpecList};
use crate::pfilter::{systematic_resample, weigh, PAR_MIN_LEN};
use crate::pomp::{Observation, PompModel};
use crate::rng::{self, tag, StreamRng};

/// Geometric cooling: perturbation sd at iteration `m` is `sd * rho^m`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CoolingSchedule {
    pub rho: f64,
}

impl CoolingSchedule {
    pub fn new(rho: f64) -> Result<Self> {
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(PompError::InvalidArgument(format!("cooling factor must lie in (0, 1], got {rho}")));
        }
        Ok(CoolingSchedule { rho })
    }

    /// Reaches 0.7 after 50 iterations.
    pub fn standard() -> Self {
        CoolingSchedule { rho: 0.7f64.powf(1.0 / 50.0) }
    }

    pub fn factor(&self, m: usize) -> f64 {
        cooling_factor(self, m)
    }
}

pub fn cooling_factor(schedule: &CoolingSchedule, m: usize) -> f64 {
    schedule.rho.powi(m as i32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MifSettings {
    pub particles: usize,
    pub iterations: usize,
    pub cooling: CoolingSchedule,
    pub marginalize: bool,
    /// Per-parameter sd overrides on the estimation scale; other estimated
    /// parameters use their spec's sd.
    pub perturbation_sd: BTreeMap<String, f64>,
    /// Added to the iteration counter when computing the cooling factor.
    pub iteration_offset: usize,
}

impl MifSettings {
    pub fn new(particles: usize, iterations: usize, marginalize: bool) -> Self {
        MifSettings {
            particles,
            iterations,
            cooling: CoolingSchedule::standard(),
            marginalize,
            perturbation_sd: BTreeMap::new(),
            iteration_offset: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.particles < 2 {
            return Err(PompError::InvalidArgument("iterated filtering needs J >= 2".into()));
        }
        if self.iterations == 0 {
            return Err(PompError::InvalidArgument("iterated filtering needs M >= 1".into()));
        }
        CoolingSchedule::new(self.cooling.rho)?;
        for (name, &sd) in &self.perturbation_sd {
            if !(sd >= 0.0 && sd.is_finite()) {
                return Err(PompError::InvalidArgument(format!("perturbation sd for `{name}` must be nonnegative")));
            }
        }
        Ok(())
    }

    fn sds(&self, spec: &SpecList) -> Result<Vec<f64>> {
        spec.iter()
            .map(|s| {
                let sd = self.perturbation_sd.get(&s.name).copied().unwrap_or(s.perturbation_sd);
                if s.is_fixed() && sd != 0.0 {
                    Err(PompError::InvalidArgument(format!(
                        "fixed parameter `{}` cannot be perturbed",
                        s.name
                    )))
                } else {
                    Ok(sd)
                }
            })
            .collect()
    }
}

/// Gaussian random-walk step on the estimation scale.
#[inline]
pub fn perturb(row: &mut [f64], sds: &[f64], factor: f64, rng: &mut StreamRng) {
    for (v, &sd) in row.iter_mut().zip(sds) {
        if sd > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            *v += sd * factor * z;
        }
    }
}

/// A swarm of J parameter vectors on the estimation scale. Blocks are stored
/// row-major with a stride of at least one so empty blocks still index.
#[derive(Clone, Debug, PartialEq)]
pub struct Swarm {
    particles: usize,
    n_shared: usize,
    n_specific: usize,
    shared: Vec<f64>,
    specific: Vec<Vec<f64>>,
}

impl Swarm {
    fn stride(n: usize) -> usize {
        n.max(1)
    }

    fn empty(panel: &PanelPomp, particles: usize) -> Self {
        let (ns, nsp) = (panel.shared_spec().len(), panel.specific_spec().len());
        Swarm {
            particles,
            n_shared: ns,
            n_specific: nsp,
            shared: vec![0.0; particles * Self::stride(ns)],
            specific: vec![vec![0.0; particles * Self::stride(nsp)]; panel.units().len()],
        }
    }

    /// `particles` copies of `params`.
    pub fn replicate(panel: &PanelPomp, params: &PanelParams, particles: usize) -> Result<Self> {
        Self::from_params(panel, &vec![params.clone(); particles])
    }

    pub fn from_params(panel: &PanelPomp, members: &[PanelParams]) -> Result<Self> {
        if members.is_empty() {
            return Err(PompError::InvalidArgument("empty parameter swarm".into()));
        }
        let mut sw = Self::empty(panel, members.len());
        for (j, p) in members.iter().enumerate() {
            let est = p.shared.to_estimation_scale()?.values;
            if est.len() != sw.n_shared {
                return Err(PompError::Length { expected: sw.n_shared, got: est.len() });
            }
            sw.shared_row_mut(j).copy_from_slice(&est);
            for (b, u) in panel.units().iter().enumerate() {
                let v = p
                    .specific
                    .get(&u.id)
                    .ok_or_else(|| PompError::InvalidArgument(format!("no unit-specific values for unit `{}`", u.id)))?;
                let est = v.to_estimation_scale()?.values;
                if est.len() != sw.n_specific {
                    return Err(PompError::Length { expected: sw.n_specific, got: est.len() });
                }
                sw.specific_row_mut(b, j).copy_from_slice(&est);
            }
        }
        Ok(sw)
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn shared_row(&self, j: usize) -> &[f64] {
        let s = Self::stride(self.n_shared);
        &self.shared[j * s..j * s + self.n_shared]
    }

    pub fn shared_row_mut(&mut self, j: usize) -> &mut [f64] {
        let s = Self::stride(self.n_shared);
        &mut self.shared[j * s..j * s + self.n_shared]
    }

    /// Unit block of particle `j`; `unit` indexes [`PanelPomp::units`].
    pub fn specific_row(&self, unit: usize, j: usize) -> &[f64] {
        let s = Self::stride(self.n_specific);
        &self.specific[unit][j * s..j * s + self.n_specific]
    }

    pub fn specific_row_mut(&mut self, unit: usize, j: usize) -> &mut [f64] {
        let s = Self::stride(self.n_specific);
        &mut self.specific[unit][j * s..j * s + self.n_specific]
    }

    /// Natural-scale parameters of particle `j`.
    pub fn member(&self, panel: &PanelPomp, j: usize) -> Result<PanelParams> {
        let shared = ParamVector::from_estimation_scale(self.shared_row(j), panel.shared_spec().clone())?;
        let specific = panel
            .units()
            .iter()
            .enumerate()
            .map(|(b, u)| {
                ParamVector::from_estimation_scale(self.specific_row(b, j), panel.specific_spec().clone())
                    .map(|v| (u.id.clone(), v))
            })
            .collect::<Result<_>>()?;
        Ok(PanelParams { shared, specific })
    }

    fn column_stats(&self, block: Option<usize>, n: usize) -> (Vec<f64>, Vec<f64>) {
        let jn = self.particles as f64;
        let row = |j| match block {
            None => self.shared_row(j),
            Some(b) => self.specific_row(b, j),
        };
        let mut mean = vec![0.0; n];
        for j in 0..self.particles {
            for (m, v) in mean.iter_mut().zip(row(j)) {
                *m += v / jn;
            }
        }
        let mut var = vec![0.0; n];
        for j in 0..self.particles {
            for ((s, v), m) in var.iter_mut().zip(row(j)).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let denom = (self.particles.max(2) - 1) as f64;
        (mean, var.into_iter().map(|s| (s / denom).sqrt()).collect())
    }

    /// Swarm mean on the estimation scale, mapped back to natural values.
    pub fn mean(&self, panel: &PanelPomp) -> Result<PanelParams> {
        let (shared, _) = self.column_stats(None, self.n_shared);
        let shared = ParamVector::from_estimation_scale(&shared, panel.shared_spec().clone())?;
        let specific = panel
            .units()
            .iter()
            .enumerate()
            .map(|(b, u)| {
                let (m, _) = self.column_stats(Some(b), self.n_specific);
                ParamVector::from_estimation_scale(&m, panel.specific_spec().clone()).map(|v| (u.id.clone(), v))
            })
            .collect::<Result<_>>()?;
        Ok(PanelParams { shared, specific })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationSummary {
    pub iteration: usize,
    /// Sum over units of the perturbed filter's log-likelihood.
    pub loglik: f64,
    pub n_fail: usize,
    pub shared_mean: Vec<f64>,
    pub shared_sd: Vec<f64>,
    pub specific_mean: BTreeMap<String, Vec<f64>>,
    pub specific_sd: BTreeMap<String, Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchRecord {
    pub trace: Vec<IterationSummary>,
    pub final_swarm: Swarm,
}

impl SearchRecord {
    pub fn final_mean(&self, panel: &PanelPomp) -> Result<PanelParams> {
        self.final_swarm.mean(panel)
    }
}

/// Result of filtering one unit inside an iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitPass {
    pub loglik: f64,
    pub n_fail: usize,
    /// `ancestry[j]` is the particle at entry whose lineage particle `j`
    /// continues at exit.
    pub ancestry: Vec<usize>,
}

struct Kernel {
    shared_sd: Vec<f64>,
    specific_sd: Vec<f64>,
}

/// Filters one unit with the perturbed swarm, updating it in place. `unit`
/// indexes [`PanelPomp::units`]; `m` sets the cooling factor.
#[allow(clippy::too_many_arguments)]
pub fn filter_unit(
    panel: &PanelPomp,
    unit: usize,
    observations: &[Observation],
    swarm: &mut Swarm,
    settings: &MifSettings,
    m: usize,
    seed: u64,
) -> Result<UnitPass> {
    let kernel = Kernel {
        shared_sd: settings.sds(panel.shared_spec())?,
        specific_sd: settings.sds(panel.specific_spec())?,
    };
    filter_unit_with(panel, unit, observations, swarm, &kernel, settings, m, seed)
}

#[allow(clippy::too_many_arguments)]
fn filter_unit_with(
    panel: &PanelPomp,
    b: usize,
    observations: &[Observation],
    swarm: &mut Swarm,
    kernel: &Kernel,
    settings: &MifSettings,
    m: usize,
    seed: u64,
) -> Result<UnitPass> {
    let unit = &panel.units()[b];
    let model = unit.model.as_ref();
    let layout = unit.layout();
    let shared_spec = panel.shared_spec();
    let specific_spec = panel.specific_spec();
    let jn = swarm.particles;
    let dim = model.state_dim();
    let d = layout.len();
    let (ss, sp) = (Swarm::stride(swarm.n_shared), Swarm::stride(swarm.n_specific));
    let (ns, nsp) = (swarm.n_shared, swarm.n_specific);
    let factor = settings.cooling.factor(m + settings.iteration_offset);
    let unit_key = rng::hash_str(&unit.id);

    let natural = |phi: &[f64], psi: &[f64], th: &mut [f64]| {
        for (t, src) in th.iter_mut().zip(layout) {
            *t = match *src {
                Source::Shared(i) => shared_spec[i].transform.inverse(phi[i]),
                Source::Specific(i) => specific_spec[i].transform.inverse(psi[i]),
            };
        }
    };

    let mut theta = vec![0.0; jn * d.max(1)];
    let dstride = d.max(1);
    let mut states = vec![0.0; jn * dim.max(1)];
    let xstride = dim.max(1);

    // initialization with the n = 0 perturbation
    {
        let (shared, specific) = (&mut swarm.shared, &mut swarm.specific[b]);
        states
            .par_chunks_mut(xstride)
            .zip(shared.par_chunks_mut(ss))
            .zip(specific.par_chunks_mut(sp))
            .zip(theta.par_chunks_mut(dstride))
            .enumerate()
            .with_min_len(PAR_MIN_LEN)
            .for_each(|(j, (((x, phi), psi), th))| {
                let mut r = rng::stream(seed, &[tag::INIT, m as u64, unit_key, j as u64]);
                perturb(&mut phi[..ns], &kernel.shared_sd, factor, &mut r);
                perturb(&mut psi[..nsp], &kernel.specific_sd, factor, &mut r);
                natural(&phi[..ns], &psi[..nsp], &mut th[..d]);
                let x0 = model.rinit(&th[..d], unit.t0, &mut r);
                x[..dim].copy_from_slice(&x0);
            });
    }

    let mut ancestry: Vec<usize> = (0..jn).collect();
    let mut loglik = 0.0;
    let mut n_fail = 0;
    let mut first_fail = None;
    let mut t_prev = unit.t0;
    let mut scratch = Vec::new();

    for (n, obs) in observations.iter().enumerate() {
        let step = n as u64 + 1;
        let log_w: Vec<f64> = {
            let (shared, specific) = (&mut swarm.shared, &mut swarm.specific[b]);
            states
                .par_chunks_mut(xstride)
                .zip(shared.par_chunks_mut(ss))
                .zip(specific.par_chunks_mut(sp))
                .zip(theta.par_chunks_mut(dstride))
                .enumerate()
                .with_min_len(PAR_MIN_LEN)
                .map(|(j, (((x, phi), psi), th))| {
                    let mut r = rng::stream(seed, &[tag::PROPAGATE, m as u64, unit_key, step, j as u64]);
                    perturb(&mut phi[..ns], &kernel.shared_sd, factor, &mut r);
                    perturb(&mut psi[..nsp], &kernel.specific_sd, factor, &mut r);
                    natural(&phi[..ns], &psi[..nsp], &mut th[..d]);
                    model.rprocess(&mut x[..dim], &th[..d], t_prev, obs.time, &mut r)?;
                    Ok(model.dmeasure(obs, &x[..dim], &th[..d]))
                })
                .collect::<Result<_>>()?
        };
        t_prev = obs.time;
        let w = weigh(&log_w);
        loglik += w.cond_loglik;
        if w.failed {
            n_fail += 1;
            first_fail.get_or_insert(n);
            continue;
        }
        let mut r = rng::stream(seed, &[tag::RESAMPLE, m as u64, unit_key, step]);
        let idx = systematic_resample(&w.weights, &mut r)?;
        reindex(&mut states, xstride, &idx, &mut scratch);
        reindex(&mut swarm.shared, ss, &idx, &mut scratch);
        if settings.marginalize {
            reindex(&mut swarm.specific[b], sp, &idx, &mut scratch);
        } else {
            for block in swarm.specific.iter_mut() {
                reindex(block, sp, &idx, &mut scratch);
            }
        }
        ancestry = idx.iter().map(|&k| ancestry[k]).collect();
    }

    if n_fail == observations.len() {
        return Err(PompError::SearchCollapse {
            iteration: m,
            unit: unit.id.clone(),
            step: first_fail.unwrap_or(0),
        });
    }
    Ok(UnitPass { loglik, n_fail, ancestry })
}

fn reindex(buf: &mut Vec<f64>, stride: usize, idx: &[usize], scratch: &mut Vec<f64>) {
    scratch.clear();
    scratch.reserve(buf.len());
    for &k in idx {
        scratch.extend_from_slice(&buf[k * stride..(k + 1) * stride]);
    }
    std::mem::swap(buf, scratch);
}

/// Runs `settings.iterations` iterations of PIF (or MPIF when
/// `settings.marginalize`) from `start`.
pub fn pif_run(
    panel: &PanelPomp,
    data: &PanelDataset,
    start: Swarm,
    settings: &MifSettings,
    seed: u64,
) -> Result<SearchRecord> {
    settings.validate()?;
    if start.particles != settings.particles {
        return Err(PompError::Length {
            expected: settings.particles,
            got: start.particles,
        });
    }
    if start.n_shared != panel.shared_spec().len()
        || start.n_specific != panel.specific_spec().len()
        || start.specific.len() != panel.units().len()
    {
        return Err(PompError::InvalidArgument("swarm does not match the panel layout".into()));
    }
    let bound = bind_data(panel, data)?;
    let kernel = Kernel {
        shared_sd: settings.sds(panel.shared_spec())?,
        specific_sd: settings.sds(panel.specific_spec())?,
    };
    let mut swarm = start;
    let mut trace = Vec::with_capacity(settings.iterations);
    for m in 1..=settings.iterations {
        let mut loglik = 0.0;
        let mut n_fail = 0;
        for (b, obs) in &bound {
            let pass = filter_unit_with(panel, *b, obs, &mut swarm, &kernel, settings, m, seed)?;
            loglik += pass.loglik;
            n_fail += pass.n_fail;
        }
        let (shared_mean, shared_sd) = swarm.column_stats(None, swarm.n_shared);
        let mut specific_mean = BTreeMap::new();
        let mut specific_sd = BTreeMap::new();
        if swarm.n_specific > 0 {
            for (b, u) in panel.units().iter().enumerate() {
                let (mean, sd) = swarm.column_stats(Some(b), swarm.n_specific);
                specific_mean.insert(u.id.clone(), mean);
                specific_sd.insert(u.id.clone(), sd);
            }
        }
        log::debug!("iteration {m}: loglik {loglik:.3}, failures {n_fail}");
        trace.push(IterationSummary {
            iteration: m,
            loglik,
            n_fail,
            shared_mean,
            shared_sd,
            specific_mean,
            specific_sd,
        });
    }
    Ok(SearchRecord { trace, final_swarm: swarm })
}

/// Single-unit iterated filtering: every estimated parameter is shared.
pub fn mif2_single(
    model: Arc<dyn PompModel>,
    t0: f64,
    observations: Vec<Observation>,
    start: &[f64],
    settings: &MifSettings,
    seed: u64,
) -> Result<(PanelPomp, SearchRecord)> {
    let specs: Vec<ParamSpec> = model
        .param_specs()
        .into_iter()
        .map(|s| if s.role == Role::UnitSpecific { s.with_role(Role::Shared) } else { s })
        .collect();
    let panel = PanelPomp::new(vec![("unit".into(), model.clone(), t0)], specs, Vec::new())?;
    let labels = model.obs_labels().to_vec();
    let mut units = BTreeMap::new();
    units.insert("unit".to_string(), observations);
    let data = PanelDataset::new(labels, units)?;
    let params = PanelParams::uniform(&panel, start, &[])?;
    let swarm = Swarm::replicate(&panel, &params, settings.particles)?;
    let rec = pif_run(&panel, &data, swarm, settings, seed)?;
    Ok((panel, rec))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Candidate {
    pub stage: usize,
    pub search: usize,
    pub shared: BTreeMap<String, f64>,
    pub specific: BTreeMap<String, BTreeMap<String, f64>>,
    pub loglik: f64,
    pub se: f64,
}

impl Candidate {
    fn from_params(stage: usize, search: usize, p: &PanelParams, loglik: f64, se: f64) -> Self {
        Candidate {
            stage,
            search,
            shared: p.shared.iter().map(|(k, v)| (k.to_string(), v)).collect(),
            specific: p
                .specific
                .iter()
                .map(|(u, v)| (u.clone(), v.iter().map(|(k, x)| (k.to_string(), x)).collect()))
                .collect(),
            loglik,
            se,
        }
    }

    pub fn params(&self, panel: &PanelPomp) -> Result<PanelParams> {
        PanelParams::from_named(panel, &self.shared, &self.specific)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageRecord {
    pub stage: usize,
    pub iterations: usize,
    /// One per search, in search order.
    pub candidates: Vec<Candidate>,
    /// Search indices kept for the next stage, best first.
    pub selected: Vec<usize>,
    /// Per-iteration swarm summaries, one trace per search.
    pub traces: Vec<Vec<IterationSummary>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StagedSearchResult {
    pub stages: Vec<StageRecord>,
    pub best: Candidate,
}

/// Candidate evaluation uses this many filter replicates.
pub const EVAL_REPLICATES: usize = 5;

/// Multi-start search in stages. After each stage the final swarm mean of
/// every search is evaluated with [`panel_loglik`]; the top
/// `selection_fraction` of candidates, replicated back to K, start the next
/// stage.
pub fn staged_search(
    panel: &PanelPomp,
    data: &PanelDataset,
    initial: &[PanelParams],
    stages: &[MifSettings],
    selection_fraction: f64,
    seed: u64,
) -> Result<StagedSearchResult> {
    let k = initial.len();
    if k < 4 {
        return Err(PompError::InvalidArgument(format!("staged search needs at least 4 starts, got {k}")));
    }
    if !(selection_fraction > 0.0 && selection_fraction <= 1.0) {
        return Err(PompError::InvalidArgument(format!(
            "selection fraction must lie in (0, 1], got {selection_fraction}"
        )));
    }
    if stages.is_empty() {
        return Err(PompError::InvalidArgument("no stages given".into()));
    }
    let keep = ((selection_fraction * k as f64).ceil() as usize).clamp(1, k);
    let mut starts: Vec<PanelParams> = initial.to_vec();
    let mut records = Vec::with_capacity(stages.len());
    for (s, settings) in stages.iter().enumerate() {
        let runs: Vec<(Candidate, Vec<IterationSummary>)> = starts
            .par_iter()
            .enumerate()
            .map(|(i, start)| {
                let swarm = Swarm::replicate(panel, start, settings.particles)?;
                let run_seed = rng::derive(seed, &[tag::SEARCH, s as u64, i as u64]);
                let rec = pif_run(panel, data, swarm, settings, run_seed)?;
                let mean = rec.final_mean(panel)?;
                let eval_seed = rng::derive(seed, &[tag::EVAL, s as u64, i as u64]);
                let ll = panel_loglik(panel, data, &mean, settings.particles, EVAL_REPLICATES, eval_seed)?;
                log::info!("stage {s} search {i}: loglik {:.3} (se {:.3})", ll.total, ll.se);
                Ok((Candidate::from_params(s, i, &mean, ll.total, ll.se), rec.trace))
            })
            .collect::<Result<_>>()?;
        let (candidates, traces): (Vec<Candidate>, Vec<_>) = runs.into_iter().unzip();
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| {
            candidates[b]
                .loglik
                .partial_cmp(&candidates[a].loglik)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let selected: Vec<usize> = order[..keep].to_vec();
        starts = (0..k)
            .map(|i| candidates[selected[i % keep]].params(panel))
            .collect::<Result<_>>()?;
        records.push(StageRecord {
            stage: s,
            iterations: settings.iterations,
            candidates,
            selected,
            traces,
        });
    }
    let last = records.last().expect("at least one stage");
    let best = last.candidates[last.selected[0]].clone();
    Ok(StagedSearchResult { stages: records, best })
}

/// K starting points drawn uniformly on the estimation scale within each
/// estimated parameter's bounds; parameters without bounds keep `base`.
pub fn draw_starts(panel: &PanelPomp, base: &PanelParams, k: usize, seed: u64) -> Result<Vec<PanelParams>> {
    use rand::Rng;
    let draw = |spec: &SpecList, v: &ParamVector, r: &mut StreamRng| -> Result<ParamVector> {
        let vals = spec
            .iter()
            .zip(v.values())
            .map(|(s, &x)| match s.bounds {
                Some((lo, hi)) if !s.is_fixed() => {
                    let (a, b) = (s.transform.forward(lo), s.transform.forward(hi));
                    s.transform.inverse(a + (b - a) * r.random::<f64>())
                }
                _ => x,
            })
            .collect();
        ParamVector::new(spec.clone(), vals)
    };
    (0..k)
        .map(|i| {
            let mut r = rng::stream(seed, &[tag::SEARCH, u64::MAX, i as u64]);
            let shared = draw(panel.shared_spec(), &base.shared, &mut r)?;
            let specific = panel
                .units()
                .iter()
                .map(|u| {
                    let v = base
                        .specific
                        .get(&u.id)
                        .ok_or_else(|| PompError::UnknownUnit(u.id.clone()))?;
                    draw(panel.specific_spec(), v, &mut r).map(|v| (u.id.clone(), v))
                })
                .collect::<Result<_>>()?;
            Ok(PanelParams { shared, specific })
        })
        .collect()
}
