//! Bootstrap particle filter for a single unit.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{PompError, Result};
use crate::pomp::{Observation, PompModel, StepStats};
use crate::rng::{self, tag};

/// Natural-scale weight below which a particle counts as impossible.
pub const WEIGHT_FLOOR: f64 = 1e-300;

pub(crate) const PAR_MIN_LEN: usize = 64;

#[derive(Clone, Debug)]
pub struct FilterOptions {
    /// Floor and continue on a step where every weight is below
    /// [`WEIGHT_FLOOR`]; otherwise abort.
    pub allow_fail: bool,
    pub save_filter_mean: bool,
    /// Also compute per-label conditional log-likelihoods against the
    /// pre-resampling particle cloud.
    pub label_decomposition: bool,
}

impl Default for FilterOptions {
    fn default() -> Self {
        FilterOptions {
            allow_fail: true,
            save_filter_mean: false,
            label_decomposition: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterResult {
    pub loglik: f64,
    pub cond_logliks: Vec<f64>,
    pub ess_trace: Vec<f64>,
    pub filter_mean_trace: Option<Vec<Vec<f64>>>,
    /// `[n][label]`; `None` where the label was not observed.
    pub label_cond_logliks: Option<Vec<Vec<Option<f64>>>>,
    pub n_fail: usize,
    /// Index of the first failed step, if any.
    pub first_fail: Option<usize>,
    pub clamps: u64,
}

/// Outcome of weighting one observation.
#[derive(Clone, Debug)]
pub(crate) struct Weighting {
    pub cond_loglik: f64,
    pub weights: Vec<f64>,
    pub failed: bool,
}

pub(crate) fn weigh(log_weights: &[f64]) -> Weighting {
    let j = log_weights.len();
    let max = log_weights
        .iter()
        .copied()
        .filter(|x| !x.is_nan())
        .fold(f64::NEG_INFINITY, f64::max);
    if !(max >= WEIGHT_FLOOR.ln()) {
        return Weighting {
            cond_loglik: WEIGHT_FLOOR.ln(),
            weights: vec![1.0 / j as f64; j],
            failed: true,
        };
    }
    let mut weights: Vec<f64> = log_weights
        .iter()
        .map(|&lw| if lw.is_nan() { 0.0 } else { (lw - max).exp() })
        .collect();
    let sum: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= sum);
    Weighting {
        cond_loglik: max + (sum / j as f64).ln(),
        weights,
        failed: false,
    }
}

/// `ln(mean(exp(x)))`, stable for widely spread inputs.
pub fn log_mean_exp(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NEG_INFINITY;
    }
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let s: f64 = x.iter().map(|&v| (v - max).exp()).sum();
    max + (s / x.len() as f64).ln()
}

pub fn effective_sample_size(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// Systematic resampling with an explicit offset `u` in `[0, 1)`.
///
/// Offspring counts satisfy `floor(J w_i) <= N_i <= ceil(J w_i)` and the
/// returned ancestor indices are ascending. Weights are renormalized.
pub fn systematic_resample_with_offset(weights: &[f64], u: f64) -> Result<Vec<usize>> {
    let j = weights.len();
    if j == 0 {
        return Err(PompError::InvalidArgument("no weights to resample".into()));
    }
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(PompError::InvalidArgument(
            "weights must be finite and nonnegative".into(),
        ));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(PompError::InvalidArgument("all weights are zero".into()));
    }
    let mut cum = Vec::with_capacity(j);
    let mut acc = 0.0;
    for &w in weights {
        acc += w / total;
        cum.push(acc);
    }
    let mut out = Vec::with_capacity(j);
    let mut i = 0;
    let jf = j as f64;
    // slack absorbs summation error so exact ties such as 0.2 * 3 = 0.6 fall
    // into the next interval
    let slack = jf * f64::EPSILON;
    for k in 0..j {
        let pos = (u + k as f64) / jf;
        while i < j - 1 && cum[i] <= pos + slack {
            i += 1;
        }
        out.push(i);
    }
    Ok(out)
}

pub fn systematic_resample<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Result<Vec<usize>> {
    let u: f64 = rng.random();
    systematic_resample_with_offset(weights, u)
}

pub(crate) fn check_observations(t0: f64, observations: &[Observation]) -> Result<()> {
    if observations.is_empty() {
        return Err(PompError::InvalidArgument("no observations to filter".into()));
    }
    let mut prev = t0;
    for (n, o) in observations.iter().enumerate() {
        if !(o.time > prev) {
            return Err(PompError::Data(format!(
                "observation {n} at t = {} does not follow t = {prev}",
                o.time
            )));
        }
        prev = o.time;
    }
    Ok(())
}

/// Runs a bootstrap particle filter over `observations` (resolved against
/// `model.obs_labels()`), starting from `rinit` at `t0`.
///
/// Particles are propagated with streams keyed by `(seed, step, particle)`,
/// so the result does not depend on the number of worker threads.
pub fn pfilter(
    model: &dyn PompModel,
    params: &[f64],
    t0: f64,
    observations: &[Observation],
    particles: usize,
    seed: u64,
    options: &FilterOptions,
) -> Result<FilterResult> {
    if particles == 0 {
        return Err(PompError::InvalidArgument("need at least one particle".into()));
    }
    check_observations(t0, observations)?;
    let dim = model.state_dim();
    let n_labels = model.obs_labels().len();

    let mut states: Vec<f64> = (0..particles)
        .into_par_iter()
        .with_min_len(PAR_MIN_LEN)
        .flat_map_iter(|j| {
            let mut r = rng::stream(seed, &[tag::INIT, j as u64]);
            model.rinit(params, t0, &mut r)
        })
        .collect();
    let mut scratch = vec![0.0; states.len()];

    let mut cond_logliks = Vec::with_capacity(observations.len());
    let mut ess_trace = Vec::with_capacity(observations.len());
    let mut means = options.save_filter_mean.then(Vec::new);
    let mut label_trace = options.label_decomposition.then(Vec::new);
    let mut n_fail = 0;
    let mut first_fail = None;
    let mut stats = StepStats::default();
    let mut t_prev = t0;

    for (n, obs) in observations.iter().enumerate() {
        let step = n as u64;
        let step_stats = states
            .par_chunks_mut(dim)
            .with_min_len(PAR_MIN_LEN)
            .enumerate()
            .map(|(j, x)| {
                let mut r = rng::stream(seed, &[tag::PROPAGATE, step, j as u64]);
                model.rprocess(x, params, t_prev, obs.time, &mut r)
            })
            .try_reduce(StepStats::default, |mut a, b| {
                a += b;
                Ok(a)
            })?;
        stats += step_stats;
        t_prev = obs.time;

        let log_w: Vec<f64> = states
            .par_chunks(dim)
            .with_min_len(PAR_MIN_LEN)
            .map(|x| model.dmeasure(obs, x, params))
            .collect();
        let w = weigh(&log_w);
        if w.failed {
            if !options.allow_fail {
                return Err(PompError::FilterFailure {
                    unit: String::new(),
                    step: n,
                });
            }
            n_fail += 1;
            first_fail.get_or_insert(n);
        }
        cond_logliks.push(w.cond_loglik);
        ess_trace.push(effective_sample_size(&w.weights));

        if let Some(m) = means.as_mut() {
            let mut mean = vec![0.0; dim];
            for (x, &wj) in states.chunks(dim).zip(&w.weights) {
                for (acc, &xi) in mean.iter_mut().zip(x) {
                    *acc += wj * xi;
                }
            }
            m.push(mean);
        }
        if let Some(lt) = label_trace.as_mut() {
            let row = (0..n_labels)
                .map(|l| {
                    obs.values[l].map(|_| {
                        let lw: Vec<f64> = states
                            .chunks(dim)
                            .map(|x| model.dmeasure_label(l, obs, x, params))
                            .collect();
                        log_mean_exp(&lw)
                    })
                })
                .collect();
            lt.push(row);
        }

        if !w.failed {
            let mut r = rng::stream(seed, &[tag::RESAMPLE, step]);
            let idx = systematic_resample(&w.weights, &mut r)?;
            for (dst, &k) in scratch.chunks_mut(dim).zip(&idx) {
                dst.copy_from_slice(&states[k * dim..(k + 1) * dim]);
            }
            std::mem::swap(&mut states, &mut scratch);
        }
    }

    let loglik = cond_logliks.iter().sum();
    Ok(FilterResult {
        loglik,
        cond_logliks,
        ess_trace,
        filter_mean_trace: means,
        label_cond_logliks: label_trace,
        n_fail,
        first_fail,
        clamps: stats.clamps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn uniform_weights_select_each_once() {
        let w = vec![0.2; 5];
        for &u in &[0.0, 0.3, 0.999] {
            assert_eq!(systematic_resample_with_offset(&w, u).unwrap(), vec![0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn half_half_example() {
        let w = [0.5, 0.5, 0.0, 0.0];
        for &u in &[0.0, 0.5, 0.99] {
            assert_eq!(systematic_resample_with_offset(&w, u).unwrap(), vec![0, 0, 1, 1]);
        }
    }

    #[test]
    fn all_zero_rejected() {
        assert!(systematic_resample_with_offset(&[0.0, 0.0], 0.1).is_err());
        assert!(systematic_resample_with_offset(&[], 0.1).is_err());
    }

    #[test]
    fn residual_bound_on_random_weights() {
        let mut r = rand_xoshiro::Xoshiro256PlusPlus::seed_from_u64(3);
        for _ in 0..500 {
            let j = r.random_range(1..60);
            let raw: Vec<f64> = (0..j).map(|_| r.random::<f64>().powi(3)).collect();
            let s: f64 = raw.iter().sum();
            let w: Vec<f64> = raw.iter().map(|x| x / s).collect();
            let idx = systematic_resample(&w, &mut r).unwrap();
            assert!(idx.windows(2).all(|p| p[0] <= p[1]));
            let mut counts = vec![0usize; j];
            idx.iter().for_each(|&i| counts[i] += 1);
            for (c, wi) in counts.iter().zip(&w) {
                let expect = j as f64 * wi;
                assert!((*c as f64 - expect).abs() <= 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn unbiased_offspring_counts() {
        let mut r = rand_xoshiro::Xoshiro256PlusPlus::seed_from_u64(5);
        let w = [0.05, 0.31, 0.0, 0.17, 0.47];
        let trials = 100_000;
        let mut totals = [0usize; 5];
        for _ in 0..trials {
            for i in systematic_resample(&w, &mut r).unwrap() {
                totals[i] += 1;
            }
        }
        for (t, wi) in totals.iter().zip(&w) {
            let mean = *t as f64 / trials as f64;
            let expect = 5.0 * wi;
            if expect == 0.0 {
                assert_eq!(*t, 0);
            } else {
                assert!((mean - expect).abs() / expect < 0.01, "{mean} vs {expect}");
            }
        }
    }

    #[test]
    fn ess_examples() {
        assert!((effective_sample_size(&vec![1.0 / 500.0; 500]) - 500.0).abs() < 1e-9);
        assert_eq!(effective_sample_size(&[0.0, 1.0, 0.0]), 1.0);
        assert!((effective_sample_size(&[0.5, 0.25, 0.25]) - 8.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn weigh_flags_failure() {
        let w = weigh(&[f64::NEG_INFINITY, -800.0]);
        assert!(w.failed);
        assert_eq!(w.cond_loglik, WEIGHT_FLOOR.ln());
        let ok = weigh(&[0.0, (3.0f64).ln()]);
        assert!(!ok.failed);
        assert!((ok.cond_loglik - 2.0f64.ln()).abs() < 1e-15);
        assert!((ok.weights[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn log_mean_exp_bounds() {
        let x = [-3.0, -1.0, -2.5];
        let l = log_mean_exp(&x);
        assert!((-3.0..=-1.0).contains(&l));
        assert!(l >= x.iter().sum::<f64>() / 3.0);
        assert_eq!(log_mean_exp(&[-2.0]), -2.0);
    }
}
