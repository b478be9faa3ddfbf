mod common;

use std::sync::Arc;

use panelpomp::models::linear_gaussian::LinearGaussian;
use panelpomp::panel::{panel_loglik, PanelDataset, PanelParams, PanelPomp};
use panelpomp::pfilter::{pfilter, FilterOptions};
use panelpomp::pomp::Observation;
use proptest::prelude::*;

use common::*;

fn observations(data: &PanelDataset, unit: &str) -> Vec<Observation> {
    data.resolve(unit, &["y".to_string()]).unwrap()
}

#[test]
fn matches_kalman_across_parameters() {
    for (k, &(mu, phi, sigma, tau)) in [(0.0, 0.8, 1.0, 1.0), (2.0, 0.3, 0.5, 2.0), (-1.0, 0.95, 0.3, 0.5)]
        .iter()
        .enumerate()
    {
        let data = lg_data(&[mu], phi, sigma, tau, 40, 100 + k as u64);
        let exact = kalman_loglik(&series(&data, "u0"), mu, phi, sigma, tau);
        let panel = lg_panel(1);
        let p = PanelParams::uniform(&panel, &[phi, sigma, tau], &[mu]).unwrap();
        let est = panel_loglik(&panel, &data, &p, 1000, 10, 7).unwrap();
        assert!(
            (est.total - exact).abs() <= 3.0 * est.se.max(0.01),
            "{k}: {} +- {} vs {exact}",
            est.total,
            est.se
        );
    }
}

#[test]
fn noise_free_process_is_exact_with_one_particle() {
    let data = lg_data(&[0.5], 0.8, 1.0, 1.0, 30, 3);
    let obs = observations(&data, "u0");
    let exact = kalman_loglik(&series(&data, "u0"), 0.5, 0.8, 0.0, 1.0);
    let r = pfilter(&LinearGaussian::new(), &[0.5, 0.8, 0.0, 1.0], 0.0, &obs, 1, 9, &FilterOptions::default()).unwrap();
    assert!((r.loglik - exact).abs() < 1e-9);
}

#[test]
fn loglik_spread_shrinks_with_particles() {
    let data = lg_data(&[0.0], 0.8, 1.0, 1.0, 50, 5);
    let obs = observations(&data, "u0");
    let model = LinearGaussian::new();
    let variance = |j: usize| {
        let ll: Vec<f64> = (0..50)
            .map(|s| pfilter(&model, &[0.0, 0.8, 1.0, 1.0], 0.0, &obs, j, s, &FilterOptions::default()).unwrap().loglik)
            .collect();
        let m = ll.iter().sum::<f64>() / ll.len() as f64;
        ll.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (ll.len() - 1) as f64
    };
    let v: Vec<f64> = [25, 100, 400].iter().map(|&j| variance(j)).collect();
    assert!(v[0] > v[1] && v[1] > v[2], "{v:?}");
}

#[test]
fn result_independent_of_worker_count() {
    let data = lg_data(&[0.0], 0.8, 1.0, 1.0, 30, 8);
    let obs = observations(&data, "u0");
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let opts = FilterOptions {
                save_filter_mean: true,
                label_decomposition: true,
                ..FilterOptions::default()
            };
            pfilter(&LinearGaussian::new(), &[0.0, 0.8, 1.0, 1.0], 0.0, &obs, 700, 4, &opts).unwrap()
        })
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn impossible_observation_is_a_counted_failure() {
    let mut data = lg_data(&[0.0], 0.8, 1.0, 0.05, 10, 12);
    data.units.get_mut("u0").unwrap()[4].values[0] = Some(1e6);
    let obs = observations(&data, "u0");
    let model = LinearGaussian::new();
    let p = [0.0, 0.8, 1.0, 0.05];
    let r = pfilter(&model, &p, 0.0, &obs, 100, 1, &FilterOptions::default()).unwrap();
    assert_eq!(r.n_fail, 1);
    assert_eq!(r.first_fail, Some(4));
    assert_eq!(r.cond_logliks[4], 1e-300f64.ln());
    let strict = FilterOptions {
        allow_fail: false,
        ..FilterOptions::default()
    };
    assert!(pfilter(&model, &p, 0.0, &obs, 100, 1, &strict).is_err());
}

#[test]
fn unit_order_does_not_matter() {
    let data = lg_data(&[0.0, 1.0, -1.0], 0.8, 1.0, 1.0, 20, 13);
    let model = Arc::new(LinearGaussian::new());
    let build = |order: &[usize]| {
        let ids = unit_ids(3);
        let units = order.iter().map(|&i| (ids[i].clone(), model.clone() as Arc<_>, 0.0)).collect();
        let base = lg_panel(1);
        PanelPomp::new(units, base.shared_spec().to_vec(), base.specific_spec().to_vec()).unwrap()
    };
    let a = build(&[0, 1, 2]);
    let b = build(&[2, 0, 1]);
    let pa = PanelParams::uniform(&a, &[0.8, 1.0, 1.0], &[0.0]).unwrap();
    let pb = PanelParams::uniform(&b, &[0.8, 1.0, 1.0], &[0.0]).unwrap();
    assert_eq!(
        panel_loglik(&a, &data, &pa, 200, 3, 21).unwrap(),
        panel_loglik(&b, &data, &pb, 200, 3, 21).unwrap()
    );
}

#[test]
fn replicates_approach_the_exact_value() {
    let data = lg_data(&[0.0, 0.5], 0.8, 1.0, 1.0, 50, 17);
    let exact: f64 = unit_ids(2)
        .iter()
        .zip([0.0, 0.5])
        .map(|(u, mu)| kalman_loglik(&series(&data, u), mu, 0.8, 1.0, 1.0))
        .sum();
    let panel = lg_panel(2);
    let mut p = PanelParams::uniform(&panel, &[0.8, 1.0, 1.0], &[0.0]).unwrap();
    p.specific.get_mut("u1").unwrap().set("mu", 0.5).unwrap();
    let mean_abs_err = |reps: usize| {
        (0..8u64)
            .map(|s| (panel_loglik(&panel, &data, &p, 20, reps, s).unwrap().total - exact).abs())
            .sum::<f64>()
            / 8.0
    };
    let e: Vec<f64> = [1, 10, 100].iter().map(|&n| mean_abs_err(n)).collect();
    assert!(e[0] > e[1] && e[1] > e[2], "{e:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn total_is_sum_of_conditionals(seed in any::<u64>(), j in 1usize..300) {
        let data = lg_data(&[0.0], 0.8, 1.0, 1.0, 15, 2);
        let obs = observations(&data, "u0");
        let r = pfilter(&LinearGaussian::new(), &[0.0, 0.8, 1.0, 1.0], 0.0, &obs, j, seed, &FilterOptions::default()).unwrap();
        prop_assert_eq!(r.loglik, r.cond_logliks.iter().sum::<f64>());
        prop_assert!(r.ess_trace.iter().all(|&e| e >= 1.0 - 1e-9 && e <= j as f64 + 1e-9));
    }
}
