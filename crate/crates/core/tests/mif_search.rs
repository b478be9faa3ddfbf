mod common;

use std::sync::Arc;

use panelpomp::mif::{draw_starts, mif2_single, pif_run, staged_search, MifSettings, Swarm};
use panelpomp::models::linear_gaussian::LinearGaussian;
use panelpomp::panel::{panel_loglik, PanelParams, PanelPomp};
use panelpomp::params::{ParamSpec, Role, Transform};
use panelpomp::profile::{mcap, profile_design, run_profile_task};

use common::*;

fn bounded_panel(n: usize) -> PanelPomp {
    let specs = vec![
        ParamSpec::estimated("mu", Transform::Identity)
            .with_role(Role::UnitSpecific)
            .with_bounds(-2.0, 2.0),
        ParamSpec::fixed("phi", Transform::Identity),
        ParamSpec::fixed("sigma", Transform::Log),
        ParamSpec::estimated("tau", Transform::Log).with_bounds(0.3, 3.0),
    ];
    PanelPomp::from_roles(&unit_ids(n), Arc::new(LinearGaussian::new()), 0.0, specs).unwrap()
}

#[test]
fn pif_is_reproducible_and_thread_independent() {
    let panel = lg_panel(3);
    let data = lg_data(&[0.0, 0.5, -0.5], 0.5, 0.3, 1.0, 20, 1);
    let start = PanelParams::uniform(&panel, &[0.5, 0.3, 1.5], &[0.2]).unwrap();
    for marginalize in [false, true] {
        let settings = MifSettings::new(100, 5, marginalize);
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let swarm = Swarm::replicate(&panel, &start, 100).unwrap();
                pif_run(&panel, &data, swarm, &settings, 42).unwrap()
            })
        };
        let a = run(1);
        assert_eq!(a, run(1));
        assert_eq!(a, run(4));
    }
}

#[test]
fn one_unit_pif_and_mpif_agree() {
    let panel = lg_panel(1);
    let data = lg_data(&[0.3], 0.5, 0.3, 1.0, 25, 2);
    let start = PanelParams::uniform(&panel, &[0.5, 0.3, 1.2], &[0.0]).unwrap();
    let run = |marg| {
        let swarm = Swarm::replicate(&panel, &start, 80).unwrap();
        pif_run(&panel, &data, swarm, &MifSettings::new(80, 4, marg), 5).unwrap()
    };
    assert_eq!(run(false), run(true));
}

#[test]
fn zero_perturbation_leaves_parameters_fixed() {
    let data = lg_data(&[0.0], 0.8, 1.0, 1.0, 20, 3);
    let mut settings = MifSettings::new(50, 3, false);
    for name in ["mu", "phi", "sigma", "tau"] {
        settings.perturbation_sd.insert(name.into(), 0.0);
    }
    let start = [0.4, 0.8, 1.0, 1.3];
    let obs = data.resolve("u0", &["y".to_string()]).unwrap();
    let (panel, rec) = mif2_single(Arc::new(LinearGaussian::new()), 0.0, obs, &start, &settings, 7).unwrap();
    let mean = rec.final_mean(&panel).unwrap();
    for (v, s) in mean.shared.values().iter().zip(start) {
        assert!((v - s).abs() < 1e-12);
    }
    assert!(rec.trace.iter().all(|it| it.shared_sd.iter().all(|&s| s < 1e-12)));
}

#[test]
fn pif_climbs_toward_higher_likelihood() {
    let panel = lg_panel(2);
    let data = lg_data(&[0.0, 1.0], 0.5, 0.3, 1.0, 50, 4);
    let start = PanelParams::uniform(&panel, &[0.5, 0.3, 2.5], &[-1.0]).unwrap();
    let swarm = Swarm::replicate(&panel, &start, 200).unwrap();
    let mut settings = MifSettings::new(200, 40, false);
    settings.perturbation_sd.insert("tau".into(), 0.05);
    settings.perturbation_sd.insert("mu".into(), 0.05);
    let rec = pif_run(&panel, &data, swarm, &settings, 9).unwrap();
    let before = panel_loglik(&panel, &data, &start, 500, 5, 1).unwrap().total;
    let after = panel_loglik(&panel, &data, &rec.final_mean(&panel).unwrap(), 500, 5, 1).unwrap().total;
    assert!(after > before + 5.0, "{before} -> {after}");
}

#[test]
fn staged_search_is_deterministic_and_ranked() {
    let panel = bounded_panel(2);
    let data = lg_data(&[0.0, 1.0], 0.5, 0.3, 1.0, 30, 5);
    let base = PanelParams::uniform(&panel, &[0.5, 0.3, 1.0], &[0.0]).unwrap();
    let starts = draw_starts(&panel, &base, 4, 11).unwrap();
    assert!(starts.iter().all(|p| {
        let tau = p.shared.get("tau").unwrap();
        (0.3..=3.0).contains(&tau) && p.shared.get("phi") == Some(0.5)
    }));
    let stages = [MifSettings::new(60, 5, false), MifSettings::new(60, 5, false)];
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| staged_search(&panel, &data, &starts, &stages, 0.5, 3).unwrap())
    };
    let res = run(1);
    assert_eq!(res, run(3));
    assert_eq!(res.stages.len(), 2);
    for st in &res.stages {
        assert_eq!(st.candidates.len(), 4);
        assert_eq!(st.selected.len(), 2);
        let ll: Vec<f64> = st.selected.iter().map(|&i| st.candidates[i].loglik).collect();
        assert!(ll[0] >= ll[1]);
        assert!(st.candidates.iter().all(|c| c.loglik <= ll[0]));
    }
    let last = res.stages.last().unwrap();
    assert_eq!(res.best, last.candidates[last.selected[0]]);
    assert!(staged_search(&panel, &data, &starts[..3], &stages, 0.5, 3).is_err());
}

#[test]
fn profile_pins_focal_and_brackets_truth() {
    let panel = bounded_panel(2);
    let data = lg_data(&[0.0, 1.0], 0.5, 0.3, 1.0, 60, 6);
    let base = PanelParams::uniform(&panel, &[0.5, 0.3, 1.0], &[0.5]).unwrap();
    let grid: Vec<f64> = (0..9).map(|i| 0.6 + 0.1 * i as f64).collect();
    let design = profile_design(&panel, &base, "tau", &grid, 2, 8).unwrap();
    assert_eq!(design.tasks.len(), 18);
    assert!(design.panel.shared_spec().iter().any(|s| s.name == "tau" && s.is_fixed()));
    let mut settings = MifSettings::new(100, 15, false);
    settings.perturbation_sd.insert("mu".into(), 0.05);
    let points: Vec<_> = design
        .tasks
        .iter()
        .map(|t| run_profile_task(&design, t, &data, std::slice::from_ref(&settings), 2).unwrap())
        .collect();
    for (p, t) in points.iter().zip(&design.tasks) {
        assert!((p.params["tau"] - t.focal_value).abs() < 1e-12);
    }
    let res = mcap(&points, 0.75, 0.95).unwrap();
    assert!(res.ci.0 < 1.0 && 1.0 < res.ci.1, "{:?}", res.ci);
    assert!(profile_design(&panel, &base, "nope", &grid, 2, 8).is_err());
    assert!(profile_design(&panel, &base, "tau", &grid[..4], 2, 8).is_err());
}
