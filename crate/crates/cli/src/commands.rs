use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use panelpomp::benchmarks::{aic_table, filter_run, score_external_predictions, AicRow, Prediction};
use panelpomp::glmm::{glmm_fit_categories, GlmmData, GlmmFitSettings};
use panelpomp::mif::{draw_starts, staged_search};
use panelpomp::panel::{panel_loglik, PanelDataset};
use panelpomp::profile::{flatten_params, mcap, poor_mans_profile, profile_design, run_profile_task, Composite, ProfilePoint};
use panelpomp::rng::{self, tag};
use panelpomp::simulate::{quantile_bands, simulate, BAND_PROBS};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ensure_dir, ModelSetup, RunConfig};
use crate::error::{io_err, CliError, CliResult};
use crate::ingest::ingest_panel_csv;
use crate::record::{ModelSummary, RunRecord, RECORD_FILE};

/// Shared state of one invocation.
pub struct Context {
    pub config: Option<RunConfig>,
    pub out_dir: PathBuf,
    pub workers: usize,
}

struct Output<'a> {
    ctx: &'a Context,
    record: RunRecord,
    started: Instant,
}

impl<'a> Output<'a> {
    fn new(ctx: &'a Context, command: &str) -> CliResult<Self> {
        ensure_dir(&ctx.out_dir)?;
        let stale = ctx.out_dir.join(RECORD_FILE);
        if stale.exists() {
            std::fs::remove_file(&stale).map_err(|e| io_err(&stale, e))?;
        }
        Ok(Output {
            ctx,
            record: RunRecord::new(command, ctx.config.as_ref(), ctx.workers),
            started: Instant::now(),
        })
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> CliResult<()> {
        let path = self.ctx.out_dir.join(name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| io_err(&path, e))?;
        w.write_record(header).map_err(|e| io_err(&path, e))?;
        for row in rows {
            w.write_record(&row).map_err(|e| io_err(&path, e))?;
        }
        w.flush().map_err(|e| io_err(&path, e))?;
        self.record.outputs.push(name.to_string());
        Ok(())
    }

    fn finish(mut self, results: impl Serialize) -> CliResult<RunRecord> {
        self.record.results = serde_json::to_value(results).map_err(|e| CliError::Io(e.to_string()))?;
        self.record.wall_time_s = self.started.elapsed().as_secs_f64();
        self.record.write(&self.ctx.out_dir)?;
        Ok(self.record)
    }
}

fn config(ctx: &Context) -> CliResult<&RunConfig> {
    ctx.config
        .as_ref()
        .ok_or_else(|| CliError::Config("this command needs --config".into()))
}

fn load_data(cfg: &RunConfig) -> CliResult<PanelDataset> {
    Ok(ingest_panel_csv(cfg.data_path()?)?.data)
}

fn num(x: f64) -> String {
    x.to_string()
}

fn default_times() -> Vec<f64> {
    (1..=10).map(|n| (5 * n + 2) as f64).collect()
}

pub fn cmd_simulate(ctx: &Context) -> CliResult<RunRecord> {
    let cfg = config(ctx)?;
    let mut out = Output::new(ctx, "simulate")?;
    let setup = ModelSetup::new(cfg)?;
    let times = match (&cfg.simulate.times, &cfg.io.data) {
        (Some(t), _) => t.clone(),
        (None, Some(_)) => {
            let data = load_data(cfg)?;
            let mut t: Vec<f64> = data.units.values().flatten().map(|o| o.time).collect();
            t.sort_by(f64::total_cmp);
            t.dedup();
            t
        }
        (None, None) => default_times(),
    };
    let ens = simulate(setup.model.as_ref(), &setup.vector(), 0.0, &times, cfg.simulate.n_sims, cfg.seed)?;
    let labels: Vec<String> = ens
        .state_labels
        .iter()
        .cloned()
        .chain(ens.obs_labels.iter().map(|l| format!("obs_{l}")))
        .collect();
    let rows = ens.trajectories.iter().enumerate().flat_map(|(r, tr)| {
        let labels = &labels;
        ens.times.iter().enumerate().flat_map(move |(n, &t)| {
            tr.states[n]
                .iter()
                .chain(&tr.measurements[n])
                .zip(labels)
                .map(move |(&v, l)| vec![r.to_string(), num(t), l.clone(), num(v)])
        })
    });
    out.csv("trajectories.csv", &["replicate", "time", "label", "value"], rows)?;
    let bands = quantile_bands(&ens, &BAND_PROBS);
    out.csv(
        "bands.csv",
        &["time", "label", "q0.025", "q0.5", "q0.975"],
        bands.iter().map(|b| {
            let mut row = vec![num(b.time), b.label.clone()];
            row.extend(b.quantiles.iter().map(|&q| num(q)));
            row
        }),
    )?;
    out.finish(serde_json::json!({
        "n_sims": cfg.simulate.n_sims,
        "times": times,
        "labels": labels,
    }))
}

pub fn cmd_pfilter(ctx: &Context) -> CliResult<RunRecord> {
    let cfg = config(ctx)?;
    let mut out = Output::new(ctx, "pfilter")?;
    let data = load_data(cfg)?;
    let setup = ModelSetup::new(cfg)?;
    let ids: Vec<String> = data.units.keys().cloned().collect();
    let (panel, params) = setup.panel(cfg, &ids)?;
    let a = &cfg.algorithm;
    let ll = panel_loglik(&panel, &data, &params, a.particles, a.n_reps, cfg.seed)?;
    let run = filter_run(&panel, &data, &params, a.particles, rng::derive(cfg.seed, &[tag::EVAL]))?;
    out.csv(
        "loglik.csv",
        &["unit", "loglik", "se", "n_fail"],
        ll.per_unit
            .iter()
            .map(|(u, x)| vec![u.clone(), num(x.loglik), num(x.se), x.n_fail.to_string()]),
    )?;
    let mut rows = Vec::new();
    for (unit, (times, res)) in &run.units {
        for (n, &t) in times.iter().enumerate() {
            rows.push(vec![unit.clone(), num(t), String::new(), num(res.cond_logliks[n]), num(res.ess_trace[n])]);
            if let Some(lab) = &res.label_cond_logliks {
                for (l, v) in run.labels.iter().zip(&lab[n]) {
                    if let Some(v) = v {
                        rows.push(vec![unit.clone(), num(t), l.clone(), num(*v), String::new()]);
                    }
                }
            }
        }
    }
    out.csv("cond_loglik.csv", &["unit", "time", "label", "cond_loglik", "ess"], rows)?;
    out.record.models.push(ModelSummary {
        model: cfg.model.clone(),
        n_params: panel.n_estimated(),
        loglik: ll.total,
    });
    out.record.diagnostics.n_fail = ll.per_unit.values().map(|u| u.n_fail).sum();
    out.record.diagnostics.clamps = run.units.values().map(|(_, r)| r.clamps).sum();
    out.finish(ll)
}

fn param_columns(p: &BTreeMap<String, f64>) -> (Vec<String>, Vec<String>) {
    p.iter().map(|(k, v)| (k.clone(), num(*v))).unzip()
}

pub fn cmd_search(ctx: &Context) -> CliResult<RunRecord> {
    let cfg = config(ctx)?;
    let mut out = Output::new(ctx, "search")?;
    let data = load_data(cfg)?;
    let setup = ModelSetup::new(cfg)?;
    let ids: Vec<String> = data.units.keys().cloned().collect();
    let (panel, base) = setup.panel(cfg, &ids)?;
    let starts = draw_starts(&panel, &base, cfg.algorithm.starts, rng::derive(cfg.seed, &[tag::INIT]))?;
    let res = staged_search(&panel, &data, &starts, &cfg.stages()?, cfg.algorithm.selection, cfg.seed)?;

    let mut header: Vec<String> = ["stage", "search", "loglik", "se"].map(String::from).to_vec();
    let mut rows = Vec::new();
    for st in &res.stages {
        for c in &st.candidates {
            let (names, values) = param_columns(&flatten_params(&c.params(&panel)?));
            if header.len() == 4 {
                header.extend(names);
            }
            let mut row = vec![c.stage.to_string(), c.search.to_string(), num(c.loglik), num(c.se)];
            row.extend(values);
            rows.push(row);
        }
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    out.csv("candidates.csv", &header, rows)?;
    let trace_rows = res.stages.iter().flat_map(|st| {
        st.traces.iter().enumerate().flat_map(move |(i, tr)| {
            tr.iter()
                .map(move |it| vec![st.stage.to_string(), i.to_string(), it.iteration.to_string(), num(it.loglik), it.n_fail.to_string()])
        })
    });
    out.csv("traces.csv", &["stage", "search", "iteration", "loglik", "n_fail"], trace_rows)?;

    out.record.models.push(ModelSummary {
        model: cfg.model.clone(),
        n_params: panel.n_estimated(),
        loglik: res.best.loglik,
    });
    out.record.diagnostics.n_fail = res
        .stages
        .iter()
        .flat_map(|s| s.traces.iter().flatten())
        .map(|it| it.n_fail)
        .sum();
    out.finish(serde_json::json!({
        "marginalize": cfg.algorithm.marginalize,
        "best": res.best,
        "stages": res.stages,
    }))
}

fn points_rows(points: &[ProfilePoint]) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header: Vec<String> = ["focal", "replicate", "loglik"].map(String::from).to_vec();
    if let Some(p) = points.first() {
        header.extend(p.params.keys().cloned());
    }
    let rows = points
        .iter()
        .map(|p| {
            let mut row = vec![num(p.focal), p.replicate.to_string(), num(p.loglik)];
            row.extend(p.params.values().map(|&v| num(v)));
            row
        })
        .collect();
    (header, rows)
}

pub fn cmd_profile(ctx: &Context) -> CliResult<RunRecord> {
    let cfg = config(ctx)?;
    let block = cfg
        .profile
        .as_ref()
        .ok_or_else(|| CliError::Config("profile needs a [profile] block".into()))?;
    let mut out = Output::new(ctx, "profile")?;
    let data = load_data(cfg)?;
    let setup = ModelSetup::new(cfg)?;
    let ids: Vec<String> = data.units.keys().cloned().collect();
    let (panel, base) = setup.panel(cfg, &ids)?;
    let design = profile_design(&panel, &base, &block.focal, &block.grid, block.n_starts, rng::derive(cfg.seed, &[tag::INIT]))?;
    let stages = cfg.stages()?;
    let points: Vec<ProfilePoint> = design
        .tasks
        .par_iter()
        .map(|t| run_profile_task(&design, t, &data, &stages, cfg.seed))
        .collect::<panelpomp::Result<_>>()?;
    let (header, rows) = points_rows(&points);
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    out.csv("profile_points.csv", &header, rows)?;
    out.finish(serde_json::json!({ "focal": block.focal, "points": points }))
}

pub fn read_profile_points(path: &Path) -> CliResult<Vec<ProfilePoint>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| CliError::Data(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let find = |n: &str| {
        header
            .iter()
            .position(|h| h == n)
            .ok_or_else(|| CliError::Data(format!("{}: missing column `{n}`", path.display())))
    };
    let (fc, lc) = (find("focal")?, find("loglik")?);
    let rc = header.iter().position(|h| h == "replicate");
    let mut points = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::Data(e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let parse = |i: usize| -> CliResult<f64> {
            rec[i]
                .parse()
                .map_err(|_| CliError::Data(format!("row {line}: `{}` is not a number", &rec[i])))
        };
        let mut params = BTreeMap::new();
        for (i, h) in header.iter().enumerate() {
            if i != fc && i != lc && Some(i) != rc {
                params.insert(h.clone(), parse(i)?);
            }
        }
        points.push(ProfilePoint {
            focal: parse(fc)?,
            loglik: parse(lc)?,
            replicate: rc.map(|i| rec[i].parse().unwrap_or(0)).unwrap_or(0),
            params,
        });
    }
    Ok(points)
}

pub fn cmd_mcap(ctx: &Context) -> CliResult<RunRecord> {
    let cfg = config(ctx)?;
    let path = cfg
        .io
        .profile_points
        .as_deref()
        .ok_or_else(|| CliError::Config("mcap needs io.profile_points".into()))?;
    let mut out = Output::new(ctx, "mcap")?;
    let mut points = read_profile_points(path)?;
    let mut empty_bins = Vec::new();
    if let Some(expr) = &cfg.mcap.composite {
        let composite = Composite::parse(expr)?;
        let pm = poor_mans_profile(&points, &composite, &cfg.mcap.composite_grid)?;
        points = pm.points;
        empty_bins = pm.empty_bins;
    }
    let res = mcap(&points, cfg.mcap.span, cfg.mcap.confidence)?;
    out.csv(
        "mcap.csv",
        &["focal", "smoothed"],
        res.grid.iter().zip(&res.smoothed).map(|(&x, &y)| vec![num(x), num(y)]),
    )?;
    out.finish(serde_json::json!({ "mcap": res, "empty_bins": empty_bins }))
}

const DEGREE_NAMES: [&str; 3] = ["nb_linear", "nb_quadratic", "nb_cubic"];

pub fn cmd_benchmark(ctx: &Context) -> CliResult<RunRecord> {
    let cfg = config(ctx)?;
    let mut out = Output::new(ctx, "benchmark")?;
    let data = load_data(cfg)?;
    let labels: Vec<String> = data
        .labels
        .iter()
        .filter(|l| {
            let d = GlmmData::from_panel(&data, l).map(|d| d.units.iter().flat_map(|u| &u.counts).any(|&c| c > 0));
            match d {
                Ok(true) => true,
                _ => {
                    log::warn!("skipping `{l}`: no positive counts");
                    false
                }
            }
        })
        .cloned()
        .collect();
    if labels.is_empty() {
        return Err(CliError::Data("no column has positive counts".into()));
    }
    let fits = cfg
        .benchmark
        .degrees
        .par_iter()
        .map(|&d| {
            let settings = GlmmFitSettings {
                restarts: cfg.benchmark.restarts,
                max_iters: cfg.benchmark.max_iters,
                seed: rng::derive(cfg.seed, &[d as u64]),
            };
            glmm_fit_categories(d, &data, &labels, &settings)
        })
        .collect::<panelpomp::Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for f in &fits {
        let name = DEGREE_NAMES[f.degree - 1];
        for (label, fit) in &f.fits {
            let beta: Vec<String> = fit.spec.beta.iter().map(|&b| num(b)).collect();
            let se: Vec<String> = fit.se_beta.iter().map(|&b| num(b)).collect();
            rows.push(vec![
                name.to_string(),
                label.clone(),
                fit.spec.n_params().to_string(),
                num(fit.loglik),
                num(fit.spec.tau),
                num(fit.spec.sigma_b),
                beta.join(";"),
                se.join(";"),
                fit.converged.to_string(),
            ]);
        }
        out.record.models.push(ModelSummary {
            model: name.to_string(),
            n_params: f.n_params,
            loglik: f.loglik,
        });
    }
    out.csv(
        "benchmark.csv",
        &["model", "label", "n_params", "loglik", "tau", "sigma_b", "beta", "se_beta", "converged"],
        rows,
    )?;
    out.finish(&fits)
}

pub fn cmd_aic_table(ctx: &Context, records: &[PathBuf]) -> CliResult<RunRecord> {
    if records.is_empty() {
        return Err(CliError::Config("aic-table needs at least one run record".into()));
    }
    let mut rows = Vec::new();
    for path in records {
        let rec = RunRecord::read(path)?;
        if rec.models.is_empty() {
            return Err(CliError::Data(format!("{}: record carries no fitted model", path.display())));
        }
        rows.extend(rec.models.iter().map(|m| AicRow::new(m.model.clone(), m.n_params, m.loglik)));
    }
    let table = aic_table(rows);
    let mut out = Output::new(ctx, "aic-table")?;
    out.csv(
        "aic_table.csv",
        &["model", "params", "loglik", "AIC"],
        table
            .iter()
            .map(|r| vec![r.model.clone(), r.n_params.to_string(), num(r.loglik), num(r.aic)]),
    )?;
    let sources: Vec<String> = records.iter().map(|p| p.display().to_string()).collect();
    out.finish(serde_json::json!({ "rows": table, "sources": sources }))
}

pub fn cmd_score_external(ctx: &Context) -> CliResult<RunRecord> {
    let cfg = config(ctx)?;
    let path = cfg
        .io
        .predictions
        .as_deref()
        .ok_or_else(|| CliError::Config("score-external needs io.predictions".into()))?;
    let mut out = Output::new(ctx, "score-external")?;
    let data = load_data(cfg)?;
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let preds: Vec<Prediction> = rdr
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let score = score_external_predictions(&preds, &data, &cfg.score.tau_grid)?;
    out.csv(
        "score.csv",
        &["tau", "loglik"],
        score.profile.iter().map(|&(t, l)| vec![num(t), num(l)]),
    )?;
    out.record.models.push(ModelSummary {
        model: cfg.score.name.clone(),
        n_params: cfg.score.n_params,
        loglik: score.loglik,
    });
    out.finish(&score)
}
