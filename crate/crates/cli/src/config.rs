//! Run configuration: a TOML file, canonicalized for hashing and snapshots.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use panelpomp::mif::{CoolingSchedule, MifSettings};
use panelpomp::models::daphnia::{DaphniaModel, Treatment, UnitPreset, Variant};
use panelpomp::models::{model_by_name, LinearGaussian};
use panelpomp::panel::{PanelParams, PanelPomp};
use panelpomp::params::{ParamSpec, Role};
use panelpomp::pomp::PompModel;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, CliError, CliResult};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Fitted,
    Rescaled,
}

/// Overrides for one entry of the model's parameter spec.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecOverride {
    pub role: Option<Role>,
    pub sd: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Algorithm {
    pub particles: usize,
    /// Iterations per search stage.
    pub stages: Vec<usize>,
    /// Fraction of searches carried into the next stage.
    pub selection: f64,
    /// Number of starting points (K).
    pub starts: usize,
    pub rho: f64,
    pub marginalize: bool,
    pub dt_max: f64,
    /// Filter replicates for likelihood evaluation.
    pub n_reps: usize,
}

impl Default for Algorithm {
    fn default() -> Self {
        Algorithm {
            particles: 500,
            stages: vec![150, 150, 250],
            selection: 0.25,
            starts: 8,
            rho: CoolingSchedule::standard().rho,
            marginalize: false,
            dt_max: panelpomp::models::daphnia::DEFAULT_DT_MAX,
            n_reps: 10,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoPaths {
    pub data: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub profile_points: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateBlock {
    pub n_sims: usize,
    /// Output times; defaults to the data's times, else days 7, 12, ..., 52.
    pub times: Option<Vec<f64>>,
}

impl Default for SimulateBlock {
    fn default() -> Self {
        SimulateBlock { n_sims: 1000, times: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileBlock {
    pub focal: String,
    pub grid: Vec<f64>,
    #[serde(default = "one")]
    pub n_starts: usize,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McapBlock {
    pub span: f64,
    pub confidence: f64,
    /// Expression in parameter names, profiled by binning existing points.
    pub composite: Option<String>,
    pub composite_grid: Vec<f64>,
}

impl Default for McapBlock {
    fn default() -> Self {
        McapBlock {
            span: 0.75,
            confidence: 0.95,
            composite: None,
            composite_grid: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkBlock {
    pub degrees: Vec<usize>,
    pub restarts: usize,
    pub max_iters: u64,
}

impl Default for BenchmarkBlock {
    fn default() -> Self {
        BenchmarkBlock {
            degrees: vec![1, 2, 3],
            restarts: 3,
            max_iters: 4000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreBlock {
    pub name: String,
    /// Parameters counted for the AIC table, including the dispersion.
    pub n_params: usize,
    pub tau_grid: Vec<f64>,
}

impl Default for ScoreBlock {
    fn default() -> Self {
        ScoreBlock {
            name: "external".into(),
            n_params: 1,
            tau_grid: (0..=120).map(|k| 10f64.powf(-2.0 + 0.05 * k as f64)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: String,
    pub treatment: String,
    pub seed: u64,
    #[serde(default)]
    pub preset: Preset,
    /// Natural-scale values overriding the model defaults.
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    /// Per-unit values of unit-specific parameters.
    #[serde(default)]
    pub unit_params: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(default)]
    pub spec: BTreeMap<String, SpecOverride>,
    #[serde(default)]
    pub algorithm: Algorithm,
    #[serde(default)]
    pub io: IoPaths,
    #[serde(default)]
    pub simulate: SimulateBlock,
    pub profile: Option<ProfileBlock>,
    #[serde(default)]
    pub mcap: McapBlock,
    #[serde(default)]
    pub benchmark: BenchmarkBlock,
    #[serde(default)]
    pub score: ScoreBlock,
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML config, or the config snapshot inside a run record.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            let rec: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let snap = rec["config"]
                .as_str()
                .ok_or_else(|| CliError::Config(format!("{}: record carries no config snapshot", path.display())))?;
            return Self::parse(snap);
        }
        Self::parse(&text)
    }

    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        format!("{:x}", Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn treatment(&self) -> CliResult<Treatment> {
        self.treatment.parse().map_err(CliError::from)
    }

    pub fn validate(&self) -> CliResult<()> {
        // TOML integers are signed 64-bit
        if self.seed > i64::MAX as u64 {
            return Err(CliError::Config(format!("seed {} exceeds {}", self.seed, i64::MAX)));
        }
        let setup = ModelSetup::new(self)?;
        let names: Vec<&str> = setup.specs.iter().map(|s| s.name.as_str()).collect();
        for key in self.params.keys().chain(self.spec.keys()) {
            if !names.contains(&key.as_str()) {
                return Err(CliError::Config(format!("model `{}` has no parameter `{key}`", self.model)));
            }
        }
        for (unit, values) in &self.unit_params {
            for key in values.keys() {
                match setup.specs.iter().find(|s| &s.name == key) {
                    Some(s) if s.role == Role::UnitSpecific => {}
                    Some(_) => {
                        return Err(CliError::Config(format!("`{key}` for unit `{unit}` is not unit-specific")))
                    }
                    None => return Err(CliError::Config(format!("model `{}` has no parameter `{key}`", self.model))),
                }
            }
        }
        let a = &self.algorithm;
        if a.particles < 2 || a.n_reps == 0 || a.starts < 4 || a.stages.is_empty() || a.stages.contains(&0) {
            return Err(CliError::Config(
                "algorithm needs particles >= 2, n_reps >= 1, starts >= 4 and non-empty positive stages".into(),
            ));
        }
        CoolingSchedule::new(a.rho)?;
        if !(a.selection > 0.0 && a.selection <= 1.0) {
            return Err(CliError::Config(format!("selection {} outside (0, 1]", a.selection)));
        }
        if self.simulate.n_sims == 0 {
            return Err(CliError::Config("simulate.n_sims must be positive".into()));
        }
        if self.benchmark.degrees.iter().any(|d| !(1..=3).contains(d)) {
            return Err(CliError::Config("benchmark degrees must lie in 1..=3".into()));
        }
        Ok(())
    }

    pub fn mif_settings(&self, iterations: usize) -> CliResult<MifSettings> {
        let mut s = MifSettings::new(self.algorithm.particles, iterations, self.algorithm.marginalize);
        s.cooling = CoolingSchedule::new(self.algorithm.rho)?;
        Ok(s)
    }

    pub fn stages(&self) -> CliResult<Vec<MifSettings>> {
        self.algorithm.stages.iter().map(|&m| self.mif_settings(m)).collect()
    }

    pub fn data_path(&self) -> CliResult<&Path> {
        self.io
            .data
            .as_deref()
            .ok_or_else(|| CliError::Config("io.data is required for this command".into()))
    }
}

/// The configured model with its spec and natural-scale values.
pub struct ModelSetup {
    pub model: Arc<dyn PompModel>,
    pub specs: Vec<ParamSpec>,
    pub values: BTreeMap<String, f64>,
}

impl ModelSetup {
    pub fn new(cfg: &RunConfig) -> CliResult<Self> {
        let treatment = cfg.treatment()?;
        model_by_name(&cfg.model, treatment, cfg.algorithm.dt_max)?;
        let (model, defaults): (Arc<dyn PompModel>, Vec<f64>) = if cfg.model == "linear_gaussian" {
            (Arc::new(LinearGaussian::new()), LinearGaussian::default_values())
        } else {
            let variant = Variant::from_name(&cfg.model, treatment.single_species())?;
            let m = DaphniaModel::new(variant, treatment.initial_condition(), cfg.algorithm.dt_max)?;
            let mut p = variant.default_params();
            match cfg.preset {
                Preset::Fitted => UnitPreset::Fitted.apply(&mut p),
                Preset::Rescaled => UnitPreset::Rescaled.apply(&mut p),
            }
            let v = m.pick(&p);
            (Arc::new(m), v)
        };
        let specs: Vec<ParamSpec> = model
            .param_specs()
            .into_iter()
            .map(|s| apply_override(s.clone(), cfg.spec.get(&s.name)))
            .collect::<CliResult<_>>()?;
        let mut values: BTreeMap<String, f64> = specs.iter().map(|s| s.name.clone()).zip(defaults).collect();
        for (k, v) in &cfg.params {
            values.insert(k.clone(), *v);
        }
        Ok(ModelSetup { model, specs, values })
    }

    /// Values in the model's parameter order.
    pub fn vector(&self) -> Vec<f64> {
        self.specs.iter().map(|s| self.values[&s.name]).collect()
    }

    pub fn panel(&self, cfg: &RunConfig, unit_ids: &[String]) -> CliResult<(PanelPomp, PanelParams)> {
        let panel = PanelPomp::from_roles(unit_ids, self.model.clone(), 0.0, self.specs.clone())?;
        let pick = |spec: &[ParamSpec]| -> BTreeMap<String, f64> {
            spec.iter().map(|s| (s.name.clone(), self.values[&s.name])).collect()
        };
        let shared = pick(panel.shared_spec());
        let mut specific = BTreeMap::new();
        for id in unit_ids {
            let mut v = pick(panel.specific_spec());
            if let Some(o) = cfg.unit_params.get(id) {
                v.extend(o.iter().map(|(k, x)| (k.clone(), *x)));
            }
            specific.insert(id.clone(), v);
        }
        for unit in cfg.unit_params.keys() {
            if !unit_ids.contains(unit) {
                return Err(CliError::Config(format!("unit_params names unknown unit `{unit}`")));
            }
        }
        let params = PanelParams::from_named(&panel, &shared, &specific)?;
        Ok((panel, params))
    }
}

fn apply_override(mut s: ParamSpec, o: Option<&SpecOverride>) -> CliResult<ParamSpec> {
    let Some(o) = o else { return Ok(s) };
    if let Some(role) = o.role {
        s = s.with_role(role);
    }
    if let Some(sd) = o.sd {
        s = s.with_sd(sd);
    }
    if o.lower.is_some() || o.upper.is_some() {
        let (lo, hi) = s.bounds.unwrap_or((f64::NAN, f64::NAN));
        let (lo, hi) = (o.lower.unwrap_or(lo), o.upper.unwrap_or(hi));
        if !(lo < hi) {
            return Err(CliError::Config(format!("bounds for `{}` need lower < upper", s.name)));
        }
        s = s.with_bounds(lo, hi);
    }
    s.validate()?;
    Ok(s)
}

pub fn out_dir(cfg: Option<&RunConfig>, flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.and_then(|c| c.io.out_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("."))
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}
