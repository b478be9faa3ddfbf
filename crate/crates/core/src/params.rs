//! Parameter specifications, transforms and named parameter vectors.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{PompError, Result};

/// Default random-walk sd (estimation scale) for estimated parameters.
pub const DEFAULT_PERTURBATION_SD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Shared,
    UnitSpecific,
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Log,
    Logit,
    Identity,
}

impl Transform {
    pub fn name(self) -> &'static str {
        match self {
            Transform::Log => "log",
            Transform::Logit => "logit",
            Transform::Identity => "identity",
        }
    }

    pub fn in_domain(self, x: f64) -> bool {
        match self {
            Transform::Log => x.is_finite() && x > 0.0,
            Transform::Logit => x.is_finite() && x > 0.0 && x < 1.0,
            Transform::Identity => x.is_finite(),
        }
    }

    /// Natural scale to estimation scale. Callers check the domain first.
    #[inline]
    pub fn forward(self, x: f64) -> f64 {
        match self {
            Transform::Log => x.ln(),
            Transform::Logit => (x / (1.0 - x)).ln(),
            Transform::Identity => x,
        }
    }

    #[inline]
    pub fn inverse(self, y: f64) -> f64 {
        match self {
            Transform::Log => y.exp(),
            Transform::Logit => {
                // split by sign to keep both tails accurate
                if y >= 0.0 {
                    1.0 / (1.0 + (-y).exp())
                } else {
                    let e = y.exp();
                    e / (1.0 + e)
                }
            }
            Transform::Identity => y,
        }
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub role: Role,
    pub transform: Transform,
    /// Random-walk sd on the estimation scale. Zero for fixed parameters.
    pub perturbation_sd: f64,
    /// Natural-scale bounds, used when drawing starting values.
    pub bounds: Option<(f64, f64)>,
}

impl ParamSpec {
    pub fn estimated(name: impl Into<String>, transform: Transform) -> Self {
        ParamSpec {
            name: name.into(),
            role: Role::Shared,
            transform,
            perturbation_sd: DEFAULT_PERTURBATION_SD,
            bounds: None,
        }
    }

    pub fn fixed(name: impl Into<String>, transform: Transform) -> Self {
        ParamSpec {
            name: name.into(),
            role: Role::Fixed,
            transform,
            perturbation_sd: 0.0,
            bounds: None,
        }
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        if role == Role::Fixed {
            self.perturbation_sd = 0.0;
        } else if self.perturbation_sd == 0.0 {
            self.perturbation_sd = DEFAULT_PERTURBATION_SD;
        }
        self
    }

    pub fn with_sd(mut self, sd: f64) -> Self {
        self.perturbation_sd = sd;
        self
    }

    pub fn with_bounds(mut self, lo: f64, hi: f64) -> Self {
        self.bounds = Some((lo, hi));
        self
    }

    pub fn is_fixed(&self) -> bool {
        self.role == Role::Fixed
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.perturbation_sd >= 0.0 && self.perturbation_sd.is_finite()) {
            return Err(PompError::InvalidArgument(format!(
                "parameter `{}`: perturbation sd must be a nonnegative number",
                self.name
            )));
        }
        if self.is_fixed() && self.perturbation_sd != 0.0 {
            return Err(PompError::InvalidArgument(format!(
                "fixed parameter `{}` has nonzero perturbation sd",
                self.name
            )));
        }
        if let Some((lo, hi)) = self.bounds {
            if !(lo <= hi) {
                return Err(PompError::InvalidArgument(format!(
                    "parameter `{}`: bounds ({lo}, {hi}) are inverted",
                    self.name
                )));
            }
        }
        Ok(())
    }

    fn check_domain(&self, value: f64) -> Result<()> {
        if self.transform.in_domain(value) {
            Ok(())
        } else {
            Err(PompError::Domain {
                name: self.name.clone(),
                value,
                transform: self.transform.name(),
            })
        }
    }
}

pub type SpecList = Arc<[ParamSpec]>;

pub fn spec_list(specs: Vec<ParamSpec>) -> Result<SpecList> {
    for (i, s) in specs.iter().enumerate() {
        s.validate()?;
        if specs[..i].iter().any(|o| o.name == s.name) {
            return Err(PompError::DuplicateParameter(s.name.clone()));
        }
    }
    Ok(specs.into())
}

/// Estimation-scale image of a parameter vector. `fixed[i]` marks entries
/// that must never be perturbed.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimationVector {
    pub values: Vec<f64>,
    pub fixed: Vec<bool>,
}

/// Natural-scale parameter values bound to the spec list that governs them.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    spec: SpecList,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(spec: SpecList, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.len() {
            return Err(PompError::Length {
                expected: spec.len(),
                got: values.len(),
            });
        }
        for (s, &v) in spec.iter().zip(&values) {
            s.check_domain(v)?;
        }
        Ok(ParamVector { spec, values })
    }

    /// Builds a vector from name/value pairs; every spec entry must appear
    /// exactly once and no other names are accepted.
    pub fn from_pairs<S: AsRef<str>>(spec: SpecList, pairs: &[(S, f64)]) -> Result<Self> {
        let mut values = vec![f64::NAN; spec.len()];
        let mut seen = vec![false; spec.len()];
        for (name, v) in pairs {
            let name = name.as_ref();
            let i = spec
                .iter()
                .position(|s| s.name == name)
                .ok_or_else(|| PompError::UnknownParameter(name.to_string()))?;
            if seen[i] {
                return Err(PompError::DuplicateParameter(name.to_string()));
            }
            seen[i] = true;
            values[i] = *v;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(PompError::InvalidArgument(format!(
                "no value supplied for parameter `{}`",
                spec[i].name
            )));
        }
        Self::new(spec, values)
    }

    pub fn spec(&self) -> &SpecList {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.spec.iter().position(|s| s.name == name)
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.index_of(name).map(|i| self.values[i])
    }

    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        let i = self
            .index_of(name)
            .ok_or_else(|| PompError::UnknownParameter(name.to_string()))?;
        self.spec[i].check_domain(value)?;
        self.values[i] = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> + '_ {
        self.spec
            .iter()
            .zip(&self.values)
            .map(|(s, &v)| (s.name.as_str(), v))
    }

    pub fn to_estimation_scale(&self) -> Result<EstimationVector> {
        let mut values = Vec::with_capacity(self.len());
        for (s, &v) in self.spec.iter().zip(&self.values) {
            s.check_domain(v)?;
            values.push(s.transform.forward(v));
        }
        Ok(EstimationVector {
            values,
            fixed: self.spec.iter().map(ParamSpec::is_fixed).collect(),
        })
    }

    pub fn from_estimation_scale(v: &[f64], spec: SpecList) -> Result<Self> {
        if v.len() != spec.len() {
            return Err(PompError::Length {
                expected: spec.len(),
                got: v.len(),
            });
        }
        let values = spec
            .iter()
            .zip(v)
            .map(|(s, &y)| s.transform.inverse(y))
            .collect();
        Ok(ParamVector { spec, values })
    }
}
