//! Model implementations and the name registry.

pub mod daphnia;
pub mod linear_gaussian;

use std::sync::Arc;

use crate::error::{PompError, Result};
use crate::pomp::PompModel;

pub use daphnia::{DaphniaModel, InitialCondition, Species, Treatment, Variant};
pub use linear_gaussian::LinearGaussian;

pub const MODEL_NAMES: [&str; 7] = [
    "sirjpf2",
    "sirjpf",
    "srjf2",
    "srjf",
    "sirpf2",
    "sirjpf2_gamma",
    "linear_gaussian",
];

/// Looks up a model by registry name. Daphnia models take their host
/// species and initial condition from `treatment`.
pub fn model_by_name(name: &str, treatment: Treatment, dt_max: f64) -> Result<Arc<dyn PompModel>> {
    if name == "linear_gaussian" {
        return Ok(Arc::new(LinearGaussian::new()));
    }
    let variant = Variant::from_name(name, treatment.single_species())?;
    let present = variant.species();
    let needed = treatment.initial_condition().s.map(|s| s > 0.0);
    if (0..2).any(|k| needed[k] && !present[k]) {
        return Err(PompError::InvalidArgument(format!(
            "model `{name}` lacks a host species present in treatment `{}`",
            treatment.name()
        )));
    }
    Ok(Arc::new(DaphniaModel::new(variant, treatment.initial_condition(), dt_max)?))
}
