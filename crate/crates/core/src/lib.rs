//! Panel partially observed Markov process models: particle filtering,
//! panel iterated filtering, profile likelihood tools and the Daphnia
//! mesocosm model family.

// `!(x > 0.0)` style checks are meant to reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod benchmarks;
pub mod error;
pub mod glmm;
pub mod mif;
pub mod models;
pub mod nbinom;
pub mod panel;
pub mod params;
pub mod pfilter;
pub mod pomp;
pub mod profile;
pub mod rng;
pub mod simulate;

pub use error::{PompError, Result};
