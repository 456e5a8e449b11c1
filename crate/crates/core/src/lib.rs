// Negated float comparisons are used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod framework;
pub mod gradcheck;
pub mod localization;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod plot;
pub mod text;
pub mod training;
pub mod tsm;
pub mod vlc;

pub use error::{Error, Result};
