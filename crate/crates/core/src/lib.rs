//! Race proxies and disparity estimation with contextual (outcome-aware)
//! adjustment of BISG.

// `!(x > 0.0)` style guards are used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bisg;
pub mod cbisg;
pub mod diagnostics;
pub mod domain;
pub mod error;
pub mod estimators;
pub mod learner;
pub mod micsg;
pub mod simulator;
pub mod tables;

pub use domain::{AttributedRecord, Context, ContextualProxy, RaceDistribution, RaceSet};
pub use error::{Error, Result};
