//! BLISS: bilevel influence scoring for pretraining data selection.
//!
//! A score model learns per-sample importance weights by bilevel optimization
//! against a small proxy model distilled toward a frozen target model; the
//! trained score model then ranks a data pool and the target trains on the
//! top-scored fraction. Everything runs on a self-contained second-order
//! autodiff core so each mathematical piece can be checked against
//! independent oracles.

pub mod autodiff;
pub mod bilevel;
pub mod data;
pub mod error;
pub mod models;
pub mod util;
pub mod weighting;

pub use error::{BlissError, Result};
