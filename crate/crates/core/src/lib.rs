//! Hierarchical additive modelling of spatio-temporal panels.
//!
//! A response observed per (time slot, tract) is modelled as
//! `y = f(x) + phi[slot, tract] + noise`, where `f` is a boosted ensemble of
//! regression trees ([`mart`]) and `phi` is an intrinsic conditional
//! autoregressive field ([`spatial`]). [`backfit`] alternates the two stages,
//! gating the spatial stage on per-slot Moran's I tests, and [`interpret`]
//! provides variable importance and partial dependence for the fitted trees.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backfit;
pub mod error;
pub mod interpret;
pub mod mart;
pub mod panel;
pub mod persist;
pub mod spatial;
pub mod synth;
pub mod tree;

pub use error::{Error, Result};
