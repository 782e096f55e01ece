//! Site-level principal-stratum decomposition of treatment effects in
//! multisite experiments with two-level compliance.

pub mod bootstrap;
pub mod data;
pub mod diagnostics;
pub mod regression;
pub mod rng;
pub mod simulation;
pub mod strata;
