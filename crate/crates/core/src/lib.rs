//! Phase-voltage stabilization workbench for phase-coding decoy-state BB84.
//!
//! A drifting interferometer is simulated ([`physics`]); its zero-phase
//! voltage is either re-measured by fringe scans ([`calibration`]) or
//! forecast by a two-layer LSTM ([`lstm`], [`training`]) that is refreshed by
//! a few scans per cycle ([`controller`]). [`metrics`] turns the resulting
//! detection logs into gains, QBERs, decoy-state bounds and key rates.

pub mod baselines;
pub mod calibration;
pub mod config;
pub mod container;
pub mod controller;
pub mod dataset;
pub mod io;
pub mod linalg;
pub mod lstm;
pub mod metrics;
pub mod physics;
pub mod pipeline;
pub mod rng;
pub mod training;
