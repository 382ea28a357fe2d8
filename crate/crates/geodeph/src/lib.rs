//! Simulation and analysis of geometric dephasing for a driven two-level system.
//!
//! A transverse drive of amplitude Ω and phase φ together with a static detuning Δ
//! acts on the qubit as an effective field (Ω cos φ, Ω sin φ, Δ) in angular-frequency
//! units. Sweeping φ through full turns moves the field around a cone of angle θ, so
//! a spin-echo sequence built around such loops picks up both dynamic and geometric
//! phase. Ornstein-Uhlenbeck noise injected on the drive amplitude turns those phases
//! into dephasing with an orientation-odd geometric component.
//!
//! The crate provides:
//! - [`model`]: field geometry, pulse schedules for the echo protocols;
//! - [`noise`]: exact discretized Ornstein-Uhlenbeck traces and window pairing;
//! - [`engine`]: SU(2) propagation of realizations and ensemble reduction;
//! - [`analytic`]: closed-form predictions for phases, variances, and coherences;
//! - [`adiabatic`]: adiabaticity parameter, constant-rate ramp shaping, reports;
//! - [`fit`]: weighted least-squares recovery of the decoherence factors, with
//!   AICc model comparison and residual diagnostics;
//! - [`dataset`], [`config`]: CSV/JSON interchange and run configuration.

pub mod adiabatic;
pub mod analytic;
pub mod config;
pub mod dataset;
pub mod engine;
pub mod fit;
pub mod model;
pub mod noise;
pub mod seeding;

/// Errors shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument fell outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// A schedule could not be built or sampled as requested.
    #[error("schedule error: {0}")]
    Schedule(String),
    /// A noise trace and a schedule disagree on grids or spans.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    /// Drive amplitude plus noise crossed zero, closing the energy gap.
    #[error("gap closed: drive amplitude plus noise reached zero")]
    GapClosing,
    /// A numerical procedure failed (singular system, non-finite values, ...).
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// Not enough data to carry out the requested estimate.
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    /// Invalid run configuration.
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
