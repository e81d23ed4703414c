//! Intrinsic stochastic filtering on matrix Lie groups.
//!
//! This crate implements discrete-time filters for systems whose state lives
//! on a matrix Lie group (3-D rotations, rigid-body poses, or the translation
//! group that embeds ordinary linear state spaces) and whose dynamics are
//! driven by a left input, a right input, and left-multiplicative process
//! noise:
//!
//! ```text
//! chi_{n+1} = Upsilon_n · W_n · chi_n · Omega_n,      Y_n = h(chi_n, V_n)
//! ```
//!
//! For output maps that are compatible with the group action (for example
//! body-frame observations of known reference vectors), the estimation error
//! `eta_n = chi_n · chi_hat_n^{-1}` of an invariant filter evolves
//! autonomously: it does not depend on the right input nor on the true
//! trajectory. That property is what the whole crate is organised around —
//! error recursions can be sampled directly, constant-gain filters admit
//! stationary error distributions that can be estimated offline, and gain
//! schedules tuned offline remain valid for every trajectory of the system.
//!
//! # Modules
//!
//! - [`lie`] — the supported groups (SO(3), SE(3), T(N)) with hat/vee,
//!   exp/log, adjoints, and validated group elements.
//! - [`model`] — noise specifications, output maps, discretisation of
//!   continuous-time inputs, and trajectory simulation.
//! - [`filter`] — the generic invariant observer: predict, gain-based update,
//!   and the autonomous error recursion.
//! - [`fixed_gain`] — constant-gain attitude observers (two-vector and
//!   saturated single-vector gains), stationary-error estimation and the
//!   gain-surface grid optimiser.
//! - [`iekf`] — the invariant extended Kalman filter, linearised once at the
//!   identity, with its Riccati recursion and asymptotic gain extraction.
//! - [`ienkf`] — the invariant ensemble Kalman filter: offline particle-based
//!   gain schedules plus their online application.
//! - [`mekf`] — a classical multiplicative EKF baseline whose linearisation
//!   is tied to the current estimate, for comparison studies.
//! - [`harness`] — Monte-Carlo experiment runner, scenario configs, presets,
//!   and CSV export with bit-reproducible output.

pub mod error;
pub mod filter;
pub mod fixed_gain;
pub mod harness;
pub mod iekf;
pub mod ienkf;
pub mod lie;
pub mod mekf;
pub mod model;
pub mod rng;

pub use error::{Error, Result};
