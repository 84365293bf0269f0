//! Deterministic simulator for federated learning over unreliable model
//! exchange: the server broadcast and the client uploads each pass
//! through a configurable perturbation channel (bounded-norm noise,
//! quantization, clipped Gaussian DP noise), and clients train with
//! plain SGD, a sharpness-aware two-step rule, or control-variate drift
//! correction.
//!
//! Everything random is drawn from streams keyed by
//! `(seed, purpose, round, client)`, so results are a pure function of
//! the config: reruns and different client schedules produce
//! byte-identical artifacts.
//!
//! Layering, bottom up: [`numkit`] (vectors, keyed RNG) → [`model`] /
//! [`data`] → [`channel`] / [`localopt`] / [`metrics`] →
//! [`federation`] (the round engine) → [`config`] / [`report`] /
//! [`driver`] (the `fedsim` binary's plumbing).

pub mod channel;
pub mod config;
pub mod data;
pub mod driver;
pub mod error;
pub mod federation;
pub mod localopt;
pub mod metrics;
pub mod model;
pub mod numkit;
pub mod report;

pub use error::{Error, Result};
