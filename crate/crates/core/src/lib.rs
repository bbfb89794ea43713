//! Multi-head physics-informed neural networks with unimodular
//! regularization of the latent space.
//!
//! The crate trains a shared network body against families of differential
//! equations (one output head per family member), regularizes the geometry
//! of the learned latent embedding, and transfers the frozen body to new,
//! stiffer family members by retraining only a small head. Classical
//! integrators and closed-form checks provide the reference solutions used
//! for evaluation.
//!
//! Module map:
//! * [`autodiff`]: scalar reverse-mode tape, up to second-order derivatives.
//! * [`nn`]: MLP bodies/heads, deterministic init, tape and `f64` forwards.
//! * [`optim`]: Adam and a step learning-rate scheduler.
//! * [`geometry`]: induced latent metric, unimodular and Jacobian penalties.
//! * [`problems`]: flame front, Van der Pol, and a cosmological boundary
//!   problem, as residual + constraint definitions.
//! * [`reference`]: RK4 / adaptive RK45 integrators and error metrics.
//! * [`trainer`]: training loops, transfer learning, records, checkpoints.

pub mod autodiff;
pub mod geometry;
pub mod nn;
pub mod optim;
pub mod problems;
pub mod reference;
pub mod trainer;
