//! Adam with bias correction and a step-decay learning-rate schedule.
//!
//! The optimizer owns moment buffers shaped exactly like the trainable
//! parameter vector; frozen parameters are excluded upstream by slicing the
//! trainable subset out, so a frozen network's memory is never touched.
//! Gradient clipping (global L2 norm) is available but off by default.

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum OptimError {
    /// A non-finite gradient component; the step is not applied.
    NonFiniteGrad { index: usize },
    ShapeMismatch { expect: usize, got: usize },
}

impl fmt::Display for OptimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimError::NonFiniteGrad { index } => {
                write!(f, "non-finite gradient at parameter {index}")
            }
            OptimError::ShapeMismatch { expect, got } => {
                write!(f, "gradient length {got} does not match parameter length {expect}")
            }
        }
    }
}

impl std::error::Error for OptimError {}

/// Adam state over a fixed-size trainable parameter vector.
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Optional global-L2-norm gradient clip.
    pub clip: Option<f64>,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: None,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One bias-corrected Adam update, in place. The whole step is rejected
    /// (parameters and moments untouched) if any gradient is non-finite.
    pub fn apply(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), OptimError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(OptimError::ShapeMismatch {
                expect: self.m.len(),
                got: grads.len(),
            });
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(OptimError::NonFiniteGrad { index });
        }
        let scale = match self.clip {
            Some(c) if c > 0.0 => {
                let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            _ => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i] * scale;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Piecewise-constant decay: `lr(e) = initial * (1 - decay)^floor(e/period)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepScheduler {
    pub initial_lr: f64,
    /// Fraction removed per period, in (0, 1). Zero disables decay.
    pub decay: f64,
    pub period: u64,
}

impl StepScheduler {
    pub fn new(initial_lr: f64, decay: f64, period: u64) -> Self {
        assert!(initial_lr > 0.0, "initial lr must be positive");
        assert!((0.0..1.0).contains(&decay), "decay fraction must be in [0, 1)");
        assert!(period >= 1, "period must be at least 1 epoch");
        StepScheduler {
            initial_lr,
            decay,
            period,
        }
    }

    pub fn lr_at(&self, epoch: u64) -> f64 {
        self.initial_lr * (1.0 - self.decay).powi((epoch / self.period) as i32)
    }
}
