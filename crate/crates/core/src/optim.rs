//! SGD and AdamW steppers.
//!
//! AdamW applies decoupled weight decay before the adaptive term:
//!
//! ```text
//! m ← β₁ m + (1 − β₁) g
//! v ← β₂ v + (1 − β₂) g²
//! θ ← θ − η λ θ − η m̂ / (√v̂ + ε)
//! ```
//!
//! With `ε = 0` the adaptive term is invariant to a constant rescaling of
//! every gradient, unlike SGD whose update scales linearly with it.

use serde::{Deserialize, Serialize};

use crate::numerics::Matrix;
use crate::{Error, Result};

fn check(param: &Matrix, grad: &Matrix, op: &'static str) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::shape(
            op,
            format!("param {:?}, grad {:?}", param.shape(), grad.shape()),
        ));
    }
    Ok(())
}

/// `param ← param − eta · grad`
pub fn sgd_step(param: &mut Matrix, grad: &Matrix, eta: f64) -> Result<()> {
    check(param, grad, "sgd_step")?;
    param.axpy(-eta, grad)
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(("lr", format!("must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(("beta1", format!("must be in [0, 1), got {}", self.beta1)));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(("beta2", format!("must be in [0, 1), got {}", self.beta2)));
        }
        if !(self.eps >= 0.0) {
            return Err(("eps", format!("must be non-negative, got {}", self.eps)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err((
                "weight_decay",
                format!("must be non-negative, got {}", self.weight_decay),
            ));
        }
        Ok(())
    }
}

/// Per-parameter Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Matrix,
    pub v: Matrix,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize) -> Self {
        AdamState {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            step_count: 0,
        }
    }

    pub fn reset(&mut self) {
        self.m.fill(0.0);
        self.v.fill(0.0);
        self.step_count = 0;
    }
}

pub fn adamw_step(
    param: &mut Matrix,
    grad: &Matrix,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    check(param, grad, "adamw_step")?;
    if state.m.shape() != param.shape() || state.v.shape() != param.shape() {
        return Err(Error::shape(
            "adamw_step",
            format!("state {:?}, param {:?}", state.m.shape(), param.shape()),
        ));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = cfg.lr * cfg.weight_decay;
    let p = param.as_mut_slice();
    let m = state.m.as_mut_slice();
    let v = state.v.as_mut_slice();
    for (((p, m), v), &g) in p.iter_mut().zip(m).zip(v).zip(grad.as_slice()) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        let denom = v_hat.sqrt() + cfg.eps;
        let adaptive = if denom == 0.0 { 0.0 } else { m_hat / denom };
        *p -= decay * *p;
        *p -= cfg.lr * adaptive;
    }
    Ok(())
}

/// Optimizer choice with its hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd { lr: f64 },
    Adamw(AdamConfig),
}

impl OptimizerConfig {
    pub fn lr(&self) -> f64 {
        match self {
            OptimizerConfig::Sgd { lr } => *lr,
            OptimizerConfig::Adamw(c) => c.lr,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        match self {
            OptimizerConfig::Sgd { lr } if !(lr.is_finite() && *lr > 0.0) => {
                Err(("lr", format!("must be positive, got {lr}")))
            }
            OptimizerConfig::Sgd { .. } => Ok(()),
            OptimizerConfig::Adamw(c) => c.validate(),
        }
    }

    pub fn new_state(&self, rows: usize, cols: usize) -> ParamState {
        match self {
            OptimizerConfig::Sgd { .. } => ParamState::Sgd,
            OptimizerConfig::Adamw(_) => ParamState::Adam(AdamState::new(rows, cols)),
        }
    }
}

/// Optimizer state owned by one parameter.
#[derive(Clone, Debug, PartialEq)]
pub enum ParamState {
    Sgd,
    Adam(AdamState),
}

impl ParamState {
    pub fn step(&mut self, param: &mut Matrix, grad: &Matrix, cfg: &OptimizerConfig) -> Result<()> {
        match (self, cfg) {
            (ParamState::Sgd, OptimizerConfig::Sgd { lr }) => sgd_step(param, grad, *lr),
            (ParamState::Adam(state), OptimizerConfig::Adamw(c)) => {
                adamw_step(param, grad, state, c)
            }
            _ => Err(Error::InvalidArgument(
                "optimizer state does not match its config".into(),
            )),
        }
    }

    pub fn reset(&mut self) {
        if let ParamState::Adam(s) = self {
            s.reset();
        }
    }
}

/// Learning-rate schedules.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear warmup to the base rate, then cosine decay to zero at
    /// `total_steps`.
    WarmupCosine {
        warmup_steps: u64,
        total_steps: u64,
    },
}

impl LrSchedule {
    /// Multiplier on the base learning rate at `step` (0-based).
    pub fn factor(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::WarmupCosine {
                warmup_steps,
                total_steps,
            } => {
                if step < warmup_steps {
                    (step + 1) as f64 / warmup_steps as f64
                } else if step >= total_steps {
                    0.0
                } else {
                    let span = (total_steps - warmup_steps).max(1) as f64;
                    let progress = (step - warmup_steps) as f64 / span;
                    0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
                }
            }
        }
    }
}
