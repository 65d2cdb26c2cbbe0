//! Soft-constrained objective and the optimizers that minimise it.
//!
//! The trainer minimises
//!
//! ```text
//! nll + β (kl − ξ_KL) + λ_H (H − ξ_H) + c/2 [max(0, kl − ξ_KL)² + max(0, H − ξ_H)²]
//! ```
//!
//! where the multipliers follow projected gradient ascent on the constraint
//! violations (modified differential method of multipliers) and `c` is the
//! damping coefficient. Both constraints read "value ≤ slack".

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One "value ≤ slack" constraint with its multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftConstraint {
    pub multiplier: f64,
    pub slack: f64,
}

impl SoftConstraint {
    pub fn new(multiplier: f64, slack: f64) -> Self {
        Self {
            multiplier: multiplier.max(0.0),
            slack,
        }
    }

    pub fn violation(&self, value: f64) -> f64 {
        value - self.slack
    }

    /// `λ g + c/2 max(0, g)²`.
    pub fn penalty(&self, value: f64, damping: f64) -> f64 {
        let g = self.violation(value);
        self.multiplier * g + 0.5 * damping * g.max(0.0).powi(2)
    }

    /// Derivative of [`penalty`](Self::penalty) with respect to `value`.
    pub fn weight(&self, value: f64, damping: f64) -> f64 {
        self.multiplier + damping * self.violation(value).max(0.0)
    }

    pub fn ascend(&mut self, value: f64, lr: f64) {
        self.multiplier = (self.multiplier + lr * self.violation(value)).max(0.0);
    }
}

/// Multipliers, slack targets and damping for the KL and entropy constraints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagrangianState {
    pub beta: f64,
    pub lambda_h: f64,
    pub xi_kl: f64,
    pub xi_h: f64,
    pub damping: f64,
    pub multiplier_lr: f64,
}

impl LagrangianState {
    pub fn new(xi_kl: f64, xi_h: f64) -> Self {
        Self {
            beta: 1.0,
            lambda_h: 0.0,
            xi_kl,
            xi_h,
            damping: 1.0,
            multiplier_lr: 1e-2,
        }
    }

    pub fn kl_constraint(&self) -> SoftConstraint {
        SoftConstraint {
            multiplier: self.beta,
            slack: self.xi_kl,
        }
    }

    pub fn entropy_constraint(&self) -> SoftConstraint {
        SoftConstraint {
            multiplier: self.lambda_h,
            slack: self.xi_h,
        }
    }

    /// Coefficients on `∂kl` and `∂H` in the gradient of the objective; the
    /// nll term always carries weight one.
    pub fn term_weights(&self, kl: f64, entropy: f64) -> (f64, f64) {
        (
            self.kl_constraint().weight(kl, self.damping),
            self.entropy_constraint().weight(entropy, self.damping),
        )
    }
}

/// Loss terms of one evaluation, all in nats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nll: f64,
    pub kl: f64,
    pub entropy: f64,
    pub lagrangian: f64,
}

pub fn lagrangian_value(nll: f64, kl: f64, entropy: f64, state: &LagrangianState) -> Result<LossBreakdown> {
    for (what, v) in [("nll", nll), ("kl", kl), ("entropy", entropy)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(what));
        }
    }
    let lagrangian = nll
        + state.kl_constraint().penalty(kl, state.damping)
        + state.entropy_constraint().penalty(entropy, state.damping);
    Ok(LossBreakdown {
        nll,
        kl,
        entropy,
        lagrangian,
    })
}

/// Projected ascent step on both multipliers.
pub fn update_multipliers(state: &LagrangianState, kl: f64, entropy: f64) -> LagrangianState {
    let mut kl_c = state.kl_constraint();
    let mut h_c = state.entropy_constraint();
    kl_c.ascend(kl, state.multiplier_lr);
    h_c.ascend(entropy, state.multiplier_lr);
    LagrangianState {
        beta: kl_c.multiplier,
        lambda_h: h_c.multiplier,
        ..*state
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam(AdamConfig),
    Sgd { lr: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam(AdamConfig::default())
    }
}

/// Flat-parameter optimizer state. `m`/`v` are empty for SGD.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, n_params: usize) -> Self {
        let moments = match kind {
            OptimizerKind::Adam(_) => n_params,
            OptimizerKind::Sgd { .. } => 0,
        };
        Self {
            kind,
            step: 0,
            m: vec![0.0; moments],
            v: vec![0.0; moments],
        }
    }

    /// One descent step on `params`. Entries where `trainable` is false are
    /// left untouched, moments included.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], trainable: Option<&[bool]>) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim("gradient", params.len(), grads.len()));
        }
        if let Some(mask) = trainable {
            if mask.len() != params.len() {
                return Err(Error::dim("trainable mask", params.len(), mask.len()));
            }
        }
        let active = |i: usize| trainable.is_none_or(|mask| mask[i]);
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd { lr } => {
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    if active(i) {
                        *p -= lr * g;
                    }
                }
            }
            OptimizerKind::Adam(cfg) => {
                if self.m.len() != params.len() {
                    return Err(Error::dim("optimizer moments", self.m.len(), params.len()));
                }
                let t = self.step as i32;
                let bias1 = 1.0 - cfg.beta1.powi(t);
                let bias2 = 1.0 - cfg.beta2.powi(t);
                for i in 0..params.len() {
                    if !active(i) {
                        continue;
                    }
                    let g = grads[i];
                    self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
                    self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
                    let m_hat = self.m[i] / bias1;
                    let v_hat = self.v[i] / bias2;
                    params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
                }
            }
        }
        Ok(())
    }
}

/// One row of the training log CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub nll: f64,
    pub kl: f64,
    pub entropy: f64,
    pub beta: f64,
    pub lambda_h: f64,
    pub lagrangian: f64,
}

pub fn write_log<W: std::io::Write>(rows: &[LogRow], w: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(w);
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_log<R: std::io::Read>(r: R) -> Result<Vec<LogRow>> {
    let mut reader = csv::Reader::from_reader(r);
    let rows = reader.deserialize().collect::<Result<Vec<LogRow>, _>>()?;
    Ok(rows)
}
