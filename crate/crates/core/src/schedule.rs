//! Trade-off (`λ`) and temperature (`τ`) schedules.
//!
//! `λ` grows by `lambda_fac` whenever the epoch loss has not improved for
//! `patience` epochs; every such step restarts the temperature cool-down
//! from `tau_init`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum decrease of the epoch loss that counts as an improvement.
pub const IMPROVEMENT_THRESHOLD: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaSchedule {
    lambda: f64,
    lambda_fac: f64,
    patience: usize,
    best_loss: f64,
    epochs_since_improve: usize,
    fixed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauSchedule {
    tau_init: f64,
    tau_decay: f64,
    tau_min: f64,
    tau: f64,
    cool_steps: i32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleParams {
    pub lambda_init: f64,
    pub lambda_fac: f64,
    pub patience: usize,
    pub tau_init: f64,
    pub tau_decay: f64,
    pub tau_min: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            lambda_init: 0.1,
            lambda_fac: 1.1,
            patience: 5,
            tau_init: 10.0,
            tau_decay: 0.5,
            tau_min: 0.01,
        }
    }
}

fn check_tau(p: &ScheduleParams) -> Result<TauSchedule> {
    if !(p.tau_decay > 0.0 && p.tau_decay < 1.0) {
        return Err(Error::param("tau_decay", format!("must lie in (0, 1), got {}", p.tau_decay)));
    }
    if !(p.tau_min > 0.0) {
        return Err(Error::param("tau_min", format!("must be positive, got {}", p.tau_min)));
    }
    if !(p.tau_min < p.tau_init && p.tau_init.is_finite()) {
        return Err(Error::param(
            "tau_init",
            format!("must exceed tau_min ({}), got {}", p.tau_min, p.tau_init),
        ));
    }
    Ok(TauSchedule {
        tau_init: p.tau_init,
        tau_decay: p.tau_decay,
        tau_min: p.tau_min,
        tau: p.tau_init,
        cool_steps: 0,
    })
}

/// Builds the plateau-driven `λ` schedule and the `τ` cool-down.
pub fn init_lambda_tau(p: &ScheduleParams) -> Result<(LambdaSchedule, TauSchedule)> {
    if !(p.lambda_init > 0.0 && p.lambda_init.is_finite()) {
        return Err(Error::param("lambda_init", format!("must be positive, got {}", p.lambda_init)));
    }
    if !(p.lambda_fac > 1.0 && p.lambda_fac.is_finite()) {
        return Err(Error::param("lambda_fac", format!("must exceed 1, got {}", p.lambda_fac)));
    }
    if p.patience == 0 {
        return Err(Error::param("patience", "must be at least one epoch"));
    }
    let tau = check_tau(p)?;
    Ok((
        LambdaSchedule {
            lambda: p.lambda_init,
            lambda_fac: p.lambda_fac,
            patience: p.patience,
            best_loss: f64::INFINITY,
            epochs_since_improve: 0,
            fixed: false,
        },
        tau,
    ))
}

/// A constant `λ ≥ 0` (no plateau steps) with the usual `τ` cool-down.
/// `lambda_fac` and `patience` are ignored.
pub fn init_fixed_lambda(p: &ScheduleParams) -> Result<(LambdaSchedule, TauSchedule)> {
    if !(p.lambda_init >= 0.0 && p.lambda_init.is_finite()) {
        return Err(Error::param("lambda_init", format!("must be non-negative, got {}", p.lambda_init)));
    }
    let tau = check_tau(p)?;
    Ok((
        LambdaSchedule {
            lambda: p.lambda_init,
            lambda_fac: 1.0,
            patience: usize::MAX,
            best_loss: f64::INFINITY,
            epochs_since_improve: 0,
            fixed: true,
        },
        tau,
    ))
}

impl LambdaSchedule {
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn best_loss(&self) -> f64 {
        self.best_loss
    }

    pub fn epochs_since_improve(&self) -> usize {
        self.epochs_since_improve
    }

    pub fn is_fixed(&self) -> bool {
        self.fixed
    }
}

impl TauSchedule {
    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn tau_init(&self) -> f64 {
        self.tau_init
    }

    fn cool(&mut self) {
        self.cool_steps = self.cool_steps.saturating_add(1);
        self.tau = (self.tau_init * self.tau_decay.powi(self.cool_steps)).max(self.tau_min);
    }

    fn reset(&mut self) {
        self.cool_steps = 0;
        self.tau = self.tau_init;
    }
}

/// End-of-epoch update. Returns whether `λ` was stepped.
///
/// The first epoch after initialization or after a `λ` step only sets the
/// reference loss; it does not count as an improvement. With a constant
/// loss, `λ` therefore steps at epochs `p, 2p, …` for patience `p`.
pub fn adapt_lambda_tau(ls: &mut LambdaSchedule, ts: &mut TauSchedule, epoch_loss: f64) -> Result<bool> {
    if !epoch_loss.is_finite() {
        return Err(Error::NonFinite(format!("epoch loss {epoch_loss}")));
    }
    if ls.best_loss.is_finite() && epoch_loss < ls.best_loss - IMPROVEMENT_THRESHOLD {
        ls.best_loss = epoch_loss;
        ls.epochs_since_improve = 0;
    } else {
        if !ls.best_loss.is_finite() {
            ls.best_loss = epoch_loss;
        }
        ls.epochs_since_improve += 1;
    }
    if !ls.fixed && ls.epochs_since_improve >= ls.patience {
        ls.lambda *= ls.lambda_fac;
        ls.epochs_since_improve = 0;
        ls.best_loss = f64::INFINITY;
        ts.reset();
        return Ok(true);
    }
    ts.cool();
    Ok(false)
}
