use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A trainable tensor together with its AMSGrad state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub tensor: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
    v_max: Vec<f64>,
    step_count: u64,
}

impl Parameter {
    pub fn new(tensor: Tensor) -> Self {
        let n = tensor.len();
        Self {
            tensor: tensor.with_requires_grad(true),
            m: vec![0.0; n],
            v: vec![0.0; n],
            v_max: vec![0.0; n],
            step_count: 0,
        }
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    pub fn second_moment_max(&self) -> &[f64] {
        &self.v_max
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Adds `grad` into the parameter's gradient buffer.
    pub fn accumulate_grad(&mut self, grad: &[f64]) {
        for (t, g) in self.tensor.grad_mut().iter_mut().zip(grad) {
            *t += g;
        }
    }
}

/// Adam with the AMSGrad running maximum of the second moment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmsGrad {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AmsGrad {
    pub fn new(lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::param("lr", format!("must be positive, got {lr}")));
        }
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        })
    }

    /// Applies one update from the parameter's gradient buffer, then zeroes it.
    pub fn step(&self, p: &mut Parameter) -> Result<()> {
        if p.tensor.grad().iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("parameter gradient".into()));
        }
        p.step_count += 1;
        let t = p.step_count as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2_sqrt = (1.0 - self.beta2.powi(t)).sqrt();
        let step = self.lr / bias1;
        let Parameter {
            tensor, m, v, v_max, ..
        } = p;
        let grad = tensor.grad().to_vec();
        let values = tensor.values_mut();
        for i in 0..values.len() {
            let g = grad[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            if v[i] > v_max[i] {
                v_max[i] = v[i];
            }
            let denom = v_max[i].sqrt() / bias2_sqrt + self.eps;
            values[i] -= step * m[i] / denom;
        }
        tensor.zero_grad();
        Ok(())
    }
}
