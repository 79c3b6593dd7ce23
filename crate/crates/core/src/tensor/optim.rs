use serde::{Deserialize, Serialize};

use super::{invalid, Result, Tensor, TensorError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for each parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// One bias-corrected Adam step at the configured learning rate.
    pub fn update(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        self.update_with_lr(self.config.lr, params, grads)
    }

    /// One bias-corrected Adam step at an explicit learning rate (for schedules).
    /// Gradients are validated before any state is touched, so a divergence
    /// error leaves parameters and moments unchanged.
    pub fn update_with_lr(
        &mut self,
        lr: f64,
        params: &mut [Tensor<T>],
        grads: &[Tensor<T>],
    ) -> Result<()> {
        if !(lr >= 0.0) {
            return Err(invalid(
                "adam",
                format!("learning rate must be non-negative, got {lr}"),
            ));
        }
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(invalid(
                "adam",
                format!(
                    "{} params, {} grads, {} moment slots",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(TensorError::Divergence { index: i });
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (ob1, ob2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step_size = T::lit(lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(c.eps);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((pv, &gv), (mv, vv)) in it {
                *mv = b1 * *mv + ob1 * gv;
                *vv = b2 * *vv + ob2 * gv * gv;
                *pv -= step_size * *mv / ((*vv * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
