//! AdamW with decoupled weight decay, and the polynomial learning-rate schedule.

use super::tensor::{s, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment buffers, one pair per parameter tensor.
#[derive(Debug, Clone, Default)]
pub struct AdamWState<T> {
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

/// One AdamW update over `params[i]` with gradient `grads[i]`.
///
/// Weight decay multiplies the parameter by `1 - lr * wd` directly; it never
/// enters the moment estimates.
pub fn adamw_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut AdamWState<T>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(
            "adamw",
            format!("{} parameters but {} gradients", params.len(), grads.len()),
        ));
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() {
        return Err(Error::shape("adamw", "optimizer state built for a different parameter list"));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].len() != p.numel() {
            return Err(Error::shape(
                "adamw",
                format!("parameter {i}: {:?} vs gradient {:?}", p.shape(), g.shape()),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2): (T, T) = (s(cfg.beta1), s(cfg.beta2));
    let decay: T = s(1.0 - lr * cfg.weight_decay);
    let (lr_t, eps): (T, T) = (s(lr), s(cfg.eps));
    let (bc1, bc2): (T, T) = (s(bc1), s(bc2));
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *pv = *pv * decay;
            *mv = b1 * *mv + (T::one() - b1) * gv;
            *vv = b2 * *vv + (T::one() - b2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *pv = *pv - lr_t * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// `base_lr * (1 - epoch/total_epochs)^power`.
pub fn poly_lr(base_lr: f64, epoch: usize, total_epochs: usize, power: f64) -> Result<f64> {
    if epoch > total_epochs {
        return Err(Error::Config(format!(
            "poly_lr: epoch {epoch} exceeds total {total_epochs}"
        )));
    }
    if total_epochs == 0 {
        return Ok(base_lr);
    }
    Ok(base_lr * (1.0 - epoch as f64 / total_epochs as f64).powf(power))
}
