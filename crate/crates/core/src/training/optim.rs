//! Adam with bias correction and global-norm clipping.

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
use crate::params::{GradBuffer, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient norm ceiling.
    pub clip_norm: Option<f64>,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

/// First and second moment estimates per parameter id.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Option<Tensor<T>>>,
    pub v: Vec<Option<Tensor<T>>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(n_params: usize) -> Self {
        AdamState {
            step: 0,
            m: vec![None; n_params],
            v: vec![None; n_params],
        }
    }
}

/// One update of every parameter that has a gradient. Returns the global
/// gradient norm before clipping.
pub fn optimizer_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &GradBuffer<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<f64> {
    if !grads.all_finite() {
        let bad: Vec<&str> = grads
            .iter()
            .filter(|(_, g)| !g.all_finite())
            .map(|(id, _)| params.name(id))
            .collect();
        return Err(Error::NonFinite(format!("gradients of {}", bad.join(", "))));
    }
    let norm = grads.global_norm();
    let clip = match cfg.clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - cfg.beta1), T::from_f64(1.0 - cfg.beta2));
    let step_size = T::from_f64(cfg.lr / bc1);
    let inv_bc2 = T::from_f64(1.0 / bc2);
    let eps = T::from_f64(cfg.eps);
    let clip = T::from_f64(clip);
    for (id, g) in grads.iter() {
        let mut p = (**params.value(id)).clone();
        let m = state.m[id].get_or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v[id].get_or_insert_with(|| Tensor::zeros(g.shape()));
        for (((pi, mi), vi), &gi) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            let gi = gi * clip;
            *mi = b1 * *mi + one_b1 * gi;
            *vi = b2 * *vi + one_b2 * gi * gi;
            *pi -= step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
        }
        params.set(id, p)?;
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Group;

    fn one_param(x: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("x", Group::Projector, Tensor::full(&[1, 1], x)).unwrap();
        s
    }

    fn grad(g: f64) -> GradBuffer<f64> {
        let mut b = GradBuffer::new(1);
        b.add(0, Tensor::full(&[1, 1], g));
        b
    }

    fn no_clip(lr: f64) -> AdamConfig {
        AdamConfig {
            clip_norm: None,
            ..AdamConfig::with_lr(lr)
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = one_param(0.3);
        let mut s = AdamState::new(1);
        optimizer_step(&mut p, &grad(0.0), &mut s, &no_clip(0.1)).unwrap();
        assert_eq!(p.get("x").unwrap().item(), 0.3);
    }

    #[test]
    fn first_step_is_minus_lr() {
        let mut p = one_param(0.0);
        let mut s = AdamState::new(1);
        optimizer_step(&mut p, &grad(1.0), &mut s, &no_clip(1e-3)).unwrap();
        // m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((p.get("x").unwrap().item() - expected).abs() < 1e-15);
    }

    #[test]
    fn two_steps_match_hand_moments() {
        let mut p = one_param(1.0);
        let mut s = AdamState::new(1);
        let cfg = no_clip(0.01);
        optimizer_step(&mut p, &grad(2.0), &mut s, &cfg).unwrap();
        optimizer_step(&mut p, &grad(-1.0), &mut s, &cfg).unwrap();
        // m1 = 0.2, v1 = 0.004; m2 = 0.9*0.2 - 0.1 = 0.08, v2 = 0.999*0.004 + 0.001 = 0.004996
        assert!((s.m[0].as_ref().unwrap().item() - 0.08).abs() < 1e-15);
        assert!((s.v[0].as_ref().unwrap().item() - 0.004996).abs() < 1e-15);
        let x1 = 1.0 - 0.01 * (0.2 / 0.1) / ((0.004f64 / 0.001).sqrt() + 1e-8);
        let m_hat = 0.08 / (1.0 - 0.81);
        let v_hat = 0.004996 / (1.0 - 0.999f64 * 0.999);
        let x2 = x1 - 0.01 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p.get("x").unwrap().item() - x2).abs() < 1e-12);
    }

    #[test]
    fn clipping_scales_gradient() {
        let mut p = one_param(0.0);
        let mut s = AdamState::new(1);
        let norm = optimizer_step(&mut p, &grad(10.0), &mut s, &AdamConfig::with_lr(0.1)).unwrap();
        assert_eq!(norm, 10.0);
        assert!((s.m[0].as_ref().unwrap().item() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = one_param(0.0);
        let mut s = AdamState::new(1);
        let r = optimizer_step(&mut p, &grad(f64::NAN), &mut s, &AdamConfig::with_lr(0.1));
        assert!(matches!(r, Err(Error::NonFinite(_))));
        assert_eq!(p.get("x").unwrap().item(), 0.0);
    }
}
