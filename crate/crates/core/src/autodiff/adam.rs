use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 norm above which all gradients are rescaled. `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

/// First and second moments per parameter tensor, plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// One bias-corrected Adam update after global-norm clipping. A non-finite
/// gradient aborts the step before any parameter or moment is touched.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[&[f64]],
    names: &[String],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<StepReport> {
    if !(cfg.lr > 0.0) {
        return Err(Error::InvalidConfig(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::InvalidConfig(format!(
            "adam_step got {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    let mut sq = 0.0;
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: vec![g.len()],
            });
        }
        for &x in g.iter() {
            if !x.is_finite() {
                let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
                return Err(Error::NonFiniteGradient(name));
            }
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    let (scale, clipped) = match cfg.clip_norm {
        Some(c) if norm > c => (c / norm, true),
        _ => (1.0, false),
    };

    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for (((w, &gr), mi), vi) in p.data_mut().iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gr = gr * scale;
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gr;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gr * gr;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(StepReport {
        grad_norm: norm,
        clipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&[&p]);
        let g = vec![0.0; 3];
        adam_step(&mut [&mut p], &[&g], &names(1), &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // t=1, g=1: m=0.1, v=0.001, mhat=1, vhat=1, step = lr/(1+eps)
        let lr = 1e-3;
        let mut p = Tensor::scalar(0.0);
        let mut st = AdamState::new(&[&p]);
        let cfg = AdamConfig {
            clip_norm: None,
            ..AdamConfig::with_lr(lr)
        };
        adam_step(&mut [&mut p], &[&[1.0]], &names(1), &mut st, &cfg).unwrap();
        let expect = -lr / (1.0 + 1e-8);
        assert!((p.item() - expect).abs() < 1e-15, "{}", p.item());
    }

    #[test]
    fn clipping_scales_by_norm_ratio() {
        // grads (6, 8) have norm 10; clipped to (0.6, 0.8)
        let mut a = Tensor::scalar(0.0);
        let mut b = Tensor::scalar(0.0);
        let mut st = AdamState::new(&[&a, &b]);
        let rep = adam_step(
            &mut [&mut a, &mut b],
            &[&[6.0], &[8.0]],
            &names(2),
            &mut st,
            &AdamConfig::default(),
        )
        .unwrap();
        assert!((rep.grad_norm - 10.0).abs() < 1e-12);
        assert!(rep.clipped);
        assert!((st.m[0][0] - 0.1 * 0.6).abs() < 1e-15);
        assert!((st.m[1][0] - 0.1 * 0.8).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut a = Tensor::scalar(1.0);
        let mut b = Tensor::scalar(1.0);
        let mut st = AdamState::new(&[&a, &b]);
        let err = adam_step(
            &mut [&mut a, &mut b],
            &[&[0.5], &[f64::NAN]],
            &names(2),
            &mut st,
            &AdamConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "p1"));
        assert_eq!(a.item(), 1.0);
        assert_eq!(st.step, 0);
    }
}
