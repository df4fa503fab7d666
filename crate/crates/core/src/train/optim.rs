//! Adam with decoupled weight decay, and the cosine learning-rate schedule.

use crate::model::ModelParams;
use crate::tensor::Tensor;

use super::TrainError;

/// First and second moments for every parameter, plus the step counter.
/// Non-trainable entries keep zero moments and are never touched.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, i: usize) -> &[f64] {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &[f64] {
        &self.v[i]
    }
}

/// One Adam update of every trainable parameter:
/// `θ ← θ·(1 − lr·wd) − lr·m̂/(√v̂ + ε)`.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "{} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        let spec = &params.specs()[i];
        if g.shape() != spec.shape.as_slice() || state.m[i].len() != g.numel() {
            return Err(TrainError::ShapeMismatch(format!(
                "gradient for {} has shape {:?}, parameter {:?}",
                spec.name,
                g.shape(),
                spec.shape
            )));
        }
    }
    state.t += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let decay = 1.0 - lr * weight_decay;
    for (i, g) in grads.iter().enumerate() {
        if !params.specs()[i].role.trainable() {
            continue;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let theta = params.tensor_mut(i).data_mut();
        for (k, &gk) in g.data().iter().enumerate() {
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            theta[k] = theta[k] * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// `eta_min + ½(lr0 − eta_min)(1 + cos(π·t/t_max))`. A zero `t_max` yields `lr0`.
pub fn cosine_lr(t: usize, t_max: usize, lr0: f64, eta_min: f64) -> f64 {
    if t_max == 0 {
        return lr0;
    }
    let frac = t.min(t_max) as f64 / t_max as f64;
    eta_min + 0.5 * (lr0 - eta_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}
