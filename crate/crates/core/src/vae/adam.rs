use crate::error::{Error, Result};

use super::VaeModel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates, flattened in parameter storage order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn quantized_f32(&self) -> Self {
        let q = |v: &Vec<f64>| v.iter().map(|x| *x as f32 as f64).collect();
        Self {
            step: self.step,
            m: q(&self.m),
            v: q(&self.v),
        }
    }
}

/// One bias-corrected Adam update at step index `t` (1-based).
pub fn adam_step(
    params: &mut VaeModel,
    grads: &VaeModel,
    state: &mut AdamState,
    t: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    if t == 0 {
        return Err(Error::invalid("Adam step index starts at 1"));
    }
    let n = params.n_params();
    if grads.n_params() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::invalid(format!(
            "shape mismatch: {n} parameters, {} gradients, {} moments",
            grads.n_params(),
            state.m.len()
        )));
    }
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    let mut offset = 0;
    for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
        if p.len() != g.len() {
            return Err(Error::invalid("gradient tensor shapes differ from parameters"));
        }
        let m = &mut state.m[offset..offset + p.len()];
        let v = &mut state.v[offset..offset + p.len()];
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon);
        }
        offset += p.len();
    }
    state.step = t;
    Ok(())
}
