use super::{FcnModel, Gradients, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
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

/// Moment estimates for a flat list of parameter arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, shapes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = shapes
            .into_iter()
            .map(|n| (vec![T::zero(); n], vec![T::zero(); n]))
            .unzip();
        Self { config, step: 0, m, v }
    }

    /// State matching the parameter arrays of `model` (weights then bias per
    /// layer).
    pub fn for_model(config: AdamConfig, model: &FcnModel<T>) -> Self {
        Self::new(
            config,
            model
                .layers
                .iter()
                .flat_map(|l| [l.weights.len(), l.bias.len()]),
        )
    }

    /// Apply one update to the model's parameters.
    pub fn update_model(&mut self, model: &mut FcnModel<T>, grads: &Gradients<T>) -> Result<()> {
        if grads.layers.len() != model.layers.len() {
            return Err(Error::Shape("gradient/model layer count mismatch".into()));
        }
        let mut params: Vec<&mut [T]> = Vec::with_capacity(2 * model.layers.len());
        let mut gs: Vec<&[T]> = Vec::with_capacity(2 * model.layers.len());
        for (l, g) in model.layers.iter_mut().zip(&grads.layers) {
            params.push(&mut l.weights);
            params.push(&mut l.bias);
            gs.push(&g.weights);
            gs.push(&g.bias);
        }
        adam_step(&mut params, &gs, self)
    }
}

/// One bias-corrected Adam update:
/// `m = b1 m + (1-b1) g`, `v = b2 v + (1-b2) g^2`,
/// `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_step<T: Real>(params: &mut [&mut [T]], grads: &[&[T]], state: &mut AdamState<T>) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape("Adam parameter groups do not match".into()));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(Error::Shape("Adam parameter/gradient lengths differ".into()));
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let b1 = T::from_f64(c.beta1);
    let b2 = T::from_f64(c.beta2);
    let one = T::one();
    let corr1 = T::from_f64(1.0 - c.beta1.powi(t));
    let corr2 = T::from_f64(1.0 - c.beta2.powi(t));
    let lr = T::from_f64(c.lr);
    let eps = T::from_f64(c.eps);
    for (gi, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.m[gi];
        let v = &mut state.v[gi];
        for j in 0..p.len() {
            let gj = g[j];
            m[j] = b1 * m[j] + (one - b1) * gj;
            v[j] = b2 * v[j] + (one - b2) * gj * gj;
            let m_hat = m[j] / corr1;
            let v_hat = v[j] / corr2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
