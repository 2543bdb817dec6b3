use crate::error::{Error, Result};
use crate::network::{NetworkParams, OptimizerState};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adaptive-moment optimizer with the usual default coefficients.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    state: OptimizerState,
}

impl Adam {
    pub fn new(learning_rate: f64, params: &NetworkParams) -> Self {
        let zeros = || params.entries().iter().map(|e| vec![0f32; e.tensor.len()]).collect();
        Self { learning_rate, state: OptimizerState { step: 0, m: zeros(), v: zeros() } }
    }

    pub fn from_state(learning_rate: f64, params: &NetworkParams, state: OptimizerState) -> Result<Self> {
        let ok = state.m.len() == params.entries().len()
            && state.v.len() == params.entries().len()
            && params
                .entries()
                .iter()
                .zip(state.m.iter().zip(&state.v))
                .all(|(e, (m, v))| m.len() == e.tensor.len() && v.len() == e.tensor.len());
        if !ok {
            return Err(Error::Checkpoint("optimizer state does not match the parameters".into()));
        }
        Ok(Self { learning_rate, state })
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn into_state(self) -> OptimizerState {
        self.state
    }

    /// One update. Tensors without a gradient keep their values and
    /// moments, as if they were not part of the model for this step.
    pub fn step(&mut self, params: &mut NetworkParams, grads: &[Option<Vec<f32>>]) {
        assert_eq!(grads.len(), params.entries().len());
        self.state.step += 1;
        let t = self.state.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let (b1, b2) = (BETA1 as f32, BETA2 as f32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = &mut self.state.m[i];
            let v = &mut self.state.v[i];
            let w = params.tensor_mut(i).data_mut();
            for j in 0..w.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mhat = m[j] as f64 / c1;
                let vhat = v[j] as f64 / c2;
                w[j] -= (self.learning_rate * mhat / (vhat.sqrt() + EPSILON)) as f32;
            }
        }
    }
}

/// Scale all gradients down so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Vec<f32>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
