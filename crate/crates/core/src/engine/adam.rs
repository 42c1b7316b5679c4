use std::collections::BTreeMap;

use super::{Tensor, TensorError};

/// Adam with bias correction. Moment buffers are kept per named parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamState {
    /// `beta1 = 0`, `beta2 = 0.99`, `eps = 1e-8`.
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.0, 0.99, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn moments(&self, name: &str) -> Option<(&[f32], &[f32])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// Advances the step counter once, then updates every `(name, param)` that
    /// has an entry in `grads`.
    pub fn step<'a, I>(&mut self, params: I, grads: &BTreeMap<String, Tensor<f32>>) -> Result<(), TensorError>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor<f32>)>,
    {
        self.begin_step();
        for (name, p) in params {
            if let Some(g) = grads.get(name) {
                self.update(name, p, g)?;
            }
        }
        Ok(())
    }

    /// Starts a new step; follow with one [`update`](Self::update) per parameter.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates one parameter using the bias correction of the current step.
    pub fn update(&mut self, name: &str, p: &mut Tensor<f32>, g: &Tensor<f32>) -> Result<(), TensorError> {
        if self.step == 0 {
            self.begin_step();
        }
        if g.shape() != p.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        let t = self.step.min(i32::MAX as u64) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let n = p.numel();
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        if m.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                left: vec![m.len()],
                right: vec![n],
            });
        }
        update_moments(m, v, g.data(), self.beta1, self.beta2);
        if self.lr == 0.0 {
            return Ok(());
        }
        for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m.iter()).zip(v.iter()) {
            let mhat = mi as f64 / bc1;
            let vhat = vi as f64 / bc2;
            let delta = self.lr * mhat / (vhat.sqrt() + self.eps);
            *pi = (*pi as f64 - delta) as f32;
        }
        Ok(())
    }
}

fn update_moments(m: &mut [f32], v: &mut [f32], g: &[f32], beta1: f64, beta2: f64) {
    for ((mi, vi), &gi) in m.iter_mut().zip(v.iter_mut()).zip(g) {
        let gi = gi as f64;
        *mi = (beta1 * *mi as f64 + (1.0 - beta1) * gi) as f32;
        *vi = (beta2 * *vi as f64 + (1.0 - beta2) * gi * gi) as f32;
    }
}

/// Single-tensor convenience form used by tests and small problems.
pub fn adam_step(
    param: &mut Tensor<f32>,
    grad: &Tensor<f32>,
    state: &mut AdamState,
) -> Result<(), TensorError> {
    let mut grads = BTreeMap::new();
    grads.insert("p".to_string(), grad.clone());
    state.step(std::iter::once(("p", param)), &grads)
}
