//! Plain SGD with heavy-ball momentum over [`ModelParams`] or any tensor list.

use crate::diffcore::Tensor;
use crate::model::{ModelParams, ParamMask};

#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(params: &ModelParams, lr: f64, momentum: f64) -> Self {
        let shapes: Vec<&Tensor> = params.tensors().into_iter().map(|(_, t)| t).collect();
        Self::for_tensors(&shapes, lr, momentum)
    }

    pub fn for_tensors(tensors: &[&Tensor], lr: f64, momentum: f64) -> Self {
        let velocity = tensors
            .iter()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            lr,
            momentum,
            velocity,
        }
    }

    /// `v <- momentum * v + g; w <- w - lr * v`. Entries outside `mask` keep
    /// both their weight and a zero velocity.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor], mask: Option<&ParamMask>) {
        self.step_tensors(params.tensors_mut(), grads, mask);
    }

    pub fn step_tensors(&mut self, tensors: Vec<&mut Tensor>, grads: &[Tensor], mask: Option<&ParamMask>) {
        for (i, (w, g)) in tensors.into_iter().zip(grads).enumerate() {
            let v = self.velocity[i].data_mut();
            let m = mask.map(|m| &m.masks[i]);
            for (j, (wj, gj)) in w.data_mut().iter_mut().zip(g.data()).enumerate() {
                if m.is_some_and(|m| !m[j]) {
                    continue;
                }
                v[j] = self.momentum * v[j] + gj;
                *wj -= self.lr * v[j];
            }
        }
    }
}

/// Rescale `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before rescaling.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
