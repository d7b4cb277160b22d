use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: usize,
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// Updates applied so far.
    pub fn steps(&self) -> usize {
        self.step
    }

    /// First and second moments of a parameter, if it has received a gradient.
    pub fn moments(&self, id: ParamId) -> Option<&(Tensor, Tensor)> {
        self.moments.get(id.index()).and_then(Option::as_ref)
    }

    /// One update with learning rate `lr`. Parameters without an entry in
    /// `grads` are left untouched.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) -> Result<()> {
        self.step += 1;
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (id, g) in grads {
            let shape = store.get(*id).shape().to_vec();
            if g.shape() != shape.as_slice() {
                return Err(Error::shape("adam_update", &shape, g.shape()));
            }
            let (m, v) = self.moments[id.index()]
                .get_or_insert_with(|| (Tensor::zeros(shape.clone()), Tensor::zeros(shape.clone())));
            let p = store.get_mut(*id);
            for (((p, m), v), &g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup then constant: `lr * min(1, step / warmup)` for 1-based `step`.
pub fn learning_rate(lr: f64, warmup: usize, step: usize) -> f64 {
    if warmup == 0 {
        lr
    } else {
        lr * (step as f64 / warmup as f64).min(1.0)
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [(ParamId, Tensor)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}
