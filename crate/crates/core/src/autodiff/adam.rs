use crate::autodiff::{AutodiffError, Gradients, ParamId, ParamStore, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are created lazily per
/// parameter and must keep the parameter's shape.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    cfg: AdamConfig,
    step: u64,
    moments: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update at learning rate `lr` to every parameter in
    /// `grads` except those listed in `frozen`.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &Gradients<T>,
        lr: f64,
        frozen: &[ParamId],
    ) -> Result<(), AutodiffError> {
        let updates: Vec<(ParamId, &Tensor<T>)> =
            grads.params().filter(|(id, _)| !frozen.contains(id)).collect();
        self.apply(store, &updates, lr)
    }

    /// Same as [`Adam::step`] for explicit `(parameter, gradient)` pairs.
    pub fn apply(
        &mut self,
        store: &mut ParamStore<T>,
        updates: &[(ParamId, &Tensor<T>)],
        lr: f64,
    ) -> Result<(), AutodiffError> {
        for (id, g) in updates {
            if !g.is_finite() {
                return Err(AutodiffError::NonFiniteGradient {
                    name: store.name(*id).to_string(),
                });
            }
            if g.shape() != store.get(*id).shape() {
                return Err(AutodiffError::StateMismatch {
                    name: store.name(*id).to_string(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let (b1t, b2t) = (T::lit(b1), T::lit(b2));
        let step_size = T::lit(lr / bc1);
        let inv_sqrt_bc2 = T::lit(1.0 / bc2.sqrt());
        let eps = T::lit(self.cfg.eps);

        if self.moments.len() < store.len() {
            self.moments.resize_with(store.len(), || None);
        }
        for (id, g) in updates {
            let p = store.get_mut(*id);
            let (m, v) = self.moments[id.0]
                .get_or_insert_with(|| (Tensor::zeros(g.rows(), g.cols()), Tensor::zeros(g.rows(), g.cols())));
            if m.shape() != p.shape() {
                return Err(AutodiffError::StateMismatch {
                    name: format!("#{}", id.0),
                });
            }
            for (((pi, mi), vi), &gi) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mi = b1t * *mi + (T::one() - b1t) * gi;
                *vi = b2t * *vi + (T::one() - b2t) * gi * gi;
                *pi -= step_size * *mi / ((*vi).sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(())
    }
}
