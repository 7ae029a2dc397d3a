//! AdamW with decoupled weight decay, global-norm clipping and the learning
//! rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Optimizer state over a fixed subset of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<F: Real> {
    pub cfg: AdamWConfig,
    pub step: u64,
    /// Parameters this optimizer updates, in store order.
    pub ids: Vec<ParamId>,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    /// Fixed at construction from each parameter's role.
    pub decay_exempt: Vec<bool>,
}

impl<F: Real> AdamW<F> {
    pub fn new(cfg: AdamWConfig, store: &ParamStore<F>, ids: Vec<ParamId>) -> Self {
        let m: Vec<Tensor<F>> = ids.iter().map(|&id| Tensor::zeros(store.get(id).shape())).collect();
        Self {
            decay_exempt: ids.iter().map(|&id| store.entry(id).role.decay_exempt()).collect(),
            v: m.clone(),
            m,
            ids,
            step: 0,
            cfg,
        }
    }

    /// Applies one update. `grads[i]` belongs to `self.ids[i]`.
    pub fn apply(&mut self, store: &mut ParamStore<F>, grads: &[Tensor<F>], lr: f64) -> Result<()> {
        if grads.len() != self.ids.len() {
            return Err(Error::invalid(format!(
                "optimizer holds {} parameters, got {} gradients",
                self.ids.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let step_size = F::c(lr / bc1);
        let inv_bc2 = F::c(1.0 / bc2);
        let (b1f, b2f) = (F::c(b1), F::c(b2));
        let (one_b1, one_b2) = (F::c(1.0 - b1), F::c(1.0 - b2));
        let eps = F::c(self.cfg.eps);
        for (i, &id) in self.ids.iter().enumerate() {
            let g = &grads[i];
            let p = store.get_mut(id);
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamw",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let decay = if self.decay_exempt[i] {
                F::one()
            } else {
                F::c(1.0 - lr * self.cfg.weight_decay)
            };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j];
                m[j] = b1f * m[j] + one_b1 * gj;
                v[j] = b2f * v[j] + one_b2 * gj * gj;
                *w = *w * decay - step_size * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Global L2 norm of a gradient set.
pub fn global_norm<F: Real>(grads: &[Tensor<F>]) -> f64 {
    grads
        .iter()
        .map(|g| g.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm<F: Real>(grads: &mut [Tensor<F>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let k = F::c(max_norm / norm);
        grads.iter_mut().for_each(|g| g.scale_in_place(k));
    }
    norm
}

/// Linear warm-up to `base` over `warmup` epochs, then cosine decay to zero at
/// `total`. `epoch` may be fractional.
pub fn lr_at(epoch: f64, base: f64, warmup: f64, total: f64) -> f64 {
    if epoch <= 0.0 {
        return 0.0;
    }
    if warmup > 0.0 && epoch < warmup {
        return base * epoch / warmup;
    }
    if epoch >= total || total <= warmup {
        return if epoch <= warmup { base } else { 0.0 };
    }
    base * 0.5 * (1.0 + (std::f64::consts::PI * (epoch - warmup) / (total - warmup)).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamRole;

    #[test]
    fn schedule_landmarks() {
        assert_eq!(lr_at(0.0, 1e-4, 40.0, 600.0), 0.0);
        assert!((lr_at(1.0, 1e-4, 40.0, 600.0) - 1e-4 / 40.0).abs() < 1e-18);
        assert_eq!(lr_at(40.0, 1e-4, 40.0, 600.0), 1e-4);
        assert!(lr_at(600.0, 1e-4, 40.0, 600.0).abs() < 1e-18);
        assert!((lr_at(320.0, 1e-4, 40.0, 600.0) - 0.5e-4).abs() < 1e-12);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Tensor::<f64>::vector(&[3.0, 4.0]), Tensor::vector(&[12.0])];
        let pre = clip_global_norm(&mut g, 1.0);
        assert!((pre - 13.0).abs() < 1e-12);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exempt_params_only_move_by_gradient() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::vector(&[1.0, -2.0]), ParamRole::Weight);
        let b = store.add("b", Tensor::vector(&[1.0, -2.0]), ParamRole::Bias);
        let mut opt = AdamW::new(AdamWConfig::default(), &store, vec![w, b]);
        let zero = vec![Tensor::zeros(&[2]), Tensor::zeros(&[2])];
        opt.apply(&mut store, &zero, 0.1).unwrap();
        assert_eq!(store.get(b).data(), &[1.0, -2.0]);
        let expect = 1.0 - 0.1 * 0.05;
        assert!((store.get(w).data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn first_step_has_unit_magnitude() {
        let mut store = ParamStore::<f64>::new();
        let b = store.add("b", Tensor::vector(&[0.0, 0.0]), ParamRole::Bias);
        let mut opt = AdamW::new(AdamWConfig::default(), &store, vec![b]);
        opt.apply(&mut store, &[Tensor::vector(&[0.3, -5.0])], 0.01).unwrap();
        let p = store.get(b).data();
        assert!((p[0] + 0.01).abs() < 1e-9 && (p[1] - 0.01).abs() < 1e-9);
    }
}
