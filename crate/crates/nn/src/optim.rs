//! AdamW with cosine learning-rate annealing and global-norm clipping.

use crate::error::{NnError, Result};
use crate::real::Real;
use crate::tensor::ParamSet;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            lr_min: 1e-7,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return Err(NnError::Config("need 0 <= lr_min <= lr, lr > 0".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(NnError::Config("betas must be in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(NnError::Config("eps must be positive and weight decay non-negative".into()));
        }
        Ok(())
    }
}

/// Cosine annealing from `lr` at step 0 to `lr_min` at `total`.
pub fn cosine_lr(lr: f64, lr_min: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr;
    }
    let frac = (step.min(total) as f64) / total as f64;
    lr_min + 0.5 * (lr - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Rescales `grads` in place so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut ParamSet<T>, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(T::of(max_norm / norm));
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
    pub step: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &ParamSet<T>, cfg: AdamWConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        })
    }

    /// One update at learning rate `lr`, decoupled weight decay included.
    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>, lr: f64) -> Result<()> {
        if !params.same_layout(grads) || !params.same_layout(&self.m) {
            return Err(NnError::Shape("optimizer state does not match the parameters".into()));
        }
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let step_size = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(c.eps);
        let decay = T::of(1.0 - lr * c.weight_decay);
        for (k, p) in params.params.iter_mut().enumerate() {
            let g = &grads.params[k].data;
            let m = &mut self.m.params[k].data;
            let v = &mut self.v.params[k].data;
            for i in 0..p.data.len() {
                m[i] = b1 * m[i] + one_b1 * g[i];
                v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                let denom = (v[i] * inv_bc2).sqrt() + eps;
                p.data[i] = p.data[i] * decay - step_size * m[i] / denom;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(5e-5, 1e-7, 0, 100), 5e-5);
        assert!((cosine_lr(5e-5, 1e-7, 100, 100) - 1e-7).abs() < 1e-20);
        assert!((cosine_lr(1.0, 0.0, 50, 100) - 0.5).abs() < 1e-12);
        assert_eq!(cosine_lr(1.0, 0.0, 7, 0), 1.0);
    }

    #[test]
    fn clipping() {
        let mut g = ParamSet::<f64>::default();
        g.push("a", vec![2], vec![3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut g, 10.0), 5.0);
        assert_eq!(g.get(0), &[3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut p = ParamSet::<f64>::default();
        p.push("w", vec![3], vec![1.0, -2.0, 0.5]);
        let mut g = p.zeros_like();
        g.get_mut(0).copy_from_slice(&[0.3, -7.0, 0.0]);
        let mut opt = AdamW::new(&p, AdamWConfig::default()).unwrap();
        opt.update(&mut p, &g, 1e-3).unwrap();
        let w = p.get(0);
        assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((w[1] - (-2.0 + 1e-3)).abs() < 1e-9);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamSet::<f64>::default();
        p.push("w", vec![2], vec![3.0, -4.0]);
        let mut opt = AdamW::new(
            &p,
            AdamWConfig {
                weight_decay: 0.01,
                ..AdamWConfig::default()
            },
        )
        .unwrap();
        for _ in 0..2000 {
            let mut g = p.clone();
            g.scale(2.0);
            opt.update(&mut p, &g, 0.05).unwrap();
        }
        assert!(p.norm() < 1e-2, "{:?}", p.get(0));
    }
}
