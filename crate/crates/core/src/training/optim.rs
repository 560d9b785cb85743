use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::model::ParamStore;
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T: Real> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// One parameter's share of an optimizer step.
pub struct Update<'a, T: Real> {
    pub name: &'a str,
    pub param: &'a mut [T],
    pub grad: &'a [T],
    pub decay: bool,
}

/// AdamW with decoupled weight decay and bias-corrected moments.
///
/// A coordinate whose gradient has always been zero keeps zero moments, so
/// a zero weight there stays exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T: Real> {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments<T>>,
}

/// Weight decay applies to matrices (embeddings included), not to biases or gains.
pub fn decays(shape: &[usize]) -> bool {
    shape.len() >= 2
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn from_parts(config: AdamWConfig, step: u64, moments: BTreeMap<String, Moments<T>>) -> Self {
        AdamW {
            config,
            step,
            moments,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments<T>> {
        &self.moments
    }

    pub fn moments_of(&self, name: &str) -> Option<&Moments<T>> {
        self.moments.get(name)
    }

    /// Advances the step counter and applies every update at rate `lr`.
    pub fn step<'a>(&mut self, lr: f64, updates: impl IntoIterator<Item = Update<'a, T>>) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = T::of(1.0 - c.beta1.powi(t));
        let bc2 = T::of(1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let eps = T::of(c.eps);
        let lr_t = T::of(lr);
        for u in updates {
            ensure!(
                u.param.len() == u.grad.len(),
                "gradient for {} has {} entries, parameter has {}",
                u.name,
                u.grad.len(),
                u.param.len()
            );
            let n = u.param.len();
            let mo = self.moments.entry(u.name.to_string()).or_insert_with(|| Moments {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
            });
            ensure!(mo.m.len() == n, "optimizer state for {} has the wrong size", u.name);
            let decay = if u.decay { T::of(lr * c.weight_decay) } else { T::zero() };
            for i in 0..n {
                let g = u.grad[i];
                let m = b1 * mo.m[i] + one_b1 * g;
                let v = b2 * mo.v[i] + one_b2 * g * g;
                mo.m[i] = m;
                mo.v[i] = v;
                let mhat = m / bc1;
                let vhat = v / bc2;
                let w = u.param[i];
                u.param[i] = w - decay * w - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Steps every parameter of `params` that has an entry in `grads`.
    pub fn step_store(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Vec<T>>, lr: f64) -> Result<()> {
        let updates = params.iter_mut().filter_map(|(name, t)| {
            grads.get(name).map(|g| {
                let decay = decays(t.shape());
                Update {
                    name: name.as_str(),
                    param: t.data_mut(),
                    grad: g.as_slice(),
                    decay,
                }
            })
        });
        let updates: Vec<_> = updates.collect();
        self.step(lr, updates)
    }
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut BTreeMap<String, Vec<T>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.iter())
        .map(|x| x.f64() * x.f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        for g in grads.values_mut() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_update(w: &mut [f64], g: &[f64], opt: &mut AdamW<f64>, lr: f64, decay: bool) {
        opt.step(
            lr,
            [Update {
                name: "w",
                param: w,
                grad: g,
                decay,
            }],
        )
        .unwrap();
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        let mut w = vec![0.3, -1.2];
        one_update(&mut w, &[0.0, 0.0], &mut opt, 0.1, true);
        assert_eq!(w, vec![0.3, -1.2]);
    }

    #[test]
    fn single_step_by_hand() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut w = vec![1.0];
        one_update(&mut w, &[1.0], &mut opt, 0.1, true);
        // m̂ = v̂ = 1: w − lr·λ·w − lr·1/(1+ε)
        let expect = 1.0 - 0.1 * 0.1 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((w[0] - expect).abs() < 1e-12);
        assert!((w[0] - 0.89).abs() < 1e-7);
    }

    #[test]
    fn zero_weight_with_zero_grad_stays_zero() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut w = vec![0.0, 0.5];
        for _ in 0..50 {
            one_update(&mut w, &[0.0, 0.2], &mut opt, 0.01, true);
        }
        assert_eq!(w[0], 0.0);
        let mo = opt.moments_of("w").unwrap();
        assert_eq!((mo.m[0], mo.v[0]), (0.0, 0.0));
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), vec![3.0f64, 4.0]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g["a"][0] - 0.6).abs() < 1e-15 && (g["a"][1] - 0.8).abs() < 1e-15);
    }
}
