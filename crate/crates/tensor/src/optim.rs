//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

pub struct AdamW<S> {
    cfg: AdamWConfig,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    t: u64,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(cfg: AdamWConfig, store: &ParamStore<S>) -> Self {
        let m = store.iter().map(|(_, p)| vec![S::zero(); p.numel()]).collect();
        let v = store.iter().map(|(_, p)| vec![S::zero(); p.numel()]).collect();
        AdamW { cfg, m, v, t: 0 }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update from the store's accumulated gradients. Frozen parameters are
    /// skipped; decay is not applied to 1-D tensors (biases, norm affines).
    pub fn step(&mut self, store: &mut ParamStore<S>) {
        self.t += 1;
        let c = self.cfg;
        let lr = S::of(c.lr);
        if c.lr == 0.0 {
            return;
        }
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let bc1 = S::of(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = S::of(1.0 - c.beta2.powi(self.t as i32));
        let eps = S::of(c.eps);
        for (id, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let decay = if p.shape.len() > 1 { S::of(c.lr * c.weight_decay) } else { S::zero() };
            for j in 0..p.value.len() {
                let g = p.grad[j];
                m[j] = b1 * m[j] + (S::one() - b1) * g;
                v[j] = b2 * v[j] + (S::one() - b2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p.value[j] = p.value[j] - decay * p.value[j] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;
    use rand::SeedableRng;

    #[test]
    fn minimises_quadratic() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamStore::<f64>::new();
        let id = ps.add("x", &[3], Init::Constant(5.0), &mut rng);
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() }, &ps);
        for _ in 0..500 {
            ps.zero_grad();
            let p = ps.get_mut(id);
            for j in 0..3 {
                p.grad[j] = 2.0 * (p.value[j] - 1.0);
            }
            opt.step(&mut ps);
        }
        for v in &ps.get(id).value {
            assert!((v - 1.0).abs() < 1e-2, "{v}");
        }
    }

    #[test]
    fn zero_lr_keeps_weights() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamStore::<f32>::new();
        ps.add("w", &[2, 2], Init::Normal { std: 1.0 }, &mut rng);
        let before = ps.content_hash();
        let mut opt = AdamW::new(AdamWConfig { lr: 0.0, ..Default::default() }, &ps);
        ps.iter_mut().for_each(|(_, p)| p.grad.iter_mut().for_each(|g| *g = 1.0));
        opt.step(&mut ps);
        assert_eq!(before, ps.content_hash());
    }
}
