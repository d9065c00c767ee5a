//! Named parameter storage shared by models, optimizers and checkpoints.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::scalar::Scalar;
use crate::TensorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param<S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<S>,
    pub grad: Vec<S>,
    pub trainable: bool,
}

impl<S: Scalar> Param<S> {
    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Weight initialisation schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    /// He-normal with the given fan-in, scaled by `gain`.
    KaimingNormal { fan_in: usize, gain: f64 },
    /// `U(-b, b)` with `b = 1 / sqrt(fan_in)`.
    FanInUniform { fan_in: usize },
    /// Truncated-free normal with explicit std.
    Normal { std: f64 },
}

/// Ordered, name-addressable collection of trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: BTreeMap::new() }
    }

    pub fn add<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let n: usize = shape.iter().product();
        let value: Vec<S> = match init {
            Init::Zeros => vec![S::zero(); n],
            Init::Ones => vec![S::one(); n],
            Init::Constant(c) => vec![S::of(c); n],
            Init::KaimingNormal { fan_in, gain } => {
                let std = gain * (2.0 / fan_in.max(1) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| S::of(normal.sample(rng))).collect()
            }
            Init::FanInUniform { fan_in } => {
                let b = 1.0 / (fan_in.max(1) as f64).sqrt();
                let u = Uniform::new_inclusive(-b, b).expect("valid bounds");
                (0..n).map(|_| S::of(u.sample(rng))).collect()
            }
            Init::Normal { std } => {
                let normal = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| S::of(normal.sample(rng))).collect()
            }
        };
        self.insert(name, shape.to_vec(), value)
    }

    /// Adds a parameter with explicit values.
    pub fn insert(&mut self, name: String, shape: Vec<usize>, value: Vec<S>) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), value.len(), "value/shape mismatch for {name}");
        let id = ParamId(self.params.len());
        let grad = vec![S::zero(); value.len()];
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, shape, value, grad, trainable: true });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<S> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<S>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = S::zero());
        }
    }

    /// Marks every parameter whose name starts with `prefix` as (un)trainable.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    /// SHA-256 over names, shapes and little-endian values of every tensor (optionally
    /// restricted to a name prefix).
    pub fn content_hash_prefix(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            h.update(p.name.as_bytes());
            for d in &p.shape {
                h.update((*d as u64).to_le_bytes());
            }
            buf.clear();
            S::write_le(&p.value, &mut buf);
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }

    pub fn content_hash(&self) -> String {
        self.content_hash_prefix("")
    }

    /// Overwrites values from another store, matching by name.
    ///
    /// Every tensor in `src` must exist here with the same shape unless
    /// `allow_missing` is set, in which case names absent here are skipped.
    pub fn load_from(&mut self, src: &ParamStore<S>, allow_missing: bool) -> Result<usize, TensorError> {
        let mut copied = 0;
        for p in &src.params {
            match self.by_name.get(&p.name) {
                Some(id) => {
                    let dst = &mut self.params[id.0];
                    if dst.shape != p.shape {
                        return Err(TensorError::Shape(format!(
                            "parameter {} has shape {:?}, source has {:?}",
                            p.name, dst.shape, p.shape
                        )));
                    }
                    dst.value.clone_from(&p.value);
                    copied += 1;
                }
                None if allow_missing => {}
                None => {
                    return Err(TensorError::Shape(format!("unknown parameter {}", p.name)));
                }
            }
        }
        Ok(copied)
    }

    /// Snapshot of all values, in store order.
    pub fn snapshot(&self) -> Vec<Vec<S>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<S>]) {
        assert_eq!(snapshot.len(), self.params.len(), "snapshot from a different store");
        for (p, v) in self.params.iter_mut().zip(snapshot) {
            p.value.clone_from(v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn same_seed_same_hash() {
        let build = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ps = ParamStore::<f32>::new();
            ps.add("a.w", &[4, 3], Init::KaimingNormal { fan_in: 3, gain: 1.0 }, &mut rng);
            ps.add("a.b", &[4], Init::Zeros, &mut rng);
            ps.content_hash()
        };
        assert_eq!(build(1), build(1));
        assert_ne!(build(1), build(2));
    }

    #[test]
    fn prefix_hash_and_freeze() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamStore::<f64>::new();
        let a = ps.add("sr.w", &[2], Init::Normal { std: 1.0 }, &mut rng);
        ps.add("head.w", &[2], Init::Normal { std: 1.0 }, &mut rng);
        let before = ps.content_hash_prefix("sr.");
        ps.get_mut(ps.id("head.w").unwrap()).value[0] = 9.0;
        assert_eq!(before, ps.content_hash_prefix("sr."));
        assert_eq!(ps.set_trainable_prefix("sr.", false), 1);
        assert!(!ps.get(a).trainable);
    }
}
