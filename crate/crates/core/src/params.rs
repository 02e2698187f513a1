//! Named parameter storage and initialisation.
//!
//! Every tensor is initialised from its own RNG stream derived from
//! `(seed, name)`, so two models that share a parameter name and shape start
//! from bitwise-identical values regardless of what else they contain.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Initialisation rule for a new parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    /// Uniform in `[-1/√fan_in, 1/√fan_in]`, fan-in being the leading extent.
    FanIn,
    /// Row `r`, column `n` holds `ln(n + 1)`, so that `-exp(·) = -(n + 1)`.
    NegRangeLog,
    /// `softplus⁻¹(dt)` with `dt` log-uniform in `[lo, hi]`.
    InverseSoftplusLogUniform(f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, ParamId>,
    seed: u64,
}

/// RNG stream for one named parameter.
pub fn name_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Registers `name`; panics on a duplicate since that is a model wiring bug.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter `{name}`"
        );
        let mut rng = name_rng(self.seed, &name);
        let cols = shape.iter().skip(1).product::<usize>().max(1);
        let t = Tensor::from_fn(shape.to_vec(), |i| {
            T::of(match init {
                Init::Zeros => 0.0,
                Init::Ones => 1.0,
                Init::Constant(c) => c,
                Init::Uniform(b) => rng.random_range(-b..=b),
                Init::FanIn => {
                    let b = 1.0 / (shape[0] as f64).sqrt();
                    rng.random_range(-b..=b)
                }
                Init::NegRangeLog => ((i % cols) as f64 + 1.0).ln(),
                Init::InverseSoftplusLogUniform(lo, hi) => {
                    let u: f64 = rng.random();
                    let dt = (lo.ln() + u * (hi.ln() - lo.ln())).exp();
                    crate::numerics::softplus_inverse(dt)
                }
            })
        });
        self.insert(name, t)
    }

    fn insert(&mut self, name: String, t: Tensor<T>) -> ParamId {
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(t);
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.ids()
            .map(move |id| (id, self.names[id.0].as_str(), &self.tensors[id.0]))
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces a tensor's contents, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.tensors[id.0].shape() {
            return Err(crate::error::shape_err(
                "ParamStore::set",
                self.tensors[id.0].shape(),
                value.shape(),
            ));
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    /// Copies every same-named, same-shaped tensor from `other`.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for (name, t) in other.names.iter().zip(&other.tensors) {
            let id = self
                .id(name)
                .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
            self.set(id, t.clone())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::softplus;

    #[test]
    fn init_is_keyed_by_name_not_order() {
        let mut a = ParamStore::<f64>::new(5);
        a.add("x", &[3, 4], Init::FanIn);
        let ya = a.add("y", &[4, 2], Init::FanIn);
        let mut b = ParamStore::<f64>::new(5);
        let yb = b.add("y", &[4, 2], Init::FanIn);
        assert_eq!(a.get(ya), b.get(yb));
        let mut c = ParamStore::<f64>::new(6);
        let yc = c.add("y", &[4, 2], Init::FanIn);
        assert_ne!(a.get(ya), c.get(yc));
    }

    #[test]
    fn structured_inits() {
        let mut s = ParamStore::<f64>::new(0);
        let a = s.add("a", &[2, 3], Init::NegRangeLog);
        let neg: Vec<f64> = s.get(a).data().iter().map(|v| -v.exp()).collect();
        assert!(neg
            .iter()
            .zip([-1.0, -2.0, -3.0, -1.0, -2.0, -3.0])
            .all(|(x, y)| (x - y).abs() < 1e-12));
        let d = s.add("d", &[64], Init::InverseSoftplusLogUniform(1e-3, 1e-1));
        for &v in s.get(d).data() {
            let dt = softplus(v);
            assert!((1e-3 - 1e-12..=1e-1 + 1e-12).contains(&dt), "{dt}");
        }
        assert_eq!(s.count(), 6 + 64);
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_panic() {
        let mut s = ParamStore::<f32>::new(0);
        s.add("w", &[1], Init::Zeros);
        s.add("w", &[1], Init::Zeros);
    }
}
