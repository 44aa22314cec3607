//! Named parameter tensors and their initialisation.

use std::collections::{BTreeMap, HashMap};

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::arg_err;
use crate::{Real, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(−1/√fan_in, 1/√fan_in)`.
    FanIn(usize),
    Zeros,
    Ones,
    Const(f64),
}

impl Init {
    /// Largest magnitude this rule can produce.
    pub fn bound(&self) -> f64 {
        match *self {
            Init::FanIn(f) => 1.0 / (f.max(1) as f64).sqrt(),
            Init::Zeros => 0.0,
            Init::Ones => 1.0,
            Init::Const(v) => v.abs(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    /// A weight with fan-in init.
    pub fn weight(name: impl Into<String>, shape: &[usize], fan_in: usize) -> Self {
        Self::new(name, shape, Init::FanIn(fan_in))
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, shape, Init::Zeros)
    }
}

/// Ordered map from parameter name to tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, ArrayD<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    /// Materialises `specs` in order, drawing from `rng`.
    pub fn from_specs(specs: &[ParamSpec], rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut store = Self::new();
        for spec in specs {
            let value = match spec.init {
                Init::FanIn(_) => {
                    let b = spec.init.bound();
                    ArrayD::from_shape_fn(IxDyn(&spec.shape), |_| T::lit(rng.gen_range(-b..b)))
                }
                Init::Zeros => ArrayD::zeros(IxDyn(&spec.shape)),
                Init::Ones => ArrayD::ones(IxDyn(&spec.shape)),
                Init::Const(v) => ArrayD::from_elem(IxDyn(&spec.shape), T::lit(v)),
            };
            if store.tensors.insert(spec.name.clone(), value).is_some() {
                return Err(arg_err(format!("duplicate parameter `{}`", spec.name)));
            }
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<T>) -> Option<ArrayD<T>> {
        self.tensors.insert(name.into(), value)
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<T>> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&ArrayD<T>> {
        self.get(name)
            .ok_or_else(|| arg_err(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(ArrayD::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), ArrayD::zeros(v.raw_dim())))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.mapv(|x| U::lit(x.as_f64()))))
                .collect(),
        }
    }

    /// Enters every tensor into `g`; names accepted by `trainable` become
    /// gradient-tracked leaves, the rest constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(name, value)| {
                let v = if trainable(name) {
                    g.leaf(value.clone())
                } else {
                    g.constant(value.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Parameter names resolved to graph nodes.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| arg_err(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn init_is_seeded_and_bounded() {
        let specs = vec![
            ParamSpec::weight("a", &[3, 4], 3),
            ParamSpec::zeros("b", &[4]),
            ParamSpec::new("c", &[], Init::Const(1.0)),
        ];
        let s1 = ParamStore::<f32>::from_specs(&specs, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let s2 = ParamStore::<f32>::from_specs(&specs, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(s1, s2);
        let bound = 1.0 / 3f32.sqrt();
        assert!(s1.get("a").unwrap().iter().all(|v| v.abs() <= bound));
        assert!(s1.get("b").unwrap().iter().all(|&v| v == 0.0));
        assert_eq!(s1.get("c").unwrap().iter().next(), Some(&1.0));
        assert_eq!(s1.num_elements(), 12 + 4 + 1);
    }

    #[test]
    fn duplicate_names_rejected() {
        let specs = vec![ParamSpec::zeros("a", &[1]), ParamSpec::zeros("a", &[2])];
        assert!(ParamStore::<f64>::from_specs(&specs, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
