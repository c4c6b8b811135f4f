use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::store::TensorStore;
use crate::tensor::{Graph, Real, Tensor, Var};

use super::NetError;

/// How a parameter tensor is initialised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `+-sqrt(6 / fan_in)`.
    He,
    /// Uniform in `+-sqrt(3 / fan_in)`, used for output heads.
    LeCun,
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Named parameter tensors, ordered by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { tensors: BTreeMap::new() }
    }

    pub fn initialize(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for s in specs {
            let fan_in: usize = s.shape.iter().skip(1).product::<usize>().max(1);
            let bound = match s.init {
                Init::He => (6.0 / fan_in as f64).sqrt(),
                Init::LeCun => (3.0 / fan_in as f64).sqrt(),
                Init::Zeros => 0.0,
            };
            let t = Tensor::from_fn(&s.shape, |_| {
                if bound == 0.0 {
                    T::zero()
                } else {
                    T::from_f64_lossy(rng.gen_range(-bound..bound))
                }
            });
            tensors.insert(s.name.clone(), t);
        }
        ParamSet { tensors }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Checks names and shapes against the expected layout.
    pub fn check(&self, specs: &[ParamSpec]) -> Result<(), NetError> {
        for s in specs {
            match self.tensors.get(&s.name) {
                None => return Err(NetError::MissingParam(s.name.clone())),
                Some(t) if t.shape() != s.shape.as_slice() => {
                    return Err(NetError::Config(format!("parameter {} has shape {:?}, expected {:?}", s.name, t.shape(), s.shape)))
                }
                Some(_) => {}
            }
        }
        if self.tensors.len() != specs.len() {
            let extra: Vec<_> = self.tensors.keys().filter(|k| !specs.iter().any(|s| &s.name == *k)).cloned().collect();
            return Err(NetError::Config(format!("unexpected parameters {extra:?}")));
        }
        Ok(())
    }

    /// Records every tensor on the graph as a leaf.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundParams {
        let vars = self.tensors.iter().map(|(k, t)| (k.clone(), g.leaf(t.clone(), trainable))).collect();
        BoundParams { vars }
    }

    pub fn write_into(&self, store: &mut TensorStore, prefix: &str) {
        for (k, t) in &self.tensors {
            store.insert(format!("{prefix}{k}"), t);
        }
    }

    pub fn read_from(store: &TensorStore, prefix: &str) -> Self {
        let tensors = store
            .names()
            .filter_map(|n| n.strip_prefix(prefix).map(|s| (s.to_string(), store.get::<T>(n).expect("listed name"))))
            .collect();
        ParamSet { tensors }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet { tensors: self.tensors.iter().map(|(k, t)| (k.clone(), t.cast())).collect() }
    }
}

/// Parameter name to graph node.
#[derive(Debug, Clone, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var, NetError> {
        self.vars.get(name).copied().ok_or_else(|| NetError::MissingParam(name.to_string()))
    }

    pub fn conv(&self, prefix: &str) -> Result<ConvVars, NetError> {
        Ok(ConvVars { weight: self.var(&format!("{prefix}.weight"))?, bias: self.var(&format!("{prefix}.bias"))? })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Weight and bias nodes of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
}
