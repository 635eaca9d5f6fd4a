use std::collections::HashMap;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub requires_grad: bool,
}

/// Named parameters in declaration order. Names are hierarchical and
/// dot-separated, e.g. `dec1.block0.casa.dina.q_w`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    params: IndexMap<String, Param<T>>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            params: IndexMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        self.params.insert(
            name,
            Param {
                value,
                requires_grad: true,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn set_requires_grad(&mut self, name: &str, flag: bool) -> Result<()> {
        self.params
            .get_mut(name)
            .map(|p| p.requires_grad = flag)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Zeroes every parameter whose name starts with `prefix`. Returns how many matched.
    pub fn zero_prefix(&mut self, prefix: &str) -> usize {
        let mut hit = 0;
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.value.fill(T::zero());
                hit += 1;
            }
        }
        hit
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            requires_grad: p.requires_grad,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Registers every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bindings {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| {
                let v = if p.requires_grad {
                    g.param(name.clone(), p.value.clone())
                } else {
                    g.constant(p.value.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bindings { vars }
    }
}

/// Graph variables for the parameters of one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    vars: HashMap<String, Var>,
}

impl Bindings {
    pub fn root(&self) -> Scope<'_> {
        Scope {
            bindings: self,
            prefix: String::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }
}

/// Name prefix into a set of [`Bindings`].
#[derive(Debug, Clone)]
pub struct Scope<'a> {
    bindings: &'a Bindings,
    prefix: String,
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<'a> Scope<'a> {
    pub fn sub(&self, name: &str) -> Scope<'a> {
        Scope {
            bindings: self.bindings,
            prefix: join(&self.prefix, name),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        let full = join(&self.prefix, name);
        self.bindings
            .get(&full)
            .ok_or(Error::UnknownParameter(full))
    }

    /// For parameters whose presence depends on configuration (biases).
    pub fn opt(&self, name: &str) -> Option<Var> {
        self.bindings.get(&join(&self.prefix, name))
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }
}

/// Declares parameters under a name prefix with seeded initialization.
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_, T> {
        ParamBuilder {
            prefix: join(&self.prefix, name),
            store: self.store,
            rng: self.rng,
        }
    }

    /// Truncated-normal weights with [`INIT_STD`].
    pub fn weight(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        let t = Tensor::trunc_normal(shape, INIT_STD, self.rng);
        self.store.insert(join(&self.prefix, name), t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.store
            .insert(join(&self.prefix, name), Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.store
            .insert(join(&self.prefix, name), Tensor::ones(shape))
    }
}

/// Runs a declaration closure into a fresh store seeded by `seed`.
pub fn declare<T: Scalar>(
    seed: u64,
    f: impl FnOnce(&mut ParamBuilder<'_, T>) -> Result<()>,
) -> Result<ParamStore<T>> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    f(&mut ParamBuilder::new(&mut store, &mut rng))?;
    Ok(store)
}
