//! Named parameters, layer descriptions and graph binding.
//!
//! Layers are plain descriptions (parameter names plus hyper-parameters). The
//! values live in a [`ParamStore`]; a [`Binder`] copies the values a forward
//! pass touches into a [`Graph`] as leaves and remembers which leaf belongs
//! to which name so gradients can be collected afterwards.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform with variance `2 / fan_in`.
    He { fan_in: usize },
    /// Uniform with variance `1 / fan_in`.
    Lecun { fan_in: usize },
    /// He initialisation scaled down by a constant factor.
    Small { fan_in: usize, factor: f64 },
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Parameter values keyed by name; iteration order is the name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Draws every parameter from `specs` with a generator seeded by `seed`.
    /// Specs are visited in name order so the result is independent of the
    /// order the network listed them.
    pub fn initialize(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sorted: Vec<&ParamSpec> = specs.iter().collect();
        sorted.sort_by(|a, b| a.name.cmp(&b.name));
        let mut params = BTreeMap::new();
        for spec in sorted {
            let n: usize = spec.shape.iter().product();
            let bound = match spec.init {
                Init::He { fan_in } => (6.0 / fan_in as f64).sqrt(),
                Init::Lecun { fan_in } => (3.0 / fan_in as f64).sqrt(),
                Init::Small { fan_in, factor } => factor * (6.0 / fan_in as f64).sqrt(),
                Init::Zeros => 0.0,
            };
            let data = if bound == 0.0 {
                vec![0.0; n]
            } else {
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            };
            params.insert(spec.name.clone(), Tensor::from_vec(&spec.shape, data).expect("spec shape"));
        }
        ParamStore { params }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Copy without the parameters whose names start with `prefix`.
    pub fn without_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| !k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Every spec must be present with a matching shape.
    pub fn check(&self, specs: &[ParamSpec]) -> Result<()> {
        for s in specs {
            match self.params.get(&s.name) {
                None => return Err(Error::invalid(format!("missing parameter {:?}", s.name))),
                Some(t) if t.shape() != s.shape.as_slice() => {
                    return Err(Error::invalid(format!(
                        "parameter {:?} has shape {:?}, expected {:?}",
                        s.name,
                        t.shape(),
                        s.shape
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Sum of squared values of parameters under `prefix`.
    pub fn squared_norm(&self, prefix: &str) -> f64 {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum()
    }
}

/// Binds parameters into a graph on first use.
pub struct Binder<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: HashMap<String, Var>,
    trainable: bool,
}

impl<'a> Binder<'a> {
    /// `trainable` decides whether parameters become gradient leaves.
    pub fn new(store: &'a ParamStore, trainable: bool) -> Self {
        Binder {
            graph: Graph::new(),
            store,
            bound: HashMap::new(),
            trainable,
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self
            .store
            .get(name)
            .ok_or_else(|| Error::invalid(format!("parameter {name:?} is not loaded")))?
            .clone();
        let v = if self.trainable {
            self.graph.leaf(t)
        } else {
            self.graph.constant(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every bound parameter, keyed by name.
    pub fn collect(&self, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, &v) in &self.bound {
            let g = grads
                .take(v)
                .unwrap_or_else(|| Tensor::zeros(self.graph.value(v).shape()));
            out.insert(name.clone(), g);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: String,
    pub bias: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Same-padded convolution (`pad = kernel / 2`).
    pub fn new(name: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        Conv2d {
            weight: format!("{name}.weight"),
            bias: format!("{name}.bias"),
            c_in,
            c_out,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    pub fn specs_with(&self, init: Init, out: &mut Vec<ParamSpec>) {
        out.push(ParamSpec {
            name: self.weight.clone(),
            shape: vec![self.c_out, self.c_in, self.kernel, self.kernel],
            init,
        });
        out.push(ParamSpec {
            name: self.bias.clone(),
            shape: vec![self.c_out],
            init: Init::Zeros,
        });
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.specs_with(Init::He { fan_in: self.fan_in() }, out)
    }

    pub fn forward(&self, b: &mut Binder, x: Var) -> Result<Var> {
        let w = b.param(&self.weight)?;
        let bias = b.param(&self.bias)?;
        b.graph.conv2d(x, w, Some(bias), self.stride, self.pad)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub n_in: usize,
    pub n_out: usize,
}

impl Linear {
    pub fn new(name: &str, n_in: usize, n_out: usize) -> Self {
        Linear {
            weight: format!("{name}.weight"),
            bias: format!("{name}.bias"),
            n_in,
            n_out,
        }
    }

    pub fn specs_with(&self, init: Init, out: &mut Vec<ParamSpec>) {
        out.push(ParamSpec {
            name: self.weight.clone(),
            shape: vec![self.n_out, self.n_in],
            init,
        });
        out.push(ParamSpec {
            name: self.bias.clone(),
            shape: vec![self.n_out],
            init: Init::Zeros,
        });
    }

    pub fn forward(&self, b: &mut Binder, x: Var) -> Result<Var> {
        let w = b.param(&self.weight)?;
        let bias = b.param(&self.bias)?;
        b.graph.linear(x, w, bias)
    }
}
