//! Named parameter storage and per-pass binding into a [`Graph`].

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// All parameters of a model, addressed by [`ParamId`] and by dotted name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.to_string(),
            tensor,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Overwrites tensors from `(name, tensor)` pairs; every name and shape
    /// must match an existing parameter.
    pub fn load(&mut self, entries: impl IntoIterator<Item = (String, Tensor)>) -> Result<()> {
        for (name, t) in entries {
            let id = self
                .find(&name)
                .ok_or_else(|| Error::Config(alloc::format!("unknown parameter {name}")))?;
            let cur = &mut self.params[id.0].tensor;
            if cur.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load",
                    left: cur.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            *cur = t;
        }
        Ok(())
    }
}

/// Standard normal sample (Box–Muller).
pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
}

pub fn init_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * normal(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape is non-empty")
}

/// Xavier/Glorot uniform for a `fan_in × fan_out` weight.
pub fn init_xavier<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let a = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape is non-empty")
}

pub fn ones(cols: usize) -> Tensor {
    Tensor::new(vec![1, cols], vec![1.0; cols]).expect("shape is non-empty")
}

pub fn zeros_row(cols: usize) -> Tensor {
    Tensor::zeros(&[1, cols])
}

/// One forward (and optionally backward) pass over a [`ParamSet`].
///
/// Parameters are copied into the graph on first use; frozen ones enter as
/// constants so no gradient buffers are created for them.
pub struct Session<'p> {
    pub graph: Graph,
    params: &'p ParamSet,
    bound: Vec<Option<Var>>,
    pub training: bool,
    pub rng: ChaCha8Rng,
}

impl<'p> Session<'p> {
    pub fn new(params: &'p ParamSet, training: bool, rng: ChaCha8Rng) -> Self {
        Self {
            graph: Graph::new(),
            params,
            bound: vec![None; params.len()],
            training,
            rng,
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.params.get(id);
        let v = self.graph.leaf(p.tensor.clone(), p.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    /// Var bound for `id` in this pass, if it was used.
    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    /// Dropout that is a no-op outside training mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if self.training && p > 0.0 {
            self.graph.dropout(x, p, &mut self.rng)
        } else {
            x
        }
    }

    /// Gradients of bound trainable parameters after `graph.backward`.
    pub fn param_grads(&self) -> Vec<(ParamId, &[f64])> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.graph.grad(v).map(|g| (ParamId(i), g))
            })
            .collect()
    }
}
