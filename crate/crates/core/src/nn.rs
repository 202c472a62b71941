//! Named parameters and the small layer vocabulary every block is built from.
//!
//! Parameter values live in a [`ParamStore`] as plain vectors so a model can
//! be shared across threads; each forward pass creates a [`Binding`] that
//! lazily turns the parameters it touches into tape leaves.

use std::cell::RefCell;
use std::collections::HashMap;

use hoi_autodiff::Tensor;
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HoiError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    /// Whether decoupled weight decay applies (matrices yes, gains/biases no).
    pub decay: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], values: Vec<f64>, decay: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(HoiError::DuplicateParam(name.to_string()));
        }
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let id = self.entries.len();
        self.index.insert(name.to_string(), id);
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            values,
            decay,
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }
}

/// Per-pass view of a [`ParamStore`] as tensors.
///
/// With `track` set, each parameter becomes a grad-requiring leaf the first
/// time it is requested and the same leaf is returned afterwards.
pub struct Binding<'a> {
    store: &'a ParamStore,
    leaves: RefCell<Vec<Option<Tensor>>>,
    track: bool,
}

impl<'a> Binding<'a> {
    pub fn new(store: &'a ParamStore, track: bool) -> Self {
        Binding {
            store,
            leaves: RefCell::new(vec![None; store.len()]),
            track,
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn get(&self, id: ParamId) -> Tensor {
        let mut leaves = self.leaves.borrow_mut();
        leaves[id.0]
            .get_or_insert_with(|| {
                let e = &self.store.entries[id.0];
                let t = if self.track {
                    Tensor::param(e.values.clone(), &e.shape)
                } else {
                    Tensor::new(e.values.clone(), &e.shape)
                };
                t.expect("store entries are shape-consistent")
            })
            .clone()
    }

    /// Accumulated gradients, indexed like the store. Parameters never
    /// touched in this pass (or unreachable from the loss) yield `None`.
    pub fn grads(&self) -> Vec<Option<Vec<f64>>> {
        self.leaves
            .borrow()
            .iter()
            .map(|l| l.as_ref().and_then(|t| t.grad()))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` with fan-in the first dimension.
    Uniform,
    /// Uniform, then rescaled so the largest singular value is at most the bound.
    Spectral(f64),
    Zeros,
    Ones,
    Normal(f64),
}

pub fn spectral_norm(values: &[f64], rows: usize, cols: usize) -> f64 {
    let m = DMatrix::from_row_slice(rows, cols, values);
    m.singular_values().max()
}

fn init_values(rng: &mut ChaCha8Rng, shape: &[usize], init: Init) -> Vec<f64> {
    let n: usize = shape.iter().product();
    match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Normal(std) => {
            let normal = rand_distr::Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| rng.sample(normal)).collect()
        }
        Init::Uniform | Init::Spectral(_) => {
            let fan_in = shape.first().copied().unwrap_or(1).max(1);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            if let Init::Spectral(max) = init {
                let rows = shape[0];
                let sigma = spectral_norm(&v, rows, n / rows.max(1));
                if sigma > max {
                    v.iter_mut().for_each(|x| *x *= max / sigma);
                }
            }
            v
        }
    }
}

/// Registers parameters under a dotted name prefix.
pub struct Builder<'s> {
    store: &'s mut ParamStore,
    rng: &'s mut ChaCha8Rng,
    prefix: String,
}

impl<'s> Builder<'s> {
    pub fn new(store: &'s mut ParamStore, rng: &'s mut ChaCha8Rng) -> Self {
        Builder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_> {
        let prefix = self.qualify(name);
        Builder {
            store: &mut *self.store,
            rng: &mut *self.rng,
            prefix,
        }
    }

    fn qualify(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Overwrites every value of an existing parameter.
    pub fn fill(&mut self, id: ParamId, value: f64) {
        self.store.entry_mut(id).values.fill(value);
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init, decay: bool) -> Result<ParamId> {
        let values = init_values(self.rng, shape, init);
        let full = self.qualify(name);
        self.store.add(&full, shape, values, decay)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(bd: &mut Builder, name: &str, in_dim: usize, out_dim: usize, bias: bool, init: Init) -> Result<Self> {
        let mut s = bd.sub(name);
        let w = s.param("w", &[in_dim, out_dim], init, true)?;
        let b = if bias { Some(s.param("b", &[out_dim], Init::Zeros, false)?) } else { None };
        Ok(Linear { w, b, in_dim, out_dim })
    }

    /// `x[.., in] -> x W + b`.
    pub fn forward(&self, p: &Binding, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&p.get(self.w))?;
        Ok(match self.b {
            Some(b) => y.add(&p.get(b))?,
            None => y,
        })
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(bd: &mut Builder, name: &str, dim: usize) -> Result<Self> {
        let mut s = bd.sub(name);
        Ok(LayerNorm {
            gain: s.param("gain", &[dim], Init::Ones, false)?,
            bias: s.param("bias", &[dim], Init::Zeros, false)?,
        })
    }

    pub fn forward(&self, p: &Binding, x: &Tensor) -> Result<Tensor> {
        Ok(x.layer_norm(&p.get(self.gain), &p.get(self.bias))?)
    }
}

/// Two-layer GELU network `Linear -> GELU -> Linear`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    /// `zero_out` zero-initialises the output layer so a residual branch
    /// built on it starts as the identity.
    pub fn new(bd: &mut Builder, name: &str, in_dim: usize, hidden: usize, out_dim: usize, zero_out: bool) -> Result<Self> {
        let mut s = bd.sub(name);
        let l1 = Linear::new(&mut s, "l1", in_dim, hidden, true, Init::Uniform)?;
        let l2 = Linear::new(&mut s, "l2", hidden, out_dim, true, if zero_out { Init::Zeros } else { Init::Uniform })?;
        Ok(FeedForward { l1, l2 })
    }

    pub fn forward(&self, p: &Binding, x: &Tensor) -> Result<Tensor> {
        self.l2.forward(p, &self.l1.forward(p, x)?.gelu())
    }
}
