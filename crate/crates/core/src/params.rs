//! Named parameter storage, tape binding, and initialization.
//!
//! Parameters live in a [`ParamStore`] in insertion order (the order is part
//! of the checkpoint format and of optimizer-state alignment). A [`Binding`]
//! registers store entries as tape leaves on first use — trainable bindings
//! request gradients, frozen bindings register constants — and remembers the
//! mapping so gradients can be collected by name after a backward pass.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::fnv1a64;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor under a unique name.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter name {name:?}")));
        }
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::Usage(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.tensors[i]),
            None => Err(Error::Usage(format!("unknown parameter {name:?}"))),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Iterates entries in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    /// Mutable iteration in insertion order, for optimizer updates.
    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter_mut())
    }

    /// Total scalar parameter count.
    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Content hash over names, shapes, and exact element bytes; any bit
    /// flip in any parameter changes it.
    pub fn content_hash(&self) -> u64 {
        let mut bytes = Vec::new();
        for (name, t) in self.iter() {
            bytes.extend_from_slice(name.as_bytes());
            bytes.push(0);
            for &d in t.shape() {
                bytes.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fnv1a64(&bytes)
    }
}

/// Connects a [`ParamStore`] to one [`Tape`], registering each parameter as
/// a leaf at most once per tape.
pub struct Binding<'a> {
    store: &'a ParamStore,
    trainable: bool,
    bound: BTreeMap<String, Var>,
}

impl<'a> Binding<'a> {
    /// Parameters registered through this binding accumulate gradients.
    pub fn trainable(store: &'a ParamStore) -> Self {
        Binding {
            store,
            trainable: true,
            bound: BTreeMap::new(),
        }
    }

    /// Parameters registered through this binding are constants; backward
    /// leaves them without gradient buffers.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Binding {
            store,
            trainable: false,
            bound: BTreeMap::new(),
        }
    }

    /// Tape variable for a named parameter, registering it on first use.
    pub fn var(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let mut tensor = self.store.get(name)?.clone();
        tensor.requires_grad = self.trainable;
        tensor.grad = None;
        let v = tape.leaf(tensor);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Collects accumulated gradients by parameter name. Parameters that
    /// never received a gradient (frozen, or unused by the loss) are absent.
    pub fn grads(&self, tape: &Tape) -> BTreeMap<String, Vec<f64>> {
        self.bound
            .iter()
            .filter_map(|(name, &v)| tape.grad(v).map(|g| (name.clone(), g.to_vec())))
            .collect()
    }

    /// Names bound on this tape so far.
    pub fn bound_names(&self) -> impl Iterator<Item = &str> {
        self.bound.keys().map(String::as_str)
    }
}

/// Uniform Glorot initialization over `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Result<Tensor> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    Tensor::new(&[rows, cols], data)
}

/// Rank-1 zero vector (bias initialization).
pub fn zeros_vec(d: usize) -> Result<Tensor> {
    Tensor::zeros(&[d])
}

/// Rank-1 unit vector (layer-norm gain initialization).
pub fn ones_vec(d: usize) -> Result<Tensor> {
    Tensor::new(&[d], vec![1.0; d])
}

/// Fully connected layer: weights `[d_in×d_out]` plus a bias row.
#[derive(Clone, Debug)]
pub struct Affine {
    pub w_name: String,
    pub b_name: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Affine {
    /// Registers freshly initialized weights under `<prefix>.w` / `<prefix>.b`.
    pub fn init<R: Rng>(
        prefix: &str,
        d_in: usize,
        d_out: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Affine> {
        let layer = Affine {
            w_name: format!("{prefix}.w"),
            b_name: format!("{prefix}.b"),
            d_in,
            d_out,
        };
        store.insert(&layer.w_name, xavier_uniform(d_in, d_out, rng)?)?;
        store.insert(&layer.b_name, zeros_vec(d_out)?)?;
        Ok(layer)
    }

    /// `x · W + b` for `x [m×d_in]`.
    pub fn forward(&self, tape: &mut Tape, bind: &mut Binding, x: Var) -> Result<Var> {
        let w = bind.var(tape, &self.w_name)?;
        let b = bind.var(tape, &self.b_name)?;
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}
