use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{normal, Rng};

/// Named, ordered collection of parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    /// Zero-mean normal initialization.
    pub fn push_normal(&mut self, name: impl Into<String>, rows: usize, cols: usize, std: f64, rng: &mut Rng) -> usize {
        let t = Tensor::from_fn(rows, cols, |_, _| T::of(normal(rng) * std));
        self.push(name, t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    /// `(name, shape)` for every tensor, in order.
    pub fn census(&self) -> Vec<(String, [usize; 2])> {
        self.names.iter().cloned().zip(self.tensors.iter().map(Tensor::shape)).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Places every tensor on the graph, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }

    pub fn flatten(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn flatten_f64(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().map(|x| x.as_f64())).collect()
    }

    /// Overwrites all values from a flat array laid out like [`ParamStore::flatten`].
    pub fn assign_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::Shape { op: "assign_flat", lhs: [self.num_scalars(), 1], rhs: [flat.len(), 1] });
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn assign_flat_f64(&mut self, flat: &[f64]) -> Result<()> {
        let cast: Vec<T> = flat.iter().map(|&x| T::of(x)).collect();
        self.assign_flat(&cast)
    }

    /// `self ← (1 − tau)·self + tau·other`.
    pub fn soft_update_from(&mut self, other: &Self, tau: T) -> Result<()> {
        if self.census() != other.census() {
            return Err(Error::Graph("soft update between differently shaped stores"));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d = (T::one() - tau) * *d + tau * s;
            }
        }
        Ok(())
    }

    /// Order-sensitive checksum of all parameter bits.
    pub fn checksum(&self) -> u64 {
        // FNV-1a over the f64 bit patterns
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for x in self.flatten_f64() {
            for b in x.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// Affine layer `x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, std: f64, rng: &mut Rng) -> Self {
        let w = store.push_normal(alloc::format!("{name}.w"), fan_in, fan_out, std, rng);
        let b = store.push(alloc::format!("{name}.b"), Tensor::zeros(1, fan_out));
        Self { w, b }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, vars: &[Var], x: Var) -> Result<Var> {
        let h = g.matmul(x, vars[self.w])?;
        g.add_row(h, vars[self.b])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gamma: usize,
    pub beta: usize,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gamma = store.push(alloc::format!("{name}.gamma"), Tensor::filled(1, dim, T::one()));
        let beta = store.push(alloc::format!("{name}.beta"), Tensor::zeros(1, dim));
        Self { gamma, beta }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, vars: &[Var], x: Var) -> Result<Var> {
        g.layer_norm(x, vars[self.gamma], vars[self.beta])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Gelu,
    Mish,
}

impl Activation {
    pub fn apply<T: Real>(self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::Gelu => g.gelu(x),
            Activation::Mish => g.mish(x),
        }
    }
}

/// Feed-forward network; the activation follows every layer except the last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: &[usize],
        activation: Activation,
        std: f64,
        rng: &mut Rng,
    ) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &alloc::format!("{name}.{i}"), w[0], w[1], std, rng))
            .collect();
        Self { layers, activation }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, vars: &[Var], mut x: Var) -> Result<Var> {
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, vars, x)?;
            if i < last {
                x = self.activation.apply(g, x)?;
            }
        }
        Ok(x)
    }
}
