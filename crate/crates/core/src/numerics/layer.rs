//! Feed-forward layers with explicit per-layer backprop.
//!
//! Forward passes borrow the layer immutably and return caches as values, so
//! a frozen expert can serve many clients concurrently while a trainable copy
//! accumulates gradients in its own context. Gradients live in separate
//! `*Grads` structs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::tensor::{matvec, softmax, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    None,
    Relu,
    LeakyRelu(f64),
    Softmax,
}

impl Activation {
    fn apply(&self, z: &[f64]) -> Vec<f64> {
        match self {
            Activation::None => z.to_vec(),
            Activation::Relu => z.iter().map(|&v| v.max(0.0)).collect(),
            Activation::LeakyRelu(slope) => z
                .iter()
                .map(|&v| if v > 0.0 { v } else { slope * v })
                .collect(),
            Activation::Softmax => softmax(z).expect("softmax over non-empty layer output"),
        }
    }

    /// d(loss)/dz given pre-activation z, post-activation out, and d(loss)/dout.
    fn backward(&self, z: &[f64], out: &[f64], dout: &[f64]) -> Vec<f64> {
        match self {
            Activation::None => dout.to_vec(),
            Activation::Relu => z
                .iter()
                .zip(dout)
                .map(|(&zv, &d)| if zv > 0.0 { d } else { 0.0 })
                .collect(),
            Activation::LeakyRelu(slope) => z
                .iter()
                .zip(dout)
                .map(|(&zv, &d)| if zv > 0.0 { d } else { slope * d })
                .collect(),
            Activation::Softmax => {
                let dot: f64 = out.iter().zip(dout).map(|(s, d)| s * d).collect::<Vec<_>>().iter().sum();
                out.iter().zip(dout).map(|(&s, &d)| s * (d - dot)).collect()
            }
        }
    }
}

/// Weight initialization schemes. Orthogonal draws a Gaussian matrix and
/// orthonormalizes it with modified Gram-Schmidt, sign-fixed for determinism.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    HeNormal,
    Orthogonal,
    Uniform(f64),
}

fn orthogonal_matrix(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let rows = out_dim.max(in_dim);
    let cols = out_dim.min(in_dim);
    // Gaussian [rows, cols], column-orthonormalized.
    let mut a: Vec<f64> = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    for c in 0..cols {
        for prev in 0..c {
            let mut dot = 0.0;
            for r in 0..rows {
                dot += a[r * cols + c] * a[r * cols + prev];
            }
            for r in 0..rows {
                a[r * cols + c] -= dot * a[r * cols + prev];
            }
        }
        let norm: f64 = (0..rows).map(|r| a[r * cols + c].powi(2)).sum::<f64>().sqrt();
        // Degenerate draws are measure-zero; fall back to a unit basis column.
        if norm < 1e-12 {
            for r in 0..rows {
                a[r * cols + c] = if r == c { 1.0 } else { 0.0 };
            }
        } else {
            let sign = if a[c * cols + c] < 0.0 { -1.0 } else { 1.0 };
            for r in 0..rows {
                a[r * cols + c] *= sign / norm;
            }
        }
    }
    if out_dim >= in_dim {
        a
    } else {
        // Transpose to [out_dim, in_dim] with orthonormal rows.
        let mut t = vec![0.0; out_dim * in_dim];
        for r in 0..rows {
            for c in 0..cols {
                t[c * in_dim + r] = a[r * cols + c];
            }
        }
        t
    }
}

/// One dense layer: out = act(W x + b).
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

/// Saved forward state for one layer.
#[derive(Clone, Debug)]
pub struct LayerCache {
    input: Vec<f64>,
    pre: Vec<f64>,
    out: Vec<f64>,
}

/// Accumulated gradients for one layer, shaped like its parameters.
#[derive(Clone, Debug)]
pub struct LayerGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearLayer {
    pub fn new(weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if weight.rank() != 2 || bias.rank() != 1 || weight.shape()[0] != bias.len() {
            return Err(Error::ShapeMismatch {
                context: "LinearLayer::new",
                lhs: weight.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        Ok(LinearLayer {
            weight,
            bias,
            activation,
        })
    }

    pub fn init(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let data = match init {
            Init::HeNormal => {
                let std = (2.0 / in_dim as f64).sqrt();
                (0..out_dim * in_dim)
                    .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            }
            Init::Orthogonal => orthogonal_matrix(out_dim, in_dim, rng),
            Init::Uniform(scale) => (0..out_dim * in_dim)
                .map(|_| rng.gen_range(-scale..scale))
                .collect(),
        };
        LinearLayer {
            weight: Tensor::new(vec![out_dim, in_dim], data).expect("init shape"),
            bias: Tensor::zeros(vec![out_dim]),
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let z = self.affine(x);
        self.activation.apply(&z)
    }

    pub fn forward_cached(&self, x: &[f64]) -> (Vec<f64>, LayerCache) {
        let z = self.affine(x);
        let out = self.activation.apply(&z);
        (
            out.clone(),
            LayerCache {
                input: x.to_vec(),
                pre: z,
                out,
            },
        )
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim(), "layer input dimension");
        let xt = Tensor::from_vec(x.to_vec());
        let mut z = matvec(&self.weight, &xt).expect("validated dims").data().to_vec();
        for (zv, b) in z.iter_mut().zip(self.bias.data()) {
            *zv += b;
        }
        z
    }

    /// Accumulate parameter gradients into `grads` and return d(loss)/d(input).
    pub fn backward(&self, cache: &LayerCache, dout: &[f64], grads: &mut LayerGrads) -> Vec<f64> {
        let dz = self.backward_pre(cache, dout);
        let (out, inp) = (self.out_dim(), self.in_dim());
        for i in 0..out {
            grads.bias[i] += dz[i];
            let row = &mut grads.weight[i * inp..(i + 1) * inp];
            for (g, xv) in row.iter_mut().zip(&cache.input) {
                *g += dz[i] * xv;
            }
        }
        self.input_grad(&dz)
    }

    /// d(loss)/d(input) only; used when the layer itself is frozen.
    pub fn backward_data(&self, cache: &LayerCache, dout: &[f64]) -> Vec<f64> {
        let dz = self.backward_pre(cache, dout);
        self.input_grad(&dz)
    }

    fn backward_pre(&self, cache: &LayerCache, dout: &[f64]) -> Vec<f64> {
        self.activation.backward(&cache.pre, &cache.out, dout)
    }

    fn input_grad(&self, dz: &[f64]) -> Vec<f64> {
        let (out, inp) = (self.out_dim(), self.in_dim());
        let mut dx = vec![0.0; inp];
        for i in 0..out {
            let row = &self.weight.data()[i * inp..(i + 1) * inp];
            for (dxv, wv) in dx.iter_mut().zip(row) {
                *dxv += wv * dz[i];
            }
        }
        dx
    }

    pub fn zero_grads(&self) -> LayerGrads {
        LayerGrads {
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }
}

/// A stack of dense layers. `frozen` marks the whole stack as excluded from
/// SGD updates; gradient flow through a frozen stack still works via
/// `backward_data`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<LinearLayer>,
    pub frozen: bool,
}

#[derive(Clone, Debug)]
pub struct MlpCache {
    layers: Vec<LayerCache>,
}

#[derive(Clone, Debug)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrads>,
}

impl Mlp {
    pub fn new(layers: Vec<LinearLayer>) -> Self {
        Mlp {
            layers,
            frozen: false,
        }
    }

    /// Build a stack from `dims = [in, h1, ..., out]`; `activation` applies to
    /// every layer except the last, which stays linear.
    pub fn init(dims: &[usize], activation: Activation, init: Init, rng: &mut ChaCha8Rng) -> Self {
        assert!(dims.len() >= 2, "Mlp::init needs at least input and output dims");
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let act = if layers.len() + 1 == dims.len() - 1 {
                Activation::None
            } else {
                activation
            };
            layers.push(LinearLayer::init(w[0], w[1], act, init, rng));
        }
        Mlp::new(layers)
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().expect("non-empty mlp").in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty mlp").out_dim()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for layer in &self.layers {
            cur = layer.forward(&cur);
        }
        cur
    }

    pub fn forward_cached(&self, x: &[f64]) -> (Vec<f64>, MlpCache) {
        let mut cur = x.to_vec();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (out, cache) = layer.forward_cached(&cur);
            caches.push(cache);
            cur = out;
        }
        (cur, MlpCache { layers: caches })
    }

    pub fn backward(&self, cache: &MlpCache, dout: &[f64], grads: &mut MlpGrads) -> Vec<f64> {
        let mut d = dout.to_vec();
        for i in (0..self.layers.len()).rev() {
            d = self.layers[i].backward(&cache.layers[i], &d, &mut grads.layers[i]);
        }
        d
    }

    /// Input gradient without touching parameter gradients (frozen modules).
    pub fn backward_data(&self, cache: &MlpCache, dout: &[f64]) -> Vec<f64> {
        let mut d = dout.to_vec();
        for i in (0..self.layers.len()).rev() {
            d = self.layers[i].backward_data(&cache.layers[i], &d);
        }
        d
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            layers: self.layers.iter().map(|l| l.zero_grads()).collect(),
        }
    }

    /// Named views of every parameter tensor, `prefix.N.weight` / `prefix.N.bias`.
    pub fn named_params<'a>(&'a self, prefix: &str) -> Vec<(String, &'a Tensor)> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.{i}.weight"), &l.weight));
            out.push((format!("{prefix}.{i}.bias"), &l.bias));
        }
        out
    }

    pub fn named_params_mut<'a>(&'a mut self, prefix: &str) -> Vec<(String, &'a mut Tensor)> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("{prefix}.{i}.weight"), &mut l.weight));
            out.push((format!("{prefix}.{i}.bias"), &mut l.bias));
        }
        out
    }
}
