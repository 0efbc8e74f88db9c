//! Dense row-major f64 tensor plus the scalar-valued primitives
//! (matvec, softmax, logsumexp, cross-entropy) used throughout.

use crate::error::{Error, Result};

/// Dense numeric array. `data` is flat row-major; `product(shape) == data.len()`
/// always holds. All values are f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || expected != data.len() {
            return Err(Error::ShapeMismatch {
                context: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    /// Rank-1 tensor from a vector.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Rank-2 tensor with `rows * cols` row-major entries.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// y[i] = sum_j w[i][j] * x[j] for w: [out, in], x: [in].
pub fn matvec(w: &Tensor, x: &Tensor) -> Result<Tensor> {
    if w.rank() != 2 || x.rank() != 1 || w.shape()[1] != x.len() {
        return Err(Error::ShapeMismatch {
            context: "matvec",
            lhs: w.shape().to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    let mut y = vec![0.0; out];
    for i in 0..out {
        let row = &w.data()[i * inp..(i + 1) * inp];
        let mut acc = 0.0;
        for (wv, xv) in row.iter().zip(x.data()) {
            acc += wv * xv;
        }
        y[i] = acc;
    }
    Ok(Tensor::from_vec(y))
}

/// Numerically stable softmax: exp(x - max) normalized.
pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::EmptyInput { context: "softmax" });
    }
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= sum;
    }
    Ok(out)
}

/// t * log sum_i exp(x[i] / t), computed via max-shift.
pub fn logsumexp(x: &[f64], t: f64) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::EmptyInput {
            context: "logsumexp",
        });
    }
    if !(t > 0.0) {
        return Err(Error::InvalidParameter {
            name: "temperature",
            message: format!("must be > 0, got {t}"),
        });
    }
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let sum: f64 = x.iter().map(|&v| ((v - max) / t).exp()).sum();
    Ok(max + t * sum.ln())
}

/// -log softmax(logits)[label]; stable via logsumexp.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            class_count: logits.len(),
        });
    }
    let lse = logsumexp(logits, 1.0)?;
    Ok(lse - logits[label])
}

/// d(cross_entropy)/d(logits) = softmax(logits) - onehot(label).
pub fn cross_entropy_grad(logits: &[f64], label: usize) -> Result<Vec<f64>> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            class_count: logits.len(),
        });
    }
    let mut g = softmax(logits)?;
    g[label] -= 1.0;
    Ok(g)
}
