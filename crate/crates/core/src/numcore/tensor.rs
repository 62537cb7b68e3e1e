use crate::error::{Error, Result};

/// Dense row-major array of 64-bit reals. The lone numeric carrier of the
/// crate: logits, probabilities, features, weights all live here.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor after checking the shape/length contract and that
    /// every entry is finite.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("invalid tensor shape {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::Config(format!(
                "shape {shape:?} wants {numel} entries, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite tensor entry".into()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::from_vec(vec![n], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Row count / column count for rank-2 tensors.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() needs a rank-2 tensor");
        self.shape[1]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.shape[1];
        self.data[r * cols + c] = v;
    }
}

/// y = W x for a rank-2 W of shape out x in.
pub fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let (out, inp) = (w.rows(), w.cols());
    assert_eq!(x.len(), inp, "matvec width mismatch");
    let mut y = vec![0.0; out];
    for r in 0..out {
        let row = w.row(r);
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(x) {
            acc += a * b;
        }
        y[r] = acc;
    }
    y
}

/// y = W^T g for a rank-2 W of shape out x in; propagates gradients back
/// through an affine layer.
pub fn matvec_transpose(w: &Tensor, g: &[f64]) -> Vec<f64> {
    let (out, inp) = (w.rows(), w.cols());
    assert_eq!(g.len(), out, "matvec_transpose width mismatch");
    let mut y = vec![0.0; inp];
    for r in 0..out {
        let row = w.row(r);
        for (c, a) in row.iter().enumerate() {
            y[c] += a * g[r];
        }
    }
    y
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot length mismatch");
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(a: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in a.iter().enumerate().skip(1) {
        if *v > a[best] {
            best = i;
        }
    }
    best
}
