// SPDX-License-Identifier: Apache-2.0
//! Dense f64 tensors with a reverse-mode tape.

mod checkpoint;
mod graph;
pub mod kernels;
mod optim;
mod params;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, ParamEntry};
pub use graph::{Gradients, Graph, Var, LAYER_NORM_EPS};
pub use kernels::{Footprints, ProjConvPlan};
pub use optim::Adam;
pub use params::{Bound, ParamStore};

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("checkpoint manifest mismatch: {0}")]
    Manifest(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Shape(format!("{} values for shape {shape:?}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite("tensor constructor"));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(|_| rng.gen_range(-a..a)).collect(),
        }
    }

    /// Uniform in `±sqrt(6 / fan_in)`, suited to ReLU layers.
    pub fn he(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Self {
        let a = (6.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(|_| rng.gen_range(-a..a)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }
}

/// Largest coordinate-wise disagreement between the tape gradient of `f`
/// at `x` and central differences with step `h`, measured as
/// `|g_ad − g_fd| / max(1e-8, |g_ad| + |g_fd|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let loss = f(&mut g, xv)?;
    let grads = g.backward(loss)?;
    let ad = grads.get(xv).map_or_else(|| vec![0.0; x.len()], <[f64]>::to_vec);
    let eval = |t: Tensor| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let v = g.input(t);
        let l = f(&mut g, v)?;
        Ok(g.value(l).item())
    };
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data[i] += h;
        let mut minus = x.clone();
        minus.data[i] -= h;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (ad[i] - fd).abs() / (ad[i].abs() + fd.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
