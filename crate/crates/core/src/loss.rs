// SPDX-License-Identifier: Apache-2.0
//! Training objective: pixel MSE, a tail-weighted MSE over high-magnitude
//! truth pixels, and Sobel gradient matching.

use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, Tensor, TensorError, Var};

pub const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
pub const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub lambda: f64,
    /// Tail threshold in normalized units.
    pub sigma_t: f64,
}

impl LossConfig {
    pub fn mse() -> Self {
        Self {
            alpha: 0.0,
            lambda: 0.0,
            sigma_t: 2.0,
        }
    }

    pub fn tuned() -> Self {
        Self {
            alpha: 0.05,
            lambda: 0.02,
            sigma_t: 2.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.alpha >= 0.0 && self.lambda >= 0.0) {
            return Err(format!("loss weights must be non-negative, got alpha={} lambda={}", self.alpha, self.lambda));
        }
        if !(self.sigma_t > 0.0) {
            return Err(format!("sigma_t must be positive, got {}", self.sigma_t));
        }
        Ok(())
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::tuned()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub mse: f64,
    pub tail: f64,
    pub grad: f64,
}

impl LossTerms {
    pub fn combine(mse: f64, tail: f64, grad: f64, cfg: &LossConfig) -> Self {
        Self {
            total: mse + cfg.alpha * tail + cfg.lambda * grad,
            mse,
            tail,
            grad,
        }
    }
}

fn check_shapes(pred: &[f64], truth: &[f64], h: usize, w: usize) -> Result<(), TensorError> {
    if pred.len() != truth.len() || pred.len() != h * w {
        return Err(TensorError::Shape(format!(
            "loss: pred has {} values, truth {}, grid {h}x{w}",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

pub fn tail_mask(truth: &[f64], sigma_t: f64) -> Vec<f64> {
    truth.iter().map(|v| if v.abs() > sigma_t { 1.0 } else { 0.0 }).collect()
}

pub fn mse(pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64
}

pub fn tail_loss(pred: &[f64], truth: &[f64], sigma_t: f64) -> f64 {
    pred.iter()
        .zip(truth)
        .filter(|(_, t)| t.abs() > sigma_t)
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / pred.len() as f64
}

fn apply_kernel(map: &[f64], h: usize, w: usize, k: &[[f64; 3]; 3]) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut s = 0.0;
            for (di, row) in k.iter().enumerate() {
                for (dj, kv) in row.iter().enumerate() {
                    let (y, x) = (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                    if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                        s += kv * map[y as usize * w + x as usize];
                    }
                }
            }
            out[i * w + j] = s;
        }
    }
    out
}

/// Row-major `(∇x, ∇y)` with zero padding; `x` runs along columns.
pub fn sobel_gradients(map: &[f64], h: usize, w: usize) -> Result<(Vec<f64>, Vec<f64>), TensorError> {
    if h < 3 || w < 3 || map.len() != h * w {
        return Err(TensorError::Shape(format!("sobel needs a map of at least 3x3, got {h}x{w} with {} values", map.len())));
    }
    Ok((apply_kernel(map, h, w, &SOBEL_X), apply_kernel(map, h, w, &SOBEL_Y)))
}

pub fn grad_loss(pred: &[f64], truth: &[f64], h: usize, w: usize) -> Result<f64, TensorError> {
    check_shapes(pred, truth, h, w)?;
    let (px, py) = sobel_gradients(pred, h, w)?;
    let (tx, ty) = sobel_gradients(truth, h, w)?;
    Ok(mse(&px, &tx) + mse(&py, &ty))
}

/// Loss terms for one map pair, evaluated without a tape.
pub fn pi_loss(pred: &[f64], truth: &[f64], h: usize, w: usize, cfg: &LossConfig) -> Result<LossTerms, TensorError> {
    check_shapes(pred, truth, h, w)?;
    Ok(LossTerms::combine(
        mse(pred, truth),
        tail_loss(pred, truth, cfg.sigma_t),
        grad_loss(pred, truth, h, w)?,
        cfg,
    ))
}

/// Tape handles of the loss and its parts.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub mse: Var,
    pub tail: Var,
    pub grad: Var,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossTerms {
        LossTerms {
            total: g.value(self.total).item(),
            mse: g.value(self.mse).item(),
            tail: g.value(self.tail).item(),
            grad: g.value(self.grad).item(),
        }
    }
}

fn sobel_weights() -> Tensor {
    let data = SOBEL_X.iter().chain(SOBEL_Y.iter()).flatten().copied().collect();
    Tensor::raw(vec![2, 1, 3, 3], data)
}

/// Records the loss of a `[1, H, W]` prediction against `truth`.
pub fn pi_loss_graph(g: &mut Graph, pred: Var, truth: &Tensor, cfg: &LossConfig) -> Result<LossVars, TensorError> {
    let shape = g.shape(pred).to_vec();
    if shape.len() != 3 || shape[0] != 1 || shape != truth.shape {
        return Err(TensorError::Shape(format!("loss: pred {shape:?} vs truth {:?}", truth.shape)));
    }
    let t = g.constant(truth.clone());
    let d = g.sub(pred, t)?;
    let sq = g.mul(d, d)?;
    let mse = g.mean(sq)?;

    let mask = g.constant(Tensor::raw(shape.clone(), tail_mask(&truth.data, cfg.sigma_t)));
    let masked = g.mul(sq, mask)?;
    let tail = g.mean(masked)?;

    // The Sobel response is linear, so matching gradients is the same as
    // driving the gradients of the residual to zero.
    let k = g.constant(sobel_weights());
    let gd = g.conv2d(d, k, 1)?;
    let gsq = g.mul(gd, gd)?;
    let gm = g.mean(gsq)?;
    let grad = g.affine(gm, 2.0, 0.0)?;

    let a = g.affine(tail, cfg.alpha, 0.0)?;
    let l = g.affine(grad, cfg.lambda, 0.0)?;
    let total = g.add(mse, a)?;
    let total = g.add(total, l)?;
    Ok(LossVars { total, mse, tail, grad })
}
