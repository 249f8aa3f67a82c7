// SPDX-License-Identifier: Apache-2.0
//! Tape of recorded operations with reverse-mode gradients.

use std::sync::Arc;

use super::kernels::{
    add_shifted, add_shifted_adjoint, col2im, conv_out, gemm, gemm_new, im2col, upconv_row, upconv_taps, upconv_taps_adjoint, Footprints, ProjConvPlan,
};
use super::{Tensor, TensorError};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    ChannelMix(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    ScaleRows(Var, Var),
    MulScalar(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Conv2d { x: Var, w: Var, stride: usize, cols: Vec<f64> },
    UpConv { x: Var, w: Var },
    ChannelBias(Var, Var),
    BiasRelu { x: Var, b: Var, skip: Option<Var> },
    Upsample2(Var),
    Concat(Var, Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, idx: Arc<Vec<usize>> },
    ScatterAddRows { x: Var, idx: Arc<Vec<usize>> },
    ProjectGrid { x: Var, fp: Arc<Footprints> },
    ProjectConv { x: Var, w: Var, plan: Arc<ProjConvPlan> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation; [`Graph::backward`] replays it in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::Shape(format!("{op}: {a:?} vs {b:?}"))
}

fn rows_cols(op: &str, s: &[usize]) -> Result<(usize, usize), TensorError> {
    match *s {
        [r, c] => Ok((r, c)),
        _ => Err(TensorError::Shape(format!("{op}: expected a matrix, got {s:?}"))),
    }
}

fn chw(op: &str, s: &[usize]) -> Result<(usize, usize, usize), TensorError> {
    match *s {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(TensorError::Shape(format!("{op}: expected [c, h, w], got {s:?}"))),
    }
}

fn add_into(dst: &mut Vec<f64>, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var, TensorError> {
        if !all_finite(&value.data) {
            return Err(TensorError::NonFinite(name));
        }
        Ok(self.push_finite(value, op, needs_grad))
    }

    /// For ops whose output is finite whenever their inputs are.
    fn push_finite(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable parameter with external index `id`.
    pub fn param(&mut self, id: usize, t: &Tensor) -> Var {
        self.nodes.push(Node {
            value: t.clone(),
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = rows_cols("matmul", self.shape(a))?;
        let (k2, n) = rows_cols("matmul", self.shape(b))?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let out = gemm_new(m, k, n, self.data(a), false, self.data(b), false);
        let ng = self.ng(a) || self.ng(b);
        self.push("matmul", Tensor::raw(vec![m, n], out), Op::MatMul(a, b), ng)
    }

    /// 1×1 convolution: `w [o, c]` applied to every pixel of `x [c, h, w]`.
    pub fn channel_mix(&mut self, w: Var, x: Var) -> Result<Var, TensorError> {
        let (o, c) = rows_cols("channel_mix", self.shape(w))?;
        let (c2, h, wd) = chw("channel_mix", self.shape(x))?;
        if c != c2 {
            return Err(shape_err("channel_mix", self.shape(w), self.shape(x)));
        }
        let out = gemm_new(o, c, h * wd, self.data(w), false, self.data(x), false);
        let ng = self.ng(w) || self.ng(x);
        self.push("channel_mix", Tensor::raw(vec![o, h, wd], out), Op::ChannelMix(w, x), ng)
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        self.push(name, Tensor::raw(shape, data), op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_op(&mut self, name: &'static str, a: Var, b: Var, mul: bool) -> Result<Var, TensorError> {
        let (m, n) = rows_cols(name, self.shape(a))?;
        if self.value(b).len() != n {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let row = self.data(b);
        let mut data = self.data(a).to_vec();
        for r in 0..m {
            for (x, &y) in data[r * n..(r + 1) * n].iter_mut().zip(row) {
                if mul {
                    *x *= y;
                } else {
                    *x += y;
                }
            }
        }
        let op = if mul { Op::MulRow(a, b) } else { Op::AddRow(a, b) };
        let ng = self.ng(a) || self.ng(b);
        self.push(name, Tensor::raw(vec![m, n], data), op, ng)
    }

    /// Broadcast-adds the `n`-vector `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.row_op("add_row", a, b, false)
    }

    /// Broadcast-multiplies every row of `a` by the `n`-vector `b`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.row_op("mul_row", a, b, true)
    }

    /// Multiplies row `i` of `a` by `s[i]`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var, TensorError> {
        let (m, n) = rows_cols("scale_rows", self.shape(a))?;
        if self.value(s).len() != m {
            return Err(shape_err("scale_rows", self.shape(a), self.shape(s)));
        }
        let sv = self.data(s);
        let data = self.data(a).iter().enumerate().map(|(i, &x)| x * sv[i / n]).collect();
        let ng = self.ng(a) || self.ng(s);
        self.push("scale_rows", Tensor::raw(vec![m, n], data), Op::ScaleRows(a, s), ng)
    }

    /// `a · s` for a one-element `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var, TensorError> {
        if self.value(s).len() != 1 {
            return Err(shape_err("mul_scalar", self.shape(a), self.shape(s)));
        }
        let c = self.data(s)[0];
        let data = self.data(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(s);
        self.push("mul_scalar", Tensor::raw(shape, data), Op::MulScalar(a, s), ng)
    }

    /// `scale · a + shift` with constant coefficients.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var, TensorError> {
        let data = self.data(a).iter().map(|x| scale * x + shift).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push("affine", Tensor::raw(shape, data), Op::Affine(a, scale), ng)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let data = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push_finite(Tensor::raw(shape, data), Op::Relu(a), ng))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let data = self.data(a).iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push("sigmoid", Tensor::raw(shape, data), Op::Sigmoid(a), ng)
    }

    /// Per-row standardization of a matrix, without affine terms.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var, TensorError> {
        let (m, n) = rows_cols("layer_norm", self.shape(a))?;
        let x = self.data(a);
        let mut out = vec![0.0; m * n];
        let mut inv_std = Vec::with_capacity(m);
        for r in 0..m {
            let row = &x[r * n..(r + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (v - mu) * is;
            }
            inv_std.push(is);
        }
        let ng = self.ng(a);
        self.push("layer_norm", Tensor::raw(vec![m, n], out), Op::LayerNorm { x: a, inv_std }, ng)
    }

    /// 3×3 convolution with zero padding 1: `x` is `[c, h, w]`, `w` is
    /// `[o, c, 3, 3]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var, TensorError> {
        let (c, h, wd) = chw("conv2d", self.shape(x))?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != c || ws[2] != 3 || ws[3] != 3 || !(stride == 1 || stride == 2) {
            return Err(shape_err("conv2d", self.shape(x), &ws));
        }
        let o = ws[0];
        let (ho, wo) = (conv_out(h, stride), conv_out(wd, stride));
        let cols = im2col(self.data(x), c, h, wd, stride);
        let out = conv_gemm(o, c * 9, ho * wo, self.data(w), &cols);
        let ng = self.ng(x) || self.ng(w);
        let cols = if ng { cols } else { Vec::new() };
        self.push(
            "conv2d",
            Tensor::raw(vec![o, ho, wo], out),
            Op::Conv2d { x, w, stride, cols },
            ng,
        )
    }

    /// `conv2d(upsample2(x), w, 1)` evaluated on the low-resolution grid:
    /// each output parity class sees a fixed 2×2 kernel, so one product
    /// yields all sixteen tap planes and each output sums four of them.
    pub fn upsample_conv(&mut self, x: Var, w: Var) -> Result<Var, TensorError> {
        let (c, h, wd) = chw("upsample_conv", self.shape(x))?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != c || ws[2] != 3 || ws[3] != 3 {
            return Err(shape_err("upsample_conv", self.shape(x), &ws));
        }
        let o = ws[0];
        let (p, w2) = (h * wd, 2 * wd);
        let z = gemm_new(16 * o, c, p, &upconv_taps(self.data(w), o, c), false, self.data(x), false);
        let mut out = Vec::with_capacity(o * 4 * p);
        let mut parts = vec![0.0; 4 * p];
        for oc in 0..o {
            parts.fill(0.0);
            for (ab, part) in parts.chunks_mut(p).enumerate() {
                let (a, b) = (ab / 2, ab % 2);
                for (sy, sx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let q = upconv_row(a, b, sy, sx) * o + oc;
                    let (dy, dx) = ((a + sy) as isize - 1, (b + sx) as isize - 1);
                    add_shifted(part, &z[q * p..(q + 1) * p], h, wd, dy, dx);
                }
            }
            for i in 0..h {
                for a in 0..2 {
                    let even = &parts[2 * a * p + i * wd..2 * a * p + (i + 1) * wd];
                    let odd = &parts[(2 * a + 1) * p + i * wd..(2 * a + 1) * p + (i + 1) * wd];
                    out.extend(even.iter().zip(odd).flat_map(|(e, o)| [*e, *o]));
                }
            }
        }
        let ng = self.ng(x) || self.ng(w);
        self.push("upsample_conv", Tensor::raw(vec![o, 2 * h, w2], out), Op::UpConv { x, w }, ng)
    }

    /// Adds `b[c]` to every pixel of channel `c`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let (c, h, w) = chw("add_channel_bias", self.shape(x))?;
        if self.value(b).len() != c {
            return Err(shape_err("add_channel_bias", self.shape(x), self.shape(b)));
        }
        let mut data = self.data(x).to_vec();
        for (plane, &bias) in data.chunks_mut(h * w).zip(self.data(b)) {
            plane.iter_mut().for_each(|v| *v += bias);
        }
        let ng = self.ng(x) || self.ng(b);
        self.push("add_channel_bias", Tensor::raw(vec![c, h, w], data), Op::ChannelBias(x, b), ng)
    }

    /// `relu(x + skip + b[c])` over `[c, h, w]` in one pass.
    pub fn bias_relu(&mut self, x: Var, b: Var, skip: Option<Var>) -> Result<Var, TensorError> {
        let (c, h, w) = chw("bias_relu", self.shape(x))?;
        if self.value(b).len() != c {
            return Err(shape_err("bias_relu", self.shape(x), self.shape(b)));
        }
        if let Some(s) = skip {
            if self.shape(s) != self.shape(x) {
                return Err(shape_err("bias_relu", self.shape(x), self.shape(s)));
            }
        }
        let (xd, bd) = (self.data(x), self.data(b));
        let mut data = Vec::with_capacity(xd.len());
        match skip {
            Some(s) => {
                for ((xp, sp), &bias) in xd.chunks(h * w).zip(self.data(s).chunks(h * w)).zip(bd) {
                    data.extend(xp.iter().zip(sp).map(|(x, s)| (x + s + bias).max(0.0)));
                }
            }
            None => {
                for (xp, &bias) in xd.chunks(h * w).zip(bd) {
                    data.extend(xp.iter().map(|x| (x + bias).max(0.0)));
                }
            }
        }
        let ng = self.ng(x) || self.ng(b) || skip.is_some_and(|s| self.ng(s));
        self.push("bias_relu", Tensor::raw(vec![c, h, w], data), Op::BiasRelu { x, b, skip }, ng)
    }

    /// Nearest-neighbour ×2 upsampling of `[c, h, w]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var, TensorError> {
        let (c, h, w) = chw("upsample2", self.shape(x))?;
        let src = self.data(x);
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                let srow = &src[(ch * h + y / 2) * w..(ch * h + y / 2 + 1) * w];
                let drow = &mut out[(ch * 2 * h + y) * 2 * w..(ch * 2 * h + y + 1) * 2 * w];
                for (xo, d) in drow.iter_mut().enumerate() {
                    *d = srow[xo / 2];
                }
            }
        }
        let ng = self.ng(x);
        self.push("upsample2", Tensor::raw(vec![c, 2 * h, 2 * w], out), Op::Upsample2(x), ng)
    }

    /// Channel-axis concatenation of two `[c, h, w]` tensors.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ca, h, w) = chw("concat", self.shape(a))?;
        let (cb, h2, w2) = chw("concat", self.shape(b))?;
        if (h, w) != (h2, w2) {
            return Err(shape_err("concat", self.shape(a), self.shape(b)));
        }
        let mut data = self.data(a).to_vec();
        data.extend_from_slice(self.data(b));
        let ng = self.ng(a) || self.ng(b);
        self.push("concat", Tensor::raw(vec![ca + cb, h, w], data), Op::Concat(a, b), ng)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.data(a).iter().sum();
        let ng = self.ng(a);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(TensorError::Shape("mean of an empty tensor".into()));
        }
        let s = self.data(a).iter().sum::<f64>() / n as f64;
        let ng = self.ng(a);
        self.push("mean", Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(shape_err("reshape", self.shape(a), &shape));
        }
        let data = self.data(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push_finite(Tensor::raw(shape, data), Op::Reshape(a), ng))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (m, n) = rows_cols("slice_cols", self.shape(a))?;
        if start + len > n {
            return Err(TensorError::Shape(format!("slice_cols: {start}+{len} > {n}")));
        }
        let x = self.data(a);
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&x[r * n + start..r * n + start + len]);
        }
        let ng = self.ng(a);
        self.push("slice_cols", Tensor::raw(vec![m, len], data), Op::SliceCols { x: a, start }, ng)
    }

    /// Rows `idx[0], idx[1], …` of a matrix.
    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Result<Var, TensorError> {
        let (m, n) = rows_cols("gather_rows", self.shape(a))?;
        if idx.iter().any(|&i| i >= m) {
            return Err(TensorError::Shape(format!("gather_rows: index out of {m} rows")));
        }
        let x = self.data(a);
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx.iter() {
            data.extend_from_slice(&x[i * n..(i + 1) * n]);
        }
        let ng = self.ng(a);
        let rows = idx.len();
        self.push("gather_rows", Tensor::raw(vec![rows, n], data), Op::GatherRows { x: a, idx }, ng)
    }

    /// `out[idx[k]] += a[k]` into an `m`-row zero matrix.
    pub fn scatter_add_rows(&mut self, a: Var, idx: Arc<Vec<usize>>, m: usize) -> Result<Var, TensorError> {
        let (k, n) = rows_cols("scatter_add_rows", self.shape(a))?;
        if idx.len() != k || idx.iter().any(|&i| i >= m) {
            return Err(TensorError::Shape("scatter_add_rows: bad index list".into()));
        }
        let x = self.data(a);
        let mut data = vec![0.0; m * n];
        for (r, &i) in idx.iter().enumerate() {
            add_into_slice(&mut data[i * n..(i + 1) * n], &x[r * n..(r + 1) * n]);
        }
        let ng = self.ng(a);
        self.push(
            "scatter_add_rows",
            Tensor::raw(vec![m, n], data),
            Op::ScatterAddRows { x: a, idx },
            ng,
        )
    }

    /// Paints row `k` of the `[nodes, d]` matrix `a` onto the cells of node
    /// `k`, giving a `[d, h, w]` grid that is zero elsewhere.
    pub fn project_grid(&mut self, a: Var, fp: Arc<Footprints>) -> Result<Var, TensorError> {
        let (m, d) = rows_cols("project_grid", self.shape(a))?;
        if fp.cells.len() != m {
            return Err(TensorError::Shape(format!("project_grid: {} footprints for {m} rows", fp.cells.len())));
        }
        let hw = fp.height * fp.width;
        let x = self.data(a);
        let mut data = vec![0.0; d * hw];
        for (k, cells) in fp.cells.iter().enumerate() {
            for c in 0..d {
                let v = x[k * d + c];
                for &p in cells {
                    data[c * hw + p] = v;
                }
            }
        }
        let ng = self.ng(a);
        let shape = vec![d, fp.height, fp.width];
        self.push("project_grid", Tensor::raw(shape, data), Op::ProjectGrid { x: a, fp }, ng)
    }

    /// `conv2d(project_grid(a), w)` without materializing the painted grid.
    pub fn project_conv(&mut self, a: Var, w: Var, plan: Arc<ProjConvPlan>) -> Result<Var, TensorError> {
        let (m, d) = rows_cols("project_conv", self.shape(a))?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != d || ws[2] != 3 || ws[3] != 3 || plan.nodes != m {
            return Err(shape_err("project_conv", self.shape(a), &ws));
        }
        let o = ws[0];
        let z = project_taps(self.data(a), self.data(w), m, d, o);
        let p = plan.out_h * plan.out_w;
        // Accumulate pixel-major so each hit adds one contiguous row of `o`.
        let mut pm = vec![0.0; p * o];
        for &(px, k, t) in &plan.hits {
            let src = &z[(k as usize * 9 + t as usize) * o..][..o];
            pm[px as usize * o..][..o].iter_mut().zip(src).for_each(|(a, b)| *a += b);
        }
        let out = transpose(&pm, p, o);
        let ng = self.ng(a) || self.ng(w);
        let shape = vec![o, plan.out_h, plan.out_w];
        self.push("project_conv", Tensor::raw(shape, out), Op::ProjectConv { x: a, w, plan }, ng)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Shape(format!("backward from non-scalar {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.backprop(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradient of each parameter id (summed over uses), `None` if unused.
    pub fn param_grads(&self, grads: &Gradients, n_params: usize) -> Vec<Option<Vec<f64>>> {
        let mut out: Vec<Option<Vec<f64>>> = vec![None; n_params];
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                match &mut out[*id] {
                    Some(acc) => add_into(acc, g),
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        out
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.ng(v) {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.value(v).len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::ChannelMix(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.value(*b).len() / k;
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &|s| gemm(m, n, k, g, false, bd, true, 1.0, s));
                acc(*b, &|s| gemm(k, m, n, ad, true, g, false, 1.0, s));
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &|s| gemm(m, n, k, g, false, bd, true, 1.0, s));
                acc(*b, &|s| gemm(k, m, n, ad, true, g, false, 1.0, s));
            }
            Op::Add(a, b) => {
                acc(*a, &|s| add_into_slice(s, g));
                acc(*b, &|s| add_into_slice(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| add_into_slice(s, g));
                acc(*b, &|s| s.iter_mut().zip(g).for_each(|(d, x)| *d -= x));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &|s| s.iter_mut().zip(g).zip(bd).for_each(|((d, x), y)| *d += x * y));
                acc(*b, &|s| s.iter_mut().zip(g).zip(ad).for_each(|((d, x), y)| *d += x * y));
            }
            Op::AddRow(a, b) => {
                let n = self.value(*b).len();
                acc(*a, &|s| add_into_slice(s, g));
                acc(*b, &|s| {
                    for row in g.chunks(n) {
                        add_into_slice(s, row);
                    }
                });
            }
            Op::MulRow(a, b) => {
                let n = self.value(*b).len();
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &|s| {
                    for (srow, grow) in s.chunks_mut(n).zip(g.chunks(n)) {
                        srow.iter_mut().zip(grow).zip(bd).for_each(|((d, x), y)| *d += x * y);
                    }
                });
                acc(*b, &|s| {
                    for (grow, arow) in g.chunks(n).zip(ad.chunks(n)) {
                        s.iter_mut().zip(grow).zip(arow).for_each(|((d, x), y)| *d += x * y);
                    }
                });
            }
            Op::ScaleRows(a, sv) => {
                let n = self.shape(*a)[1];
                let (ad, sd) = (self.data(*a), self.data(*sv));
                acc(*a, &|s| {
                    for (r, (srow, grow)) in s.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                        srow.iter_mut().zip(grow).for_each(|(d, x)| *d += x * sd[r]);
                    }
                });
                acc(*sv, &|s| {
                    for (r, (grow, arow)) in g.chunks(n).zip(ad.chunks(n)).enumerate() {
                        s[r] += grow.iter().zip(arow).map(|(x, y)| x * y).sum::<f64>();
                    }
                });
            }
            Op::MulScalar(a, sv) => {
                let c = self.data(*sv)[0];
                let ad = self.data(*a);
                acc(*a, &|s| s.iter_mut().zip(g).for_each(|(d, x)| *d += x * c));
                acc(*sv, &|s| s[0] += g.iter().zip(ad).map(|(x, y)| x * y).sum::<f64>());
            }
            Op::Affine(a, scale) => {
                acc(*a, &|s| s.iter_mut().zip(g).for_each(|(d, x)| *d += x * scale));
            }
            Op::Relu(a) => {
                let ad = self.data(*a);
                acc(*a, &|s| {
                    s.iter_mut().zip(g).zip(ad).for_each(|((d, x), y)| {
                        if *y > 0.0 {
                            *d += x
                        }
                    })
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value.data;
                acc(*a, &|s| s.iter_mut().zip(g).zip(y).for_each(|((d, x), y)| *d += x * y * (1.0 - y)));
            }
            Op::LayerNorm { x, inv_std } => {
                let n = self.shape(*x)[1];
                let xhat = &node.value.data;
                acc(*x, &|s| {
                    for (r, is) in inv_std.iter().enumerate() {
                        let (gr, xr) = (&g[r * n..(r + 1) * n], &xhat[r * n..(r + 1) * n]);
                        let mg = gr.iter().sum::<f64>() / n as f64;
                        let mgx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for ((d, gv), xv) in s[r * n..(r + 1) * n].iter_mut().zip(gr).zip(xr) {
                            *d += is * (gv - mg - xv * mgx);
                        }
                    }
                });
            }
            Op::Conv2d { x, w, stride, cols } => {
                let (c, h, wd) = chw("conv2d", self.shape(*x)).expect("recorded shape");
                let o = self.shape(*w)[0];
                let p = node.value.len() / o;
                let wdat = self.data(*w);
                acc(*w, &|s| gemm(o, p, c * 9, g, false, cols, true, 1.0, s));
                acc(*x, &|s| {
                    let mut dcols = vec![0.0; c * 9 * p];
                    gemm(c * 9, o, p, wdat, true, g, false, 0.0, &mut dcols);
                    col2im(&dcols, c, h, wd, *stride, s);
                });
            }
            Op::UpConv { x, w } => {
                let (c, h, wd) = chw("upsample_conv", self.shape(*x)).expect("recorded shape");
                let o = self.shape(*w)[0];
                let (p, w2) = (h * wd, 2 * wd);
                let mut dz = vec![0.0; 16 * o * p];
                let mut part = vec![0.0; p];
                for oc in 0..o {
                    let src = &g[oc * 4 * p..(oc + 1) * 4 * p];
                    for a in 0..2 {
                        for b in 0..2 {
                            for i in 0..h {
                                let srow = &src[(2 * i + a) * w2..(2 * i + a + 1) * w2];
                                for (d, v) in part[i * wd..(i + 1) * wd].iter_mut().zip(srow[b..].iter().step_by(2)) {
                                    *d = *v;
                                }
                            }
                            for (sy, sx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                let q = upconv_row(a, b, sy, sx) * o + oc;
                                let (dy, dx) = ((a + sy) as isize - 1, (b + sx) as isize - 1);
                                add_shifted_adjoint(&mut dz[q * p..(q + 1) * p], &part, h, wd, dy, dx);
                            }
                        }
                    }
                }
                let (xd, wdat) = (self.data(*x), self.data(*w));
                acc(*w, &|s| {
                    let mut da = vec![0.0; 16 * o * c];
                    gemm(16 * o, p, c, &dz, false, xd, true, 0.0, &mut da);
                    upconv_taps_adjoint(&da, o, c, s);
                });
                acc(*x, &|s| gemm(c, 16 * o, p, &upconv_taps(wdat, o, c), true, &dz, false, 1.0, s));
            }
            Op::ChannelBias(x, b) => {
                let c = self.value(*b).len();
                let hw = node.value.len() / c;
                acc(*x, &|s| add_into_slice(s, g));
                acc(*b, &|s| {
                    for (ch, d) in s.iter_mut().enumerate() {
                        *d += g[ch * hw..(ch + 1) * hw].iter().sum::<f64>();
                    }
                });
            }
            Op::BiasRelu { x, b, skip } => {
                let c = self.value(*b).len();
                let hw = node.value.len() / c;
                let gp: Vec<f64> = g.iter().zip(&node.value.data).map(|(g, y)| if *y > 0.0 { *g } else { 0.0 }).collect();
                acc(*x, &|s| add_into_slice(s, &gp));
                if let Some(sk) = skip {
                    acc(*sk, &|s| add_into_slice(s, &gp));
                }
                acc(*b, &|s| {
                    for (ch, d) in s.iter_mut().enumerate() {
                        *d += gp[ch * hw..(ch + 1) * hw].iter().sum::<f64>();
                    }
                });
            }
            Op::Upsample2(x) => {
                let (c, h, w) = chw("upsample2", self.shape(*x)).expect("recorded shape");
                acc(*x, &|s| {
                    for ch in 0..c {
                        for y in 0..2 * h {
                            let grow = &g[(ch * 2 * h + y) * 2 * w..(ch * 2 * h + y + 1) * 2 * w];
                            let srow = &mut s[(ch * h + y / 2) * w..(ch * h + y / 2 + 1) * w];
                            for (xo, v) in grow.iter().enumerate() {
                                srow[xo / 2] += v;
                            }
                        }
                    }
                });
            }
            Op::Concat(a, b) => {
                let na = self.value(*a).len();
                acc(*a, &|s| add_into_slice(s, &g[..na]));
                acc(*b, &|s| add_into_slice(s, &g[na..]));
            }
            Op::Sum(a) => {
                acc(*a, &|s| s.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                acc(*a, &|s| s.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::Reshape(a) => {
                acc(*a, &|s| add_into_slice(s, g));
            }
            Op::SliceCols { x, start } => {
                let n = self.shape(*x)[1];
                let len = node.value.shape[1];
                acc(*x, &|s| {
                    for (r, grow) in g.chunks(len).enumerate() {
                        add_into_slice(&mut s[r * n + start..r * n + start + len], grow);
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let n = self.shape(*x)[1];
                acc(*x, &|s| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into_slice(&mut s[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::ScatterAddRows { x, idx } => {
                let n = self.shape(*x)[1];
                acc(*x, &|s| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into_slice(&mut s[r * n..(r + 1) * n], &g[i * n..(i + 1) * n]);
                    }
                });
            }
            Op::ProjectGrid { x, fp } => {
                let d = self.shape(*x)[1];
                let hw = fp.height * fp.width;
                acc(*x, &|s| {
                    for (k, cells) in fp.cells.iter().enumerate() {
                        for c in 0..d {
                            s[k * d + c] += cells.iter().map(|&p| g[c * hw + p]).sum::<f64>();
                        }
                    }
                });
            }
            Op::ProjectConv { x, w, plan } => {
                let (m, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let o = self.shape(*w)[0];
                let p = plan.out_h * plan.out_w;
                let mut dz = vec![0.0; m * o * 9];
                for &(px, k, t) in &plan.hits {
                    let row = &mut dz[k as usize * o * 9..];
                    for oc in 0..o {
                        row[oc * 9 + t as usize] += g[oc * p + px as usize];
                    }
                }
                let (xd, wd) = (self.data(*x), self.data(*w));
                // dz is [m, o, 9]; w[oc] is a [d, 9] block.
                acc(*x, &|s| {
                    for oc in 0..o {
                        let wo = &wd[oc * d * 9..(oc + 1) * d * 9];
                        for k in 0..m {
                            let dzr = &dz[(k * o + oc) * 9..(k * o + oc + 1) * 9];
                            for c in 0..d {
                                let wr = &wo[c * 9..(c + 1) * 9];
                                s[k * d + c] += dzr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    }
                });
                acc(*w, &|s| {
                    for k in 0..m {
                        let xr = &xd[k * d..(k + 1) * d];
                        for oc in 0..o {
                            let dzr = &dz[(k * o + oc) * 9..(k * o + oc + 1) * 9];
                            for (c, &xv) in xr.iter().enumerate() {
                                let sr = &mut s[(oc * d + c) * 9..(oc * d + c + 1) * 9];
                                sr.iter_mut().zip(dzr).for_each(|(a, b)| *a += xv * b);
                            }
                        }
                    }
                });
            }
        }
    }
}

fn add_into_slice(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `w [o, k] · cols [k, p]`. Narrow outputs go through the transposed
/// product, which the GEMM kernel handles far better.
fn conv_gemm(o: usize, k: usize, p: usize, w: &[f64], cols: &[f64]) -> Vec<f64> {
    if o >= 16 {
        return gemm_new(o, k, p, w, false, cols, false);
    }
    transpose(&gemm_new(p, k, o, cols, true, w, true), p, o)
}

/// Row-major `[r, c]` to `[c, r]`.
fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(r * c);
    for j in 0..c {
        out.extend(x.iter().skip(j).step_by(c).take(r));
    }
    out
}

/// Branch-free scan so the check vectorizes.
fn all_finite(data: &[f64]) -> bool {
    const EXP: u64 = 0x7ff0_0000_0000_0000;
    data.iter().fold(0u64, |acc, x| acc | u64::from(x.to_bits() & EXP == EXP)) == 0
}

/// `z[k, t, o] = Σ_c x[k, c] · w[o, c, t]`.
fn project_taps(x: &[f64], w: &[f64], m: usize, d: usize, o: usize) -> Vec<f64> {
    let mut z = vec![0.0; m * 9 * o];
    for oc in 0..o {
        let zo = gemm_new(m, d, 9, x, false, &w[oc * d * 9..(oc + 1) * d * 9], false);
        for (dst, v) in z.iter_mut().skip(oc).step_by(o).zip(zo) {
            *dst = v;
        }
    }
    z
}
