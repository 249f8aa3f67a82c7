// SPDX-License-Identifier: Apache-2.0
//! Grid projection of node embeddings and the multi-scale convolutional
//! decoder that turns the painted field into a deformation map.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::floorplan::Floorplan;
use crate::tensor::{Bound, Footprints, Graph, ParamStore, ProjConvPlan, Tensor, TensorError, Var};

/// Cells whose centre lies in each die's half-open footprint. Grid row `i`
/// runs along y, column `j` along x.
pub fn footprints(fp: &Floorplan, height: usize, width: usize) -> Footprints {
    let (pw, ph) = (fp.config.pkg_width, fp.config.pkg_height);
    let (sx, sy) = (pw / width as f64, ph / height as f64);
    // Candidate index window around a die edge, widened by one cell so the
    // exact containment test below decides every boundary case.
    let window = |lo: f64, len: f64, step: f64, n: usize| {
        let a = ((lo / step - 0.5).floor() as isize - 1).max(0) as usize;
        let b = (((lo + len) / step + 0.5).ceil() as isize + 1).clamp(0, n as isize) as usize;
        a.min(n)..b
    };
    let mut owner = vec![usize::MAX; height * width];
    for (k, d) in fp.dies.iter().enumerate() {
        for i in window(d.y_origin, d.height, sy, height) {
            let y = (i as f64 + 0.5) * sy;
            for j in window(d.x_origin, d.width, sx, width) {
                let x = (j as f64 + 0.5) * sx;
                let o = &mut owner[i * width + j];
                if *o == usize::MAX && d.contains(x, y) {
                    *o = k;
                }
            }
        }
    }
    let mut cells = vec![Vec::new(); fp.dies.len()];
    for (c, &k) in owner.iter().enumerate() {
        if k != usize::MAX {
            cells[k].push(c);
        }
    }
    Footprints { height, width, cells }
}

/// Per-floorplan projection data reused across forward passes.
#[derive(Clone, Debug)]
pub struct GridPlan {
    pub footprints: Arc<Footprints>,
    full: Arc<ProjConvPlan>,
    half: Arc<ProjConvPlan>,
}

impl GridPlan {
    pub fn new(fp: &Floorplan, height: usize, width: usize) -> Result<Self, TensorError> {
        if height < 8 || width < 8 || height % 8 != 0 || width % 8 != 0 {
            return Err(TensorError::Shape(format!(
                "decoder grid must be a multiple of 8 and at least 8, got {height}x{width}"
            )));
        }
        let footprints = footprints(fp, height, width);
        Ok(Self {
            full: Arc::new(ProjConvPlan::new(&footprints, 1)),
            half: Arc::new(ProjConvPlan::new(&footprints, 2)),
            footprints: Arc::new(footprints),
        })
    }

    pub fn height(&self) -> usize {
        self.footprints.height
    }

    pub fn width(&self) -> usize {
        self.footprints.width
    }
}

/// Channel widths along the contracting path (`c1`..`c3`), at the
/// bottleneck, and of the full-resolution block before the 1×1 head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub c1: usize,
    pub c2: usize,
    pub c3: usize,
    pub bottleneck: usize,
    pub top: usize,
}

impl DecoderConfig {
    /// Narrow widths that keep single-sample inference in the low milliseconds.
    pub fn compact() -> Self {
        Self {
            c1: 8,
            c2: 16,
            c3: 32,
            bottleneck: 32,
            top: 8,
        }
    }

    pub fn wide() -> Self {
        Self {
            c1: 64,
            c2: 128,
            c3: 256,
            bottleneck: 256,
            top: 64,
        }
    }
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self::compact()
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvBlock {
    w: usize,
    b: usize,
}

/// `conv(concat(upsample2(x), skip))` with the kernel stored as its two
/// channel halves.
#[derive(Clone, Copy, Debug)]
struct UpBlock {
    w_up: usize,
    w_skip: usize,
    b: usize,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    e1: ConvBlock,
    e2: ConvBlock,
    e3: ConvBlock,
    mid: ConvBlock,
    d3: UpBlock,
    d2: UpBlock,
    /// Its skip input is the painted field at full resolution.
    d1: UpBlock,
    head: ConvBlock,
}

fn conv_block(store: &mut ParamStore, name: &str, o: usize, c: usize, rng: &mut impl Rng) -> ConvBlock {
    ConvBlock {
        w: store.add(format!("{name}.w"), Tensor::he(vec![o, c, 3, 3], 9 * c, rng)),
        b: store.add(format!("{name}.b"), Tensor::zeros(vec![o])),
    }
}

fn up_block(store: &mut ParamStore, name: &str, o: usize, c_up: usize, c_skip: usize, rng: &mut impl Rng) -> UpBlock {
    let fan = 9 * (c_up + c_skip);
    UpBlock {
        w_up: store.add(format!("{name}.w_up"), Tensor::he(vec![o, c_up, 3, 3], fan, rng)),
        w_skip: store.add(format!("{name}.w_skip"), Tensor::he(vec![o, c_skip, 3, 3], fan, rng)),
        b: store.add(format!("{name}.b"), Tensor::zeros(vec![o])),
    }
}

impl Decoder {
    pub fn new(config: DecoderConfig, hidden: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let DecoderConfig {
            c1,
            c2,
            c3,
            bottleneck,
            top,
        } = config;
        let e1 = conv_block(store, "dec.e1", c1, hidden, rng);
        let e2 = conv_block(store, "dec.e2", c2, c1, rng);
        let e3 = conv_block(store, "dec.e3", c3, c2, rng);
        let mid = conv_block(store, "dec.mid", bottleneck, c3, rng);
        let d3 = up_block(store, "dec.d3", c2, bottleneck, c2, rng);
        let d2 = up_block(store, "dec.d2", c1, c2, c1, rng);
        let d1 = up_block(store, "dec.d1", top, c1, hidden, rng);
        let head = ConvBlock {
            w: store.add("dec.head.w", Tensor::glorot(vec![1, top], top, 1, rng)),
            b: store.add("dec.head.b", Tensor::zeros(vec![1])),
        };
        Self {
            config,
            e1,
            e2,
            e3,
            mid,
            d3,
            d2,
            d1,
            head,
        }
    }

    fn conv(&self, g: &mut Graph, p: &Bound, blk: ConvBlock, x: Var, stride: usize) -> Result<Var, TensorError> {
        let y = g.conv2d(x, p[blk.w], stride)?;
        g.bias_relu(y, p[blk.b], None)
    }

    fn up(&self, g: &mut Graph, p: &Bound, blk: UpBlock, x: Var, skip: Var) -> Result<Var, TensorError> {
        let y = g.upsample_conv(x, p[blk.w_up])?;
        g.bias_relu(y, p[blk.b], Some(skip))
    }

    /// Decodes node embeddings `[n, hidden]` to a `[1, H, W]` map.
    pub fn forward(&self, g: &mut Graph, p: &Bound, nodes: Var, plan: &GridPlan) -> Result<Var, TensorError> {
        let e1 = g.project_conv(nodes, p[self.e1.w], plan.half.clone())?;
        let e1 = g.bias_relu(e1, p[self.e1.b], None)?;
        let e2 = self.conv(g, p, self.e2, e1, 2)?;
        let e3 = self.conv(g, p, self.e3, e2, 2)?;
        let mid = self.conv(g, p, self.mid, e3, 1)?;

        let s = g.conv2d(e2, p[self.d3.w_skip], 1)?;
        let d3 = self.up(g, p, self.d3, mid, s)?;
        let s = g.conv2d(e1, p[self.d2.w_skip], 1)?;
        let d2 = self.up(g, p, self.d2, d3, s)?;
        // The painted field is never materialized.
        let s = g.project_conv(nodes, p[self.d1.w_skip], plan.full.clone())?;
        let d1 = self.up(g, p, self.d1, d2, s)?;

        let out = g.channel_mix(p[self.head.w], d1)?;
        g.add_channel_bias(out, p[self.head.b])
    }
}
