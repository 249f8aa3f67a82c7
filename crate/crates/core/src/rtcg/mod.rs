// SPDX-License-Identifier: Apache-2.0
//! Reduced transitive closure graphs (rTCG) of multi-die floorplans.
//!
//! Every die pair is related either horizontally (`u` left of `v`) or
//! vertically (`u` below `v`). The raw precedence edges are closed, then
//! transitively reduced per relation, and the surviving edges carry the
//! features consumed by the graph encoders.

mod closure;

pub use closure::{reachability, topological_order, transitive_closure, transitive_reduction, Reachability};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::floorplan::{normalized_geometry, Die, Floorplan, PackageConfig};

pub const NODE_FEATURES: usize = 7;
pub const EDGE_FEATURES: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum RtcgError {
    #[error("directed cycle through nodes {0:?}")]
    Cycle(Vec<usize>),
    #[error("edge endpoint {node} out of range for {n} nodes")]
    NodeOutOfRange { node: usize, n: usize },
    #[error("no precedence between dies {0} and {1}: footprints overlap")]
    NoPrecedence(u32, u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Relation {
    H,
    V,
}

/// Stiffness-thickness weighted CTE of the die + underfill composite.
pub fn effective_cte(die_cte: f64, cfg: &PackageConfig) -> f64 {
    let die = &cfg.layers.die;
    let fill = &cfg.layers.underfill;
    let wd = die.youngs_modulus * die.thickness;
    let wf = fill.youngs_modulus * fill.thickness;
    (wd * die_cte + wf * fill.cte) / (wd + wf)
}

/// Raw horizontal and vertical precedence edges over die indices.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PrecedenceEdges {
    pub h: Vec<(usize, usize)>,
    pub v: Vec<(usize, usize)>,
}

fn relate(a: &Die, b: &Die, cfg: &PackageConfig) -> Option<(Relation, bool)> {
    // (relation, a_first)
    let h = if a.right() <= b.left() {
        Some(((b.left() - a.right()) / cfg.pkg_width, true))
    } else if b.right() <= a.left() {
        Some(((a.left() - b.right()) / cfg.pkg_width, false))
    } else {
        None
    };
    let v = if a.top() <= b.bottom() {
        Some(((b.bottom() - a.top()) / cfg.pkg_height, true))
    } else if b.top() <= a.bottom() {
        Some(((a.bottom() - b.top()) / cfg.pkg_height, false))
    } else {
        None
    };
    match (h, v) {
        (Some((gh, fh)), Some((gv, fv))) => {
            if gv > gh {
                Some((Relation::V, fv))
            } else {
                Some((Relation::H, fh))
            }
        }
        (Some((_, f)), None) => Some((Relation::H, f)),
        (None, Some((_, f))) => Some((Relation::V, f)),
        (None, None) => None,
    }
}

/// One directed edge per unordered die pair, in exactly one relation.
/// When a pair is separated along both axes the larger normalized gap wins,
/// with ties going to the horizontal relation.
pub fn insert_precede_edges(fp: &Floorplan) -> Result<PrecedenceEdges, RtcgError> {
    let mut out = PrecedenceEdges::default();
    for i in 0..fp.dies.len() {
        for j in i + 1..fp.dies.len() {
            let (a, b) = (&fp.dies[i], &fp.dies[j]);
            let (rel, a_first) = relate(a, b, &fp.config).ok_or(RtcgError::NoPrecedence(a.id, b.id))?;
            let e = if a_first { (i, j) } else { (j, i) };
            match rel {
                Relation::H => out.h.push(e),
                Relation::V => out.v.push(e),
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RtcgEdge {
    pub u: usize,
    pub v: usize,
    pub kind: Relation,
    /// `[τ_H, τ_V, Δx, Δy, gap, Δα_eff, Δw, Δh]`.
    pub features: [f64; EDGE_FEATURES],
}

/// Attributed reduced TCG. Node `i` is `fp.dies[i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RtcgGraph {
    /// `[w̃, h̃, x̃_c, ỹ_c, α, α_eff, α_eff − α_sub]` per die.
    pub nodes: Vec<[f64; NODE_FEATURES]>,
    pub edges: Vec<RtcgEdge>,
}

impl RtcgGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edges_of(&self, kind: Relation) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().filter(move |e| e.kind == kind).map(|e| (e.u, e.v))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("graph serializes")
    }
}

pub fn node_feature(d: &Die, cfg: &PackageConfig) -> [f64; NODE_FEATURES] {
    let [w, h, xc, yc] = normalized_geometry(d, cfg);
    let eff = effective_cte(d.cte, cfg);
    [w, h, xc, yc, d.cte, eff, eff - cfg.layers.substrate.cte]
}

fn edge_feature(
    kind: Relation,
    a: &Die,
    b: &Die,
    xa: &[f64; NODE_FEATURES],
    xb: &[f64; NODE_FEATURES],
    cfg: &PackageConfig,
) -> [f64; EDGE_FEATURES] {
    let (onehot, gap) = match kind {
        Relation::H => ([1.0, 0.0], (b.left() - a.right()).max(0.0) / cfg.pkg_width),
        Relation::V => ([0.0, 1.0], (b.bottom() - a.top()).max(0.0) / cfg.pkg_height),
    };
    [
        onehot[0],
        onehot[1],
        xb[2] - xa[2],
        xb[3] - xa[3],
        gap,
        xa[5] - xb[5],
        xa[0] - xb[0],
        xa[1] - xb[1],
    ]
}

/// Builds the attributed rTCG of a valid floorplan.
pub fn build_rtcg(fp: &Floorplan) -> Result<RtcgGraph, RtcgError> {
    let n = fp.dies.len();
    let raw = insert_precede_edges(fp)?;
    let h = transitive_reduction(n, &transitive_closure(n, &raw.h)?)?;
    let v = transitive_reduction(n, &transitive_closure(n, &raw.v)?)?;

    let nodes: Vec<_> = fp.dies.iter().map(|d| node_feature(d, &fp.config)).collect();
    let mut edges = Vec::with_capacity(h.len() + v.len());
    for (kind, list) in [(Relation::H, h), (Relation::V, v)] {
        for (u, w) in list {
            let features = edge_feature(kind, &fp.dies[u], &fp.dies[w], &nodes[u], &nodes[w], &fp.config);
            edges.push(RtcgEdge { u, v: w, kind, features });
        }
    }
    Ok(RtcgGraph { nodes, edges })
}
