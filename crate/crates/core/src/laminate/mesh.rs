// SPDX-License-Identifier: Apache-2.0
//! Structured triangulation of the package domain.

use super::dkt::Triangle;
use crate::floorplan::Floorplan;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Substrate,
    /// Index into `Floorplan::dies`.
    Die(usize),
}

/// `nx × ny` nodes, node `(i, j)` at `(j·dx, i·dy)` with index `i·nx + j`.
///
/// Cells are split along alternating diagonals so that the triangulation is
/// mirror-symmetric about both package axes whenever the cell counts are even.
#[derive(Clone, Debug)]
pub struct PlateMesh {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
    pub triangles: Vec<[usize; 3]>,
    pub regions: Vec<Region>,
}

impl PlateMesh {
    pub fn new(fp: &Floorplan, nx: usize, ny: usize) -> Self {
        let (w, h) = (fp.config.pkg_width, fp.config.pkg_height);
        let dx = w / (nx - 1) as f64;
        let dy = h / (ny - 1) as f64;
        let (cx, cy) = (nx - 1, ny - 1);
        let mut triangles = Vec::with_capacity(2 * cx * cy);
        for i in 0..cy {
            for j in 0..cx {
                let n00 = i * nx + j;
                let n10 = n00 + 1;
                let n01 = n00 + nx;
                let n11 = n01 + 1;
                let lower_left = (2 * j + 1 < cx) == (2 * i + 1 < cy);
                if lower_left {
                    triangles.push([n00, n10, n11]);
                    triangles.push([n00, n11, n01]);
                } else {
                    triangles.push([n00, n10, n01]);
                    triangles.push([n10, n11, n01]);
                }
            }
        }
        let mut mesh = Self {
            nx,
            ny,
            dx,
            dy,
            triangles,
            regions: Vec::new(),
        };
        mesh.regions = (0..mesh.triangles.len())
            .map(|t| {
                let [x, y] = mesh.triangle(t).centroid();
                fp.dies
                    .iter()
                    .position(|d| d.contains(x, y))
                    .map_or(Region::Substrate, Region::Die)
            })
            .collect();
        mesh
    }

    pub fn node_count(&self) -> usize {
        self.nx * self.ny
    }

    pub fn node_xy(&self, n: usize) -> [f64; 2] {
        [(n % self.nx) as f64 * self.dx, (n / self.nx) as f64 * self.dy]
    }

    pub fn triangle(&self, t: usize) -> Triangle {
        let ids = self.triangles[t];
        Triangle {
            xy: [self.node_xy(ids[0]), self.node_xy(ids[1]), self.node_xy(ids[2])],
        }
    }

    /// Node nearest the package centre.
    pub fn center_node(&self) -> usize {
        (self.ny / 2) * self.nx + self.nx / 2
    }
}
