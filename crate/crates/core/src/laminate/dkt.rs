// SPDX-License-Identifier: Apache-2.0
//! Discrete Kirchhoff triangle.
//!
//! Nodal DOFs are `(w, θx, θy)` with `θx = ∂w/∂y` and `θy = −∂w/∂x`. The
//! slope field `β ≈ ∇w` is interpolated quadratically from corner slopes and
//! midside slopes; the Kirchhoff constraint fixes the midside tangential slope
//! to that of the cubic edge interpolant and the normal slope to the mean of
//! the corner normals.

use super::clt::{Mat3, Vec3};

pub const DOFS: usize = 9;

/// Curvature-displacement matrix: `κ = B a` with
/// `κ = [w,xx, w,yy, 2 w,xy]`.
pub type BMat = [[f64; DOFS]; 3];

/// Three-point interior rule in area coordinates, weights summing to 1.
pub const QUADRATURE: [([f64; 3], f64); 3] = [
    ([2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0], 1.0 / 3.0),
    ([1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0], 1.0 / 3.0),
    ([1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0], 1.0 / 3.0),
];

/// Triangle with counter-clockwise corners.
#[derive(Clone, Copy, Debug)]
pub struct Triangle {
    pub xy: [[f64; 2]; 3],
}

impl Triangle {
    pub fn area(&self) -> f64 {
        let [p0, p1, p2] = self.xy;
        0.5 * ((p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]))
    }

    pub fn centroid(&self) -> [f64; 2] {
        let [p0, p1, p2] = self.xy;
        [(p0[0] + p1[0] + p2[0]) / 3.0, (p0[1] + p1[1] + p2[1]) / 3.0]
    }

    /// Slope interpolation rows for each of the six quadratic nodes:
    /// `β_k = T_k a`, corners first, then midsides of edges 1-2, 2-0, 0-1.
    fn slope_rows(&self) -> [[[f64; DOFS]; 2]; 6] {
        let mut t = [[[0.0; DOFS]; 2]; 6];
        for (i, ti) in t.iter_mut().enumerate().take(3) {
            ti[0][3 * i + 2] = -1.0;
            ti[1][3 * i + 1] = 1.0;
        }
        for (m, (i, j)) in [(1usize, 2usize), (2, 0), (0, 1)].into_iter().enumerate() {
            let dx = self.xy[j][0] - self.xy[i][0];
            let dy = self.xy[j][1] - self.xy[i][1];
            let l = (dx * dx + dy * dy).sqrt();
            let s = [dx / l, dy / l];
            let row = &mut t[3 + m];
            for r in 0..2 {
                let c = 1.5 * s[r] / l;
                row[r][3 * i] -= c;
                row[r][3 * j] += c;
                // P = I/2 − (3/4) s sᵀ acting on g = (−θy, θx).
                let p0 = if r == 0 { 0.5 } else { 0.0 } - 0.75 * s[r] * s[0];
                let p1 = if r == 1 { 0.5 } else { 0.0 } - 0.75 * s[r] * s[1];
                for n in [i, j] {
                    row[r][3 * n + 1] += p1;
                    row[r][3 * n + 2] -= p0;
                }
            }
        }
        t
    }

    /// Gradients of the six quadratic shape functions at area coordinates `l`.
    fn shape_gradients(&self, l: [f64; 3]) -> [[f64; 2]; 6] {
        let a2 = 2.0 * self.area();
        let mut dl = [[0.0; 2]; 3];
        for (i, d) in dl.iter_mut().enumerate() {
            let j = (i + 1) % 3;
            let k = (i + 2) % 3;
            d[0] = (self.xy[j][1] - self.xy[k][1]) / a2;
            d[1] = (self.xy[k][0] - self.xy[j][0]) / a2;
        }
        let mut g = [[0.0; 2]; 6];
        for c in 0..2 {
            for i in 0..3 {
                g[i][c] = (4.0 * l[i] - 1.0) * dl[i][c];
            }
            for (m, (i, j)) in [(1usize, 2usize), (2, 0), (0, 1)].into_iter().enumerate() {
                g[3 + m][c] = 4.0 * (l[i] * dl[j][c] + l[j] * dl[i][c]);
            }
        }
        g
    }

    pub fn b_matrix(&self, l: [f64; 3]) -> BMat {
        let t = self.slope_rows();
        let g = self.shape_gradients(l);
        let mut b = [[0.0; DOFS]; 3];
        for k in 0..6 {
            for d in 0..DOFS {
                b[0][d] += g[k][0] * t[k][0][d];
                b[1][d] += g[k][1] * t[k][1][d];
                b[2][d] += g[k][1] * t[k][0][d] + g[k][0] * t[k][1][d];
            }
        }
        b
    }

    /// Element stiffness `∫ Bᵀ D B` and load `−∫ Bᵀ M` for bending stiffness
    /// `d` and thermal moment `m`.
    pub fn stiffness_and_load(&self, d: &Mat3, m: &Vec3) -> ([[f64; DOFS]; DOFS], [f64; DOFS]) {
        let area = self.area();
        let mut k = [[0.0; DOFS]; DOFS];
        let mut f = [0.0; DOFS];
        for (l, w) in QUADRATURE {
            let b = self.b_matrix(l);
            let wa = w * area;
            let mut db = [[0.0; DOFS]; 3];
            for r in 0..3 {
                for c in 0..DOFS {
                    db[r][c] = d[r][0] * b[0][c] + d[r][1] * b[1][c] + d[r][2] * b[2][c];
                }
            }
            for i in 0..DOFS {
                for j in 0..DOFS {
                    k[i][j] += wa * (b[0][i] * db[0][j] + b[1][i] * db[1][j] + b[2][i] * db[2][j]);
                }
                f[i] -= wa * (b[0][i] * m[0] + b[1][i] * m[1] + b[2][i] * m[2]);
            }
        }
        (k, f)
    }
}
