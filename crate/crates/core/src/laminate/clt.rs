// SPDX-License-Identifier: Apache-2.0
//! Classical laminate theory for stacks of isotropic layers.
//!
//! Units: stiffness in N/mm² (GPa × 10³), lengths in mm, so `A` is N/mm,
//! `B` is N, `D` is N·mm; thermal resultants `N_t` in N/mm and `M_t` in N.

use serde::{Deserialize, Serialize};

use super::OracleError;
use crate::floorplan::MaterialLayer;

pub type Mat3 = [[f64; 3]; 3];
pub type Vec3 = [f64; 3];

pub(crate) fn mat_add(a: &Mat3, b: &Mat3, s: f64) -> Mat3 {
    let mut out = *a;
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] += s * b[i][j];
        }
    }
    out
}

pub(crate) fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub(crate) fn mat_vec(a: &Mat3, x: &Vec3) -> Vec3 {
    let mut out = [0.0; 3];
    for i in 0..3 {
        out[i] = (0..3).map(|k| a[i][k] * x[k]).sum();
    }
    out
}

pub(crate) fn mat_inv(a: &Mat3) -> Option<Mat3> {
    let c = |i: usize, j: usize| {
        let (r0, r1) = ((i + 1) % 3, (i + 2) % 3);
        let (c0, c1) = ((j + 1) % 3, (j + 2) % 3);
        a[r0][c0] * a[r1][c1] - a[r0][c1] * a[r1][c0]
    };
    let det = a[0][0] * c(0, 0) + a[0][1] * c(0, 1) + a[0][2] * c(0, 2);
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    if !det.is_finite() || det.abs() <= 1e-14 * scale.powi(3) {
        return None;
    }
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[j][i] = c(i, j) / det;
        }
    }
    Some(out)
}

/// Sylvester's criterion on a symmetric 3×3 matrix.
#[cfg(test)]
pub(crate) fn is_spd(a: &Mat3) -> bool {
    let m1 = a[0][0];
    let m2 = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let m3 = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
    m1 > 0.0 && m2 > 0.0 && m3 > 0.0
}

/// Plane-stress reduced stiffness of an isotropic layer, N/mm².
pub fn plane_stress_stiffness(layer: &MaterialLayer) -> Mat3 {
    let e = layer.youngs_modulus * 1e3;
    let nu = layer.poisson_ratio;
    let q11 = e / (1.0 - nu * nu);
    let q12 = nu * q11;
    let q66 = e / (2.0 * (1.0 + nu));
    [[q11, q12, 0.0], [q12, q11, 0.0], [0.0, 0.0, q66]]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaminateAbd {
    pub a: Mat3,
    pub b: Mat3,
    pub d: Mat3,
    pub n_t: Vec3,
    pub m_t: Vec3,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReducedBending {
    pub d_star: Mat3,
    pub m_t_star: Vec3,
}

/// ABD matrices and thermal resultants of `stack` (bottom layer first) about
/// the mid-plane of the whole stack.
pub fn compute_abd(stack: &[MaterialLayer], delta_t: f64) -> Result<LaminateAbd, OracleError> {
    let total: f64 = stack.iter().map(|l| l.thickness).sum();
    compute_abd_about(stack, delta_t, 0.5 * total)
}

/// As [`compute_abd`], with the reference plane `z_ref` measured from the
/// bottom face of the stack.
pub fn compute_abd_about(stack: &[MaterialLayer], delta_t: f64, z_ref: f64) -> Result<LaminateAbd, OracleError> {
    if stack.is_empty() {
        return Err(OracleError::EmptyStack);
    }
    let mut abd = LaminateAbd {
        a: [[0.0; 3]; 3],
        b: [[0.0; 3]; 3],
        d: [[0.0; 3]; 3],
        n_t: [0.0; 3],
        m_t: [0.0; 3],
    };
    let mut z0 = -z_ref;
    for layer in stack {
        if !(layer.thickness > 0.0) {
            return Err(OracleError::NonPositiveThickness(layer.thickness));
        }
        let z1 = z0 + layer.thickness;
        let q = plane_stress_stiffness(layer);
        let (d1, d2, d3) = (z1 - z0, 0.5 * (z1 * z1 - z0 * z0), (z1.powi(3) - z0.powi(3)) / 3.0);
        abd.a = mat_add(&abd.a, &q, d1);
        abd.b = mat_add(&abd.b, &q, d2);
        abd.d = mat_add(&abd.d, &q, d3);
        let strain = layer.cte * 1e-6 * delta_t;
        let stress = mat_vec(&q, &[strain, strain, 0.0]);
        for i in 0..3 {
            abd.n_t[i] += stress[i] * d1;
            abd.m_t[i] += stress[i] * d2;
        }
        z0 = z1;
    }
    Ok(abd)
}

/// Condenses the in-plane response: `D* = D − B A⁻¹ B`,
/// `M_t* = M_t − B A⁻¹ N_t`.
pub fn reduced_bending(abd: &LaminateAbd) -> Result<ReducedBending, OracleError> {
    let a_inv = mat_inv(&abd.a).ok_or(OracleError::SingularExtensional)?;
    let ba = mat_mul(&abd.b, &a_inv);
    let d_star = mat_add(&abd.d, &mat_mul(&ba, &abd.b), -1.0);
    let ban = mat_vec(&ba, &abd.n_t);
    let m_t_star = [abd.m_t[0] - ban[0], abd.m_t[1] - ban[1], abd.m_t[2] - ban[2]];
    Ok(ReducedBending { d_star, m_t_star })
}

impl ReducedBending {
    /// Stress-free curvature `(D*)⁻¹ M_t*` of an unconstrained plate.
    pub fn free_curvature(&self) -> Option<Vec3> {
        mat_inv(&self.d_star).map(|inv| mat_vec(&inv, &self.m_t_star))
    }
}
