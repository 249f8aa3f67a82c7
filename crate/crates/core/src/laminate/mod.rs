// SPDX-License-Identifier: Apache-2.0
//! Plate-bending finite-element oracle for package warpage.
//!
//! Each die footprint carries the substrate/underfill/die laminate, the rest
//! of the package the bare substrate. In-plane strain is condensed out, so
//! the plate is governed by the reduced bending stiffness `D*` and thermal
//! moment `M_t*` of whichever laminate lies under each element.

pub mod clt;
pub mod dkt;
pub mod map;
pub mod mesh;
pub mod sparse;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use clt::{compute_abd, reduced_bending, LaminateAbd, ReducedBending};
pub use map::{warpage, DeformationMap, WarpageResult};
pub use mesh::{PlateMesh, Region};
pub use sparse::PcgReport;

use crate::floorplan::{Floorplan, MaterialLayer};
use dkt::DOFS;
use sparse::{BandCholesky, BandMatrix, Csr};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("laminate has no layers")]
    EmptyStack,
    #[error("non-positive layer thickness {0}")]
    NonPositiveThickness(f64),
    #[error("singular extensional stiffness")]
    SingularExtensional,
    #[error("invalid floorplan: {}", .0.join(", "))]
    InvalidFloorplan(Vec<String>),
    #[error("mesh {nx}x{ny} is below the 8x8 minimum")]
    MeshTooCoarse { nx: usize, ny: usize },
    #[error("system is not positive definite (pivot {pivot}); rigid-body motion under-constrained")]
    NotPositiveDefinite { pivot: usize },
    #[error("solver did not converge in {iterations} iterations (relative residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("constraint node {0} outside the mesh")]
    BadConstraint(usize),
    #[error("floorplan stiffness layout differs from the factored system")]
    GeometryMismatch,
    #[error("solution contains non-finite values")]
    NonFinite,
    #[error("bad deformation map: {0}")]
    BadMap(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Systems up to this many DOFs are factored directly.
pub const DIRECT_DOF_LIMIT: usize = 20_000;
pub const PCG_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    #[default]
    Auto,
    Direct,
    Iterative,
}

/// Nodes whose `w`, `θx` and `θy` are pinned to suppress rigid-body motion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintTriple {
    pub w_node: usize,
    pub theta_x_node: usize,
    pub theta_y_node: usize,
}

impl ConstraintTriple {
    /// Centre node, the `(0, 0)` corner and its neighbour along `x`.
    pub fn standard(nx: usize, ny: usize) -> Self {
        Self {
            w_node: (ny / 2) * nx + nx / 2,
            theta_x_node: 0,
            theta_y_node: nx - 1,
        }
    }

    fn dofs(&self) -> [usize; 3] {
        [3 * self.w_node, 3 * self.theta_x_node + 1, 3 * self.theta_y_node + 2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleOptions {
    pub nx: usize,
    pub ny: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub solver: SolverKind,
    /// `None` selects [`ConstraintTriple::standard`].
    pub constraint: Option<ConstraintTriple>,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            nx: 65,
            ny: 65,
            out_h: 64,
            out_w: 64,
            solver: SolverKind::Auto,
            constraint: None,
        }
    }
}

impl OracleOptions {
    pub fn with_mesh(nx: usize, ny: usize) -> Self {
        Self {
            nx,
            ny,
            ..Self::default()
        }
    }
}

fn die_stack(fp: &Floorplan, die_cte: f64) -> [MaterialLayer; 3] {
    let l = &fp.config.layers;
    [l.substrate, l.underfill, l.die.with_cte(die_cte)]
}

/// Reduced laminate of every region: the bare substrate first, then one
/// entry per die in floorplan order.
pub fn region_laminates(fp: &Floorplan) -> Result<Vec<ReducedBending>, OracleError> {
    let dt = fp.config.delta_t;
    let mut out = vec![reduced_bending(&compute_abd(&[fp.config.layers.substrate], dt)?)?];
    for d in &fp.dies {
        out.push(reduced_bending(&compute_abd(&die_stack(fp, d.cte), dt)?)?);
    }
    Ok(out)
}

fn region_index(r: Region) -> usize {
    match r {
        Region::Substrate => 0,
        Region::Die(k) => k + 1,
    }
}

fn same_stiffness_layout(a: &Floorplan, b: &Floorplan) -> bool {
    let stiff = |l: &MaterialLayer| (l.youngs_modulus, l.poisson_ratio, l.thickness);
    let (la, lb) = (&a.config.layers, &b.config.layers);
    a.config.pkg_width == b.config.pkg_width
        && a.config.pkg_height == b.config.pkg_height
        && stiff(&la.die) == stiff(&lb.die)
        && stiff(&la.underfill) == stiff(&lb.underfill)
        && stiff(&la.substrate) == stiff(&lb.substrate)
        && a.dies.len() == b.dies.len()
        && a.dies.iter().zip(&b.dies).all(|(p, q)| {
            (p.x_origin, p.y_origin, p.width, p.height) == (q.x_origin, q.y_origin, q.width, q.height)
        })
}

enum Factor {
    Direct(BandCholesky),
    Iterative(Csr),
}

/// Assembled and factored stiffness for one floorplan geometry. Die CTEs
/// and ΔT only enter the load, so one system serves every CTE assignment.
pub struct PlateSystem {
    template: Floorplan,
    options: OracleOptions,
    mesh: PlateMesh,
    pinned: [usize; 3],
    factor: Factor,
}

/// Nodal and resampled solution. Nodal `w` is in µm with the best-fit plane
/// removed.
#[derive(Clone, Debug)]
pub struct PlateSolution {
    pub nx: usize,
    pub ny: usize,
    pub node_dx: f64,
    pub node_dy: f64,
    pub nodal_w: Vec<f64>,
    pub map: DeformationMap,
    pub pcg: Option<PcgReport>,
}

impl PlateSystem {
    pub fn new(fp: &Floorplan, options: &OracleOptions) -> Result<Self, OracleError> {
        let report = fp.validate();
        if !report.is_ok() {
            return Err(OracleError::InvalidFloorplan(report.messages()));
        }
        let (nx, ny) = (options.nx, options.ny);
        if nx < 8 || ny < 8 || options.out_h < 2 || options.out_w < 2 {
            return Err(OracleError::MeshTooCoarse { nx, ny });
        }
        let mesh = PlateMesh::new(fp, nx, ny);
        let constraint = options.constraint.unwrap_or_else(|| ConstraintTriple::standard(nx, ny));
        for node in [constraint.w_node, constraint.theta_x_node, constraint.theta_y_node] {
            if node >= mesh.node_count() {
                return Err(OracleError::BadConstraint(node));
            }
        }
        let laminates = region_laminates(fp)?;
        let elements: Vec<[[f64; DOFS]; DOFS]> = (0..mesh.triangles.len())
            .into_par_iter()
            .map(|t| {
                let lam = &laminates[region_index(mesh.regions[t])];
                mesh.triangle(t).stiffness_and_load(&lam.d_star, &[0.0; 3]).0
            })
            .collect();
        let n = 3 * mesh.node_count();
        let bandwidth = 3 * (nx + 1) + 2;
        let mut k = BandMatrix::zeros(n, bandwidth);
        for (ids, ke) in mesh.triangles.iter().zip(&elements) {
            for (a, row) in ke.iter().enumerate() {
                let ga = 3 * ids[a / 3] + a % 3;
                for (b, &v) in row.iter().enumerate() {
                    k.add(ga, 3 * ids[b / 3] + b % 3, v);
                }
            }
        }
        let pinned = constraint.dofs();
        for &d in &pinned {
            k.pin(d);
        }
        let direct = match options.solver {
            SolverKind::Auto => n <= DIRECT_DOF_LIMIT,
            SolverKind::Direct => true,
            SolverKind::Iterative => false,
        };
        let factor = if direct {
            Factor::Direct(k.cholesky()?)
        } else {
            Factor::Iterative(k.to_csr())
        };
        Ok(Self {
            template: fp.clone(),
            options: *options,
            mesh,
            pinned,
            factor,
        })
    }

    pub fn mesh(&self) -> &PlateMesh {
        &self.mesh
    }

    /// Solves for `fp`, which must share this system's geometry and layer
    /// stiffnesses; CTEs and ΔT may differ.
    pub fn solve(&self, fp: &Floorplan) -> Result<PlateSolution, OracleError> {
        if !same_stiffness_layout(&self.template, fp) {
            return Err(OracleError::GeometryMismatch);
        }
        let mesh = &self.mesh;
        let laminates = region_laminates(fp)?;
        let mut f = vec![0.0; 3 * mesh.node_count()];
        for (t, ids) in mesh.triangles.iter().enumerate() {
            let lam = &laminates[region_index(mesh.regions[t])];
            if lam.m_t_star.iter().all(|&m| m == 0.0) {
                continue;
            }
            let (_, fe) = mesh.triangle(t).stiffness_and_load(&lam.d_star, &lam.m_t_star);
            for (a, v) in fe.iter().enumerate() {
                f[3 * ids[a / 3] + a % 3] += v;
            }
        }
        for &d in &self.pinned {
            f[d] = 0.0;
        }
        let (u, pcg) = match &self.factor {
            Factor::Direct(l) => (l.solve(&f), None),
            Factor::Iterative(a) => {
                let (u, rep) = sparse::pcg(a, &f, PCG_TOLERANCE, 20 * a.n)?;
                (u, Some(rep))
            }
        };
        let mut w: Vec<f64> = u.iter().step_by(3).map(|v| v * 1e3).collect();
        if w.iter().any(|v| !v.is_finite()) {
            return Err(OracleError::NonFinite);
        }
        remove_best_fit_plane(mesh, &mut w);
        let map = resample(mesh, &w, self.options.out_h, self.options.out_w)?;
        Ok(PlateSolution {
            nx: mesh.nx,
            ny: mesh.ny,
            node_dx: mesh.dx,
            node_dy: mesh.dy,
            nodal_w: w,
            map,
            pcg,
        })
    }
}

/// Subtracts the least-squares plane `a + b x + c y` over all nodes. The
/// plate is free, so the pinned triple only selects one rigid tilt among
/// many; removing the fitted plane makes the field independent of that
/// choice.
fn remove_best_fit_plane(mesh: &PlateMesh, w: &mut [f64]) {
    let mut ata = [[0.0; 3]; 3];
    let mut atb = [0.0; 3];
    for (n, &v) in w.iter().enumerate() {
        let [x, y] = mesh.node_xy(n);
        let phi = [1.0, x, y];
        for i in 0..3 {
            atb[i] += phi[i] * v;
            for j in 0..3 {
                ata[i][j] += phi[i] * phi[j];
            }
        }
    }
    let inv = clt::mat_inv(&ata).expect("node grid spans the plane");
    let c = clt::mat_vec(&inv, &atb);
    for (n, v) in w.iter_mut().enumerate() {
        let [x, y] = mesh.node_xy(n);
        *v -= c[0] + c[1] * x + c[2] * y;
    }
}

fn resample(mesh: &PlateMesh, w: &[f64], out_h: usize, out_w: usize) -> Result<DeformationMap, OracleError> {
    let pw = mesh.dx * (mesh.nx - 1) as f64;
    let ph = mesh.dy * (mesh.ny - 1) as f64;
    let (cdx, cdy) = (pw / out_w as f64, ph / out_h as f64);
    let locate = |p: f64, n: usize| {
        let k = (p.floor() as usize).min(n - 2);
        (k, p - k as f64)
    };
    let mut values = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let (r, ty) = locate((i as f64 + 0.5) * cdy / mesh.dy, mesh.ny);
        for j in 0..out_w {
            let (c, tx) = locate((j as f64 + 0.5) * cdx / mesh.dx, mesh.nx);
            let at = |ri: usize, ci: usize| w[ri * mesh.nx + ci];
            let lo = at(r, c) * (1.0 - tx) + at(r, c + 1) * tx;
            let hi = at(r + 1, c) * (1.0 - tx) + at(r + 1, c + 1) * tx;
            values.push(lo * (1.0 - ty) + hi * ty);
        }
    }
    DeformationMap::new(out_h, out_w, cdx, cdy, values)
}

/// Full solve with explicit options.
pub fn solve_plate_with(fp: &Floorplan, options: &OracleOptions) -> Result<PlateSolution, OracleError> {
    PlateSystem::new(fp, options)?.solve(fp)
}

/// Deformation on the default 64×64 output grid from an `nx × ny` node mesh.
pub fn solve_plate(fp: &Floorplan, nx: usize, ny: usize) -> Result<DeformationMap, OracleError> {
    Ok(solve_plate_with(fp, &OracleOptions::with_mesh(nx, ny))?.map)
}
