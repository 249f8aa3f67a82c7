// SPDX-License-Identifier: Apache-2.0
//! Symmetric sparse storage and solvers for the assembled plate system.

use super::OracleError;

/// Lower-triangle band storage with half-bandwidth `b`: entry `(i, j)`,
/// `i − b ≤ j ≤ i`, lives at `i·(b+1) + j + b − i`.
#[derive(Clone, Debug)]
pub struct BandMatrix {
    pub n: usize,
    pub b: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, b: usize) -> Self {
        Self {
            n,
            b,
            data: vec![0.0; n * (b + 1)],
        }
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.b);
        i * (self.b + 1) + j + self.b - i
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.b {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    /// Adds `v` to `(i, j)`; entries above the diagonal are ignored so that a
    /// full symmetric element matrix can be scattered directly.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        if j <= i {
            let k = self.idx(i, j);
            self.data[k] += v;
        }
    }

    /// Replaces row and column `i` by the identity row.
    pub fn pin(&mut self, i: usize) {
        for j in i.saturating_sub(self.b)..i {
            let k = self.idx(i, j);
            self.data[k] = 0.0;
        }
        for r in i + 1..(i + self.b + 1).min(self.n) {
            let k = self.idx(r, i);
            self.data[k] = 0.0;
        }
        let k = self.idx(i, i);
        self.data[k] = 1.0;
    }

    pub fn to_csr(&self) -> Csr {
        let mut trip = Vec::new();
        for i in 0..self.n {
            for j in i.saturating_sub(self.b)..=i {
                let v = self.data[self.idx(i, j)];
                if v != 0.0 {
                    trip.push((i, j, v));
                    if i != j {
                        trip.push((j, i, v));
                    }
                }
            }
        }
        Csr::from_triplets(self.n, trip)
    }

    /// In-place `L Lᵀ` factorization.
    pub fn cholesky(mut self) -> Result<BandCholesky, OracleError> {
        let (n, b) = (self.n, self.b);
        let w = b + 1;
        for i in 0..n {
            let i0 = i.saturating_sub(b);
            for j in i0..=i {
                let ri = i * w + i0 + b - i;
                let rj = j * w + i0 + b - j;
                let len = j - i0;
                let dot: f64 = self.data[ri..ri + len]
                    .iter()
                    .zip(&self.data[rj..rj + len])
                    .map(|(x, y)| x * y)
                    .sum();
                let k = i * w + j + b - i;
                let s = self.data[k] - dot;
                if i == j {
                    if !(s > 0.0) {
                        return Err(OracleError::NotPositiveDefinite { pivot: i });
                    }
                    self.data[k] = s.sqrt();
                } else {
                    self.data[k] = s / self.data[j * w + b];
                }
            }
        }
        Ok(BandCholesky { l: self })
    }
}

#[derive(Clone, Debug)]
pub struct BandCholesky {
    l: BandMatrix,
}

impl BandCholesky {
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let (n, b) = (self.l.n, self.l.b);
        let w = b + 1;
        let d = &self.l.data;
        let mut y = rhs.to_vec();
        for i in 0..n {
            let i0 = i.saturating_sub(b);
            let r = i * w + i0 + b - i;
            let s: f64 = d[r..r + (i - i0)].iter().zip(&y[i0..i]).map(|(a, x)| a * x).sum();
            y[i] = (y[i] - s) / d[i * w + b];
        }
        for i in (0..n).rev() {
            y[i] /= d[i * w + b];
            let yi = y[i];
            let i0 = i.saturating_sub(b);
            let r = i * w + i0 + b - i;
            for (yk, a) in y[i0..i].iter_mut().zip(&d[r..r + (i - i0)]) {
                *yk -= a * yi;
            }
        }
        y
    }
}

/// Compressed sparse rows with sorted, de-duplicated columns.
#[derive(Clone, Debug)]
pub struct Csr {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl Csr {
    pub fn from_triplets(n: usize, mut trip: Vec<(usize, usize, f64)>) -> Self {
        trip.sort_unstable_by_key(|&(i, j, _)| (i, j));
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(trip.len());
        let mut vals: Vec<f64> = Vec::with_capacity(trip.len());
        let mut last = None;
        for (i, j, v) in trip {
            if last == Some((i, j)) {
                *vals.last_mut().expect("non-empty") += v;
            } else {
                cols.push(j);
                vals.push(v);
                row_ptr[i + 1] += 1;
                last = Some((i, j));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self { n, row_ptr, cols, vals }
    }

    pub fn mul(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.n {
            let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
            y[i] = self.cols[a..b].iter().zip(&self.vals[a..b]).map(|(&j, v)| v * x[j]).sum();
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
                self.cols[a..b]
                    .iter()
                    .position(|&j| j == i)
                    .map_or(0.0, |p| self.vals[a + p])
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PcgReport {
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Jacobi-preconditioned conjugate gradients from a zero initial guess.
pub fn pcg(a: &Csr, rhs: &[f64], tol: f64, max_iter: usize) -> Result<(Vec<f64>, PcgReport), OracleError> {
    let n = a.n;
    let inv_diag: Vec<f64> = a
        .diagonal()
        .into_iter()
        .map(|d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let bnorm = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok((
            x,
            PcgReport {
                iterations: 0,
                relative_residual: 0.0,
            },
        ));
    }
    let mut r = rhs.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, b)| a * b).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut rel = 1.0;
    for it in 1..=max_iter {
        a.mul(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if !(pap > 0.0) {
            return Err(OracleError::NotPositiveDefinite { pivot: it });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        rel = r.iter().map(|v| v * v).sum::<f64>().sqrt() / bnorm;
        if rel <= tol {
            return Ok((
                x,
                PcgReport {
                    iterations: it,
                    relative_residual: rel,
                },
            ));
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(OracleError::NoConvergence {
        iterations: max_iter,
        residual: rel,
    })
}
