// SPDX-License-Identifier: Apache-2.0
//! Deformation maps and their file formats.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::OracleError;

pub const MAP_MAGIC: &[u8; 8] = b"WFDMAP01";

/// Out-of-plane displacement in µm sampled at cell centres
/// `((j + ½)·dx, (i + ½)·dy)`; row 0 is the `y = 0` edge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeformationMap {
    pub height: usize,
    pub width: usize,
    /// Cell size in mm.
    pub dx: f64,
    pub dy: f64,
    pub values: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarpageResult {
    pub warpage: f64,
    /// `(row, col)` of the largest and smallest value.
    pub argmax: (usize, usize),
    pub argmin: (usize, usize),
}

/// JSON shape served to the UI: nested rows.
#[derive(Serialize, Deserialize)]
struct MapJson {
    height: usize,
    width: usize,
    dx: f64,
    dy: f64,
    values: Vec<Vec<f64>>,
}

impl DeformationMap {
    pub fn new(height: usize, width: usize, dx: f64, dy: f64, values: Vec<f64>) -> Result<Self, OracleError> {
        let m = Self {
            height,
            width,
            dx,
            dy,
            values,
        };
        m.check()?;
        Ok(m)
    }

    fn check(&self) -> Result<(), OracleError> {
        if self.height < 2 || self.width < 2 {
            return Err(OracleError::BadMap(format!("grid {}x{} below 2x2", self.height, self.width)));
        }
        if self.values.len() != self.height * self.width {
            return Err(OracleError::BadMap(format!(
                "{} values for a {}x{} grid",
                self.values.len(),
                self.height,
                self.width
            )));
        }
        if !(self.dx > 0.0 && self.dy > 0.0) || self.values.iter().any(|v| !v.is_finite()) {
            return Err(OracleError::BadMap("non-finite values or spacing".into()));
        }
        Ok(())
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn package_width(&self) -> f64 {
        self.dx * self.width as f64
    }

    pub fn package_height(&self) -> f64 {
        self.dy * self.height as f64
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.width).map(<[f64]>::to_vec).collect()
    }

    pub fn warpage(&self) -> WarpageResult {
        warpage(self)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), OracleError> {
        let mut buf = Vec::with_capacity(40 + 8 * self.values.len());
        buf.extend_from_slice(MAP_MAGIC);
        buf.extend_from_slice(&(self.height as u64).to_le_bytes());
        buf.extend_from_slice(&(self.width as u64).to_le_bytes());
        buf.extend_from_slice(&self.dx.to_le_bytes());
        buf.extend_from_slice(&self.dy.to_le_bytes());
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, OracleError> {
        let mut head = [0u8; 40];
        r.read_exact(&mut head)
            .map_err(|_| OracleError::BadMap("truncated header".into()))?;
        if &head[..8] != MAP_MAGIC {
            return Err(OracleError::BadMap("bad magic".into()));
        }
        let u = |k: usize| u64::from_le_bytes(head[k..k + 8].try_into().expect("8 bytes"));
        let f = |k: usize| f64::from_le_bytes(head[k..k + 8].try_into().expect("8 bytes"));
        let (height, width) = (u(8) as usize, u(16) as usize);
        let cells = height
            .checked_mul(width)
            .filter(|&c| c <= 1 << 28)
            .ok_or_else(|| OracleError::BadMap("grid too large".into()))?;
        let mut body = vec![0u8; 8 * cells];
        r.read_exact(&mut body)
            .map_err(|_| OracleError::BadMap("truncated values".into()))?;
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Self::new(height, width, f(24), f(32), values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), OracleError> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, OracleError> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&MapJson {
            height: self.height,
            width: self.width,
            dx: self.dx,
            dy: self.dy,
            values: self.rows(),
        })
        .expect("map serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, OracleError> {
        let m: MapJson = serde_json::from_str(s).map_err(|e| OracleError::BadMap(e.to_string()))?;
        Self::new(m.height, m.width, m.dx, m.dy, m.values.concat())
    }
}

/// Exact max − min with the positions of both extremes.
pub fn warpage(map: &DeformationMap) -> WarpageResult {
    let (mut imax, mut imin) = (0, 0);
    for (k, &v) in map.values.iter().enumerate() {
        if v > map.values[imax] {
            imax = k;
        }
        if v < map.values[imin] {
            imin = k;
        }
    }
    let pos = |k: usize| (k / map.width, k % map.width);
    WarpageResult {
        warpage: map.values[imax] - map.values[imin],
        argmax: pos(imax),
        argmin: pos(imin),
    }
}
