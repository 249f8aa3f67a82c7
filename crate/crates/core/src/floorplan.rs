// SPDX-License-Identifier: Apache-2.0
//! Multi-die flip-chip floorplans and the package layer stack.
//!
//! All lengths are millimetres, moduli GPa, CTEs µK⁻¹ and temperatures K.
//! The package origin is the bottom-left corner with y pointing up.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FloorplanError {
    #[error("unknown die id {0}")]
    UnknownDie(u32),
    #[error("floorplan i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("floorplan json: {0}")]
    Json(#[from] serde_json::Error),
}

/// One homogeneous isotropic layer of the laminate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialLayer {
    /// Young's modulus, GPa.
    #[serde(rename = "E")]
    pub youngs_modulus: f64,
    #[serde(rename = "nu")]
    pub poisson_ratio: f64,
    /// µK⁻¹. For the die layer this is a default; each [`Die`] carries its own.
    pub cte: f64,
    /// mm.
    #[serde(rename = "t")]
    pub thickness: f64,
}

impl MaterialLayer {
    pub fn is_valid(&self) -> bool {
        self.youngs_modulus > 0.0
            && (0.0..0.5).contains(&self.poisson_ratio)
            && self.thickness > 0.0
            && self.cte.is_finite()
    }

    pub fn with_cte(mut self, cte: f64) -> Self {
        self.cte = cte;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStack {
    pub die: MaterialLayer,
    pub underfill: MaterialLayer,
    pub substrate: MaterialLayer,
}

impl LayerStack {
    /// Die / underfill / substrate properties of the reference assembly.
    pub fn reference() -> Self {
        Self {
            die: MaterialLayer {
                youngs_modulus: 169.0,
                poisson_ratio: 0.28,
                cte: 7.0,
                thickness: 0.875,
            },
            underfill: MaterialLayer {
                youngs_modulus: 7.6,
                poisson_ratio: 0.32,
                cte: 29.0,
                thickness: 0.06,
            },
            substrate: MaterialLayer {
                youngs_modulus: 20.0,
                poisson_ratio: 0.42,
                cte: 13.2,
                thickness: 1.81,
            },
        }
    }
}

/// Temperature drop from 200 °C fabrication to 85 °C peak operation.
pub const REFERENCE_DELTA_T: f64 = -115.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PackageConfig {
    #[serde(rename = "w")]
    pub pkg_width: f64,
    #[serde(rename = "h")]
    pub pkg_height: f64,
    pub delta_t: f64,
    pub layers: LayerStack,
}

impl PackageConfig {
    /// 200 × 200 mm package with the reference stack at ΔT = −115 K.
    pub fn reference() -> Self {
        Self {
            pkg_width: 200.0,
            pkg_height: 200.0,
            delta_t: REFERENCE_DELTA_T,
            layers: LayerStack::reference(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Die {
    pub id: u32,
    #[serde(rename = "x")]
    pub x_origin: f64,
    #[serde(rename = "y")]
    pub y_origin: f64,
    #[serde(rename = "w")]
    pub width: f64,
    #[serde(rename = "h")]
    pub height: f64,
    pub cte: f64,
}

impl Die {
    pub fn left(&self) -> f64 {
        self.x_origin
    }
    pub fn right(&self) -> f64 {
        self.x_origin + self.width
    }
    pub fn bottom(&self) -> f64 {
        self.y_origin
    }
    pub fn top(&self) -> f64 {
        self.y_origin + self.height
    }

    /// Half-open footprint test `[x0, x1) × [y0, y1)`.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.left() && x < self.right() && y >= self.bottom() && y < self.top()
    }

    /// Area of the intersection of the two footprints.
    pub fn overlap_area(&self, other: &Die) -> f64 {
        let dx = self.right().min(other.right()) - self.left().max(other.left());
        let dy = self.top().min(other.top()) - self.bottom().max(other.bottom());
        if dx > 0.0 && dy > 0.0 {
            dx * dy
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Floorplan {
    #[serde(rename = "package")]
    pub config: PackageConfig,
    pub dies: Vec<Die>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Violation {
    InvalidPackage,
    InvalidLayer { layer: &'static str },
    NonPositiveSize { die: u32 },
    NonFinite { die: u32 },
    OutOfBounds { die: u32 },
    DuplicateId { die: u32 },
    Overlap { a: u32, b: u32 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::InvalidPackage => write!(f, "invalid_package"),
            Violation::InvalidLayer { layer } => write!(f, "invalid_layer({layer})"),
            Violation::NonPositiveSize { die } => write!(f, "non_positive_size({die})"),
            Violation::NonFinite { die } => write!(f, "non_finite({die})"),
            Violation::OutOfBounds { die } => write!(f, "out_of_bounds({die})"),
            Violation::DuplicateId { die } => write!(f, "duplicate_id({die})"),
            Violation::Overlap { a, b } => write!(f, "overlap({a},{b})"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn messages(&self) -> Vec<String> {
        self.violations.iter().map(|v| v.to_string()).collect()
    }
}

impl Floorplan {
    pub fn new(config: PackageConfig, dies: Vec<Die>) -> Self {
        Self { config, dies }
    }

    pub fn die(&self, id: u32) -> Result<&Die, FloorplanError> {
        self.dies
            .iter()
            .find(|d| d.id == id)
            .ok_or(FloorplanError::UnknownDie(id))
    }

    /// Checks every floorplan invariant and reports all violations found.
    /// Abutting dies are legal; overlap only counts with positive area.
    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        let cfg = &self.config;
        if !(cfg.pkg_width > 0.0 && cfg.pkg_height > 0.0) || !cfg.delta_t.is_finite() {
            violations.push(Violation::InvalidPackage);
        }
        let layers = [
            ("die", &cfg.layers.die),
            ("underfill", &cfg.layers.underfill),
            ("substrate", &cfg.layers.substrate),
        ];
        for (name, layer) in layers {
            if !layer.is_valid() {
                violations.push(Violation::InvalidLayer { layer: name });
            }
        }

        let mut seen = BTreeSet::new();
        for d in &self.dies {
            if !seen.insert(d.id) {
                violations.push(Violation::DuplicateId { die: d.id });
            }
            let fields = [d.x_origin, d.y_origin, d.width, d.height, d.cte];
            if fields.iter().any(|v| !v.is_finite()) {
                violations.push(Violation::NonFinite { die: d.id });
                continue;
            }
            if d.width <= 0.0 || d.height <= 0.0 {
                violations.push(Violation::NonPositiveSize { die: d.id });
                continue;
            }
            if d.left() < 0.0
                || d.bottom() < 0.0
                || d.right() > cfg.pkg_width
                || d.top() > cfg.pkg_height
            {
                violations.push(Violation::OutOfBounds { die: d.id });
            }
        }

        for (i, a) in self.dies.iter().enumerate() {
            for b in &self.dies[i + 1..] {
                if a.overlap_area(b) > 0.0 {
                    violations.push(Violation::Overlap { a: a.id, b: b.id });
                }
            }
        }
        ValidationReport { violations }
    }

    /// `(w/W, h/H, (x_o + w/2)/W, (y_o + h/2)/H)` for the given die.
    pub fn normalized_geometry(&self, die_id: u32) -> Result<[f64; 4], FloorplanError> {
        let d = self.die(die_id)?;
        Ok(normalized_geometry(d, &self.config))
    }

    pub fn from_json(s: &str) -> Result<Self, FloorplanError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("floorplan serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FloorplanError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FloorplanError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

pub(crate) fn normalized_geometry(d: &Die, cfg: &PackageConfig) -> [f64; 4] {
    [
        d.width / cfg.pkg_width,
        d.height / cfg.pkg_height,
        (d.x_origin + 0.5 * d.width) / cfg.pkg_width,
        (d.y_origin + 0.5 * d.height) / cfg.pkg_height,
    ]
}
