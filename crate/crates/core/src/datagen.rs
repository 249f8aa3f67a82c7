// SPDX-License-Identifier: Apache-2.0
//! Synthetic floorplan datasets with oracle ground truth.
//!
//! The package is split into a grid of sub-regions and one die is placed
//! uniformly at random inside each. Every sampled geometry is solved for
//! several CTE assignments, which share one factored plate system.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::floorplan::{Die, Floorplan, PackageConfig};
use crate::gnn::GraphInput;
use crate::laminate::{DeformationMap, OracleError, OracleOptions, PlateSystem};
use crate::model::{ModelError, NormStats};
use crate::rtcg::{build_rtcg, RtcgGraph};
use crate::worker_pool;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid generation spec: {0}")]
    InvalidSpec(String),
    #[error("every sample failed; first failure: {0}")]
    NoSamples(String),
    #[error("corrupt dataset: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How sub-regions are laid out on the package.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// `rows × cols` regions, one die each.
    #[default]
    Grid,
    /// Per floorplan, with equal odds: the 4×4 grid with one region left
    /// empty (15 dies) or a 5-row × 4-column grid (20 dies).
    Mixed15Or20,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub seed: u64,
    pub rows: usize,
    pub cols: usize,
    /// Square package side range in mm; regions are `side / cols` wide and
    /// `side / rows` tall.
    pub package_side: [f64; 2],
    /// Die width and height are drawn independently from this range (mm).
    pub die_size: [f64; 2],
    /// µK⁻¹.
    pub cte: [f64; 2],
    pub floorplans: usize,
    pub assignments: usize,
    #[serde(default)]
    pub layout: Layout,
    pub train_fraction: f64,
}

impl GenSpec {
    /// 200 floorplans × 40 CTE assignments on the 4×4 / 200 mm layout.
    pub fn baseline() -> Self {
        Self {
            seed: 0,
            rows: 4,
            cols: 4,
            package_side: [200.0, 200.0],
            die_size: [25.0, 25.0],
            cte: [3.0, 11.0],
            floorplans: 200,
            assignments: 40,
            layout: Layout::Grid,
            train_fraction: 0.85,
        }
    }

    /// Baseline geometry with 10 assignments per floorplan.
    pub fn desk() -> Self {
        Self {
            assignments: 10,
            ..Self::baseline()
        }
    }

    pub fn sample_count(&self) -> usize {
        self.floorplans * self.assignments
    }

    fn grids(&self) -> Vec<(usize, usize)> {
        match self.layout {
            Layout::Grid => vec![(self.rows, self.cols)],
            Layout::Mixed15Or20 => vec![(4, 4), (5, 4)],
        }
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |m: String| Err(DatagenError::InvalidSpec(m));
        if self.rows == 0 || self.cols == 0 || self.floorplans == 0 || self.assignments == 0 {
            return bad("region grid and counts must be positive".into());
        }
        for (name, [lo, hi]) in [
            ("package_side", self.package_side),
            ("die_size", self.die_size),
            ("cte", self.cte),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return bad(format!("{name} range [{lo}, {hi}] is not ordered"));
            }
        }
        if !(self.package_side[0] > 0.0 && self.die_size[0] > 0.0) {
            return bad("sizes must be positive".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad(format!("train_fraction {} outside (0, 1]", self.train_fraction));
        }
        for (rows, cols) in self.grids() {
            let region = (self.package_side[0] / cols as f64).min(self.package_side[0] / rows as f64);
            if self.die_size[1] > region {
                return bad(format!(
                    "die size up to {} mm exceeds the {region} mm region of a {rows}x{cols} grid",
                    self.die_size[1]
                ));
            }
        }
        Ok(())
    }
}

/// Shifted training distributions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtendedCase {
    /// CTE range widened to [2, 13].
    Cte,
    /// Die sides drawn from [20, 45] mm.
    DieSize,
    /// Package side drawn from [160, 240] mm.
    PackageSize,
    /// 15 or 20 dies.
    DieCount,
}

impl ExtendedCase {
    pub const ALL: [ExtendedCase; 4] = [Self::Cte, Self::DieSize, Self::PackageSize, Self::DieCount];

    /// 1-based case number.
    pub fn from_number(n: u8) -> Option<Self> {
        Self::ALL.get(usize::from(n).checked_sub(1)?).copied()
    }

    /// `base` with this case's shift and 120 floorplans × 10 assignments.
    pub fn apply(self, base: &GenSpec) -> Result<GenSpec, DatagenError> {
        let mut s = GenSpec {
            floorplans: 120,
            assignments: 10,
            ..base.clone()
        };
        match self {
            Self::Cte => s.cte = [2.0, 13.0],
            Self::DieSize => s.die_size = [20.0, 45.0],
            Self::PackageSize => s.package_side = [160.0, 240.0],
            Self::DieCount => s.layout = Layout::Mixed15Or20,
        }
        s.validate()?;
        Ok(s)
    }
}

/// `lo + u (hi − lo)`; always consumes exactly one draw.
fn uniform(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

/// `n + 1` region boundaries over `[0, side]` with exact end points.
fn boundaries(side: f64, n: usize) -> Vec<f64> {
    let mut b: Vec<f64> = (0..=n).map(|k| side * k as f64 / n as f64).collect();
    b[n] = side;
    b
}

/// Origin uniform over `[lo, hi − size]`, nudged so `origin + size ≤ hi`
/// holds in floating point.
fn place(rng: &mut impl Rng, lo: f64, hi: f64, size: f64) -> f64 {
    let mut x = lo + (hi - lo - size).max(0.0) * rng.gen::<f64>();
    while x + size > hi && x > lo {
        x = x.next_down();
    }
    x.max(lo)
}

/// One floorplan geometry; all die CTEs are set to the range midpoint.
pub fn sample_geometry(spec: &GenSpec, rng: &mut impl Rng) -> Result<Floorplan, DatagenError> {
    spec.validate()?;
    let (rows, cols, skip) = match spec.layout {
        Layout::Grid => (spec.rows, spec.cols, None),
        Layout::Mixed15Or20 => {
            if rng.gen::<bool>() {
                (4, 4, Some(rng.gen_range(0..16)))
            } else {
                (5, 4, None)
            }
        }
    };
    let side = uniform(rng, spec.package_side);
    let (xb, yb) = (boundaries(side, cols), boundaries(side, rows));
    let mid = 0.5 * (spec.cte[0] + spec.cte[1]);
    let mut dies = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            if skip == Some(r * cols + c) {
                continue;
            }
            let w = uniform(rng, spec.die_size);
            let h = uniform(rng, spec.die_size);
            let (x0, x1, y0, y1) = (xb[c], xb[c + 1], yb[r], yb[r + 1]);
            if w > x1 - x0 || h > y1 - y0 {
                return Err(DatagenError::InvalidSpec(format!(
                    "{w}x{h} mm die does not fit a {}x{} mm region",
                    x1 - x0,
                    y1 - y0
                )));
            }
            dies.push(Die {
                id: dies.len() as u32,
                x_origin: place(rng, x0, x1, w),
                y_origin: place(rng, y0, y1, h),
                width: w,
                height: h,
                cte: mid,
            });
        }
    }
    let config = PackageConfig {
        pkg_width: side,
        pkg_height: side,
        ..PackageConfig::reference()
    };
    Ok(Floorplan::new(config, dies))
}

/// Redraws every die CTE uniformly over the spec range.
pub fn assign_ctes(geometry: &Floorplan, spec: &GenSpec, rng: &mut impl Rng) -> Floorplan {
    let mut fp = geometry.clone();
    for d in &mut fp.dies {
        d.cte = uniform(rng, spec.cte);
    }
    fp
}

/// One geometry with one CTE assignment.
pub fn sample_floorplan(spec: &GenSpec, rng: &mut impl Rng) -> Result<Floorplan, DatagenError> {
    let g = sample_geometry(spec, rng)?;
    Ok(assign_ctes(&g, spec, rng))
}

/// All floorplans of `spec`, grouped by geometry, in generation order.
/// Geometry and CTE draws come from separate streams, so geometry `k`
/// does not depend on the assignment count or CTE range.
pub fn sample_designs(spec: &GenSpec) -> Result<Vec<Vec<Floorplan>>, DatagenError> {
    spec.validate()?;
    let mut geo = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut cte = geo.clone();
    cte.set_stream(1);
    (0..spec.floorplans)
        .map(|_| {
            let g = sample_geometry(spec, &mut geo)?;
            Ok((0..spec.assignments).map(|_| assign_ctes(&g, spec, &mut cte)).collect())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    /// Geometry index; all CTE assignments of one geometry share it.
    pub floorplan_index: usize,
    pub floorplan: Floorplan,
    pub graph: RtcgGraph,
    pub map: DeformationMap,
}

impl Sample {
    /// Raw model input built from the stored graph.
    pub fn graph_input(&self) -> GraphInput {
        GraphInput::new(&self.graph, &self.floorplan.config)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub id: usize,
    pub floorplan: usize,
    /// µm.
    pub warpage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub id: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub seed: u64,
    pub spec: GenSpec,
    pub oracle: OracleOptions,
    pub entries: Vec<Entry>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub skipped: Vec<Skipped>,
    /// Fitted on the training split.
    pub norm: NormStats,
}

const MANIFEST_KIND: &str = "warpforge-dataset";

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    /// Sorted by id.
    pub samples: Vec<Sample>,
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    floorplan: Floorplan,
    graph: RtcgGraph,
}

/// Splits geometry indices with a seeded shuffle; the first
/// `round(fraction · n)` shuffled geometries (at least one) are returned.
pub fn split_floorplans(indices: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order = indices.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = ((fraction * order.len() as f64).round() as usize).clamp(1.min(order.len()), order.len());
    let mut first = order[..k].to_vec();
    let mut rest = order[k..].to_vec();
    first.sort_unstable();
    rest.sort_unstable();
    (first, rest)
}

/// Decorrelates the split shuffle from the sampling stream.
fn split_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

impl Dataset {
    pub fn get(&self, id: usize) -> Option<&Sample> {
        self.samples
            .binary_search_by_key(&id, |s| s.id)
            .ok()
            .map(|k| &self.samples[k])
    }

    fn pick(&self, ids: &[usize]) -> Vec<&Sample> {
        ids.iter().filter_map(|&i| self.get(i)).collect()
    }

    pub fn train(&self) -> Vec<&Sample> {
        self.pick(&self.manifest.train)
    }

    pub fn test(&self) -> Vec<&Sample> {
        self.pick(&self.manifest.test)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), DatagenError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("graphs"))?;
        fs::create_dir_all(dir.join("maps"))?;
        for s in &self.samples {
            let gf = GraphFile {
                floorplan: s.floorplan.clone(),
                graph: s.graph.clone(),
            };
            let mut w = BufWriter::new(File::create(dir.join("graphs").join(format!("{}.json", s.id)))?);
            serde_json::to_writer(&mut w, &gf)?;
            w.flush()?;
            let mut w = BufWriter::new(File::create(dir.join("maps").join(format!("{}.bin", s.id)))?);
            s.map.write_to(&mut w)?;
            w.flush()?;
        }
        let mut w = BufWriter::new(File::create(dir.join("manifest.json"))?);
        serde_json::to_writer_pretty(&mut w, &self.manifest)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, DatagenError> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_reader(BufReader::new(File::open(dir.join("manifest.json"))?))?;
        if manifest.kind != MANIFEST_KIND {
            return Err(DatagenError::Corrupt(format!("manifest kind {:?}", manifest.kind)));
        }
        let samples = manifest
            .entries
            .iter()
            .map(|e| {
                let gf: GraphFile = serde_json::from_reader(BufReader::new(File::open(
                    dir.join("graphs").join(format!("{}.json", e.id)),
                )?))?;
                let map = DeformationMap::load(dir.join("maps").join(format!("{}.bin", e.id)))?;
                if gf.graph.node_count() != gf.floorplan.dies.len() {
                    return Err(DatagenError::Corrupt(format!("sample {}: graph and floorplan disagree", e.id)));
                }
                Ok(Sample {
                    id: e.id,
                    floorplan_index: e.floorplan,
                    floorplan: gf.floorplan,
                    graph: gf.graph,
                    map,
                })
            })
            .collect::<Result<Vec<_>, DatagenError>>()?;
        let known: std::collections::BTreeSet<usize> = manifest.entries.iter().map(|e| e.id).collect();
        if manifest.train.iter().chain(&manifest.test).any(|i| !known.contains(i)) {
            return Err(DatagenError::Corrupt("split references an unknown sample".into()));
        }
        Ok(Self { manifest, samples })
    }
}

type Solved = Result<(RtcgGraph, DeformationMap), String>;

fn solve_geometry(fps: &[Floorplan], oracle: &OracleOptions) -> Vec<Solved> {
    let system = match PlateSystem::new(&fps[0], oracle) {
        Ok(s) => s,
        Err(e) => return fps.iter().map(|_| Err(e.to_string())).collect(),
    };
    fps.iter()
        .map(|fp| {
            let graph = build_rtcg(fp).map_err(|e| e.to_string())?;
            let map = system.solve(fp).map_err(|e| e.to_string())?.map;
            Ok((graph, map))
        })
        .collect()
}

/// Samples, solves and splits a dataset. Sample `id` is
/// `geometry · assignments + assignment`. Oracle failures are skipped and
/// listed in the manifest.
pub fn gen_dataset(spec: &GenSpec, oracle: &OracleOptions) -> Result<Dataset, DatagenError> {
    let designs = sample_designs(spec)?;
    let pool = worker_pool();
    let solved: Vec<Vec<Solved>> = pool.install(|| {
        designs
            .par_iter()
            .enumerate()
            .map(|(k, fps)| {
                let out = solve_geometry(fps, oracle);
                log::debug!("geometry {k} solved");
                out
            })
            .collect()
    });

    let mut samples = Vec::with_capacity(spec.sample_count());
    let mut skipped = Vec::new();
    for (f, (fps, results)) in designs.into_iter().zip(solved).enumerate() {
        for (a, (fp, r)) in fps.into_iter().zip(results).enumerate() {
            let id = f * spec.assignments + a;
            match r {
                Ok((graph, map)) => samples.push(Sample {
                    id,
                    floorplan_index: f,
                    floorplan: fp,
                    graph,
                    map,
                }),
                Err(reason) => {
                    log::warn!("sample {id} skipped: {reason}");
                    skipped.push(Skipped { id, reason });
                }
            }
        }
    }
    if samples.is_empty() {
        let first = skipped.first().map_or_else(String::new, |s| s.reason.clone());
        return Err(DatagenError::NoSamples(first));
    }
    if !skipped.is_empty() {
        log::warn!("{} of {} samples skipped", skipped.len(), spec.sample_count());
    }

    let mut geometries: Vec<usize> = samples.iter().map(|s| s.floorplan_index).collect();
    geometries.dedup();
    let (train_fp, _) = split_floorplans(&geometries, spec.train_fraction, split_seed(spec.seed));
    let (train, test): (Vec<&Sample>, Vec<&Sample>) =
        samples.iter().partition(|s| train_fp.binary_search(&s.floorplan_index).is_ok());
    if test.is_empty() {
        log::warn!("test split is empty ({} training samples)", train.len());
    }
    let inputs: Vec<GraphInput> = train.iter().map(|s| s.graph_input()).collect();
    let norm = NormStats::fit(&inputs, train.iter().map(|s| s.map.values.as_slice()))?;

    let manifest = Manifest {
        kind: MANIFEST_KIND.into(),
        seed: spec.seed,
        spec: spec.clone(),
        oracle: *oracle,
        entries: samples
            .iter()
            .map(|s| Entry {
                id: s.id,
                floorplan: s.floorplan_index,
                warpage: s.map.warpage().warpage,
            })
            .collect(),
        train: train.iter().map(|s| s.id).collect(),
        test: test.iter().map(|s| s.id).collect(),
        skipped,
        norm,
    };
    Ok(Dataset { manifest, samples })
}

/// Dataset of `case` applied to `base`.
pub fn gen_extended(case: ExtendedCase, base: &GenSpec, oracle: &OracleOptions) -> Result<Dataset, DatagenError> {
    gen_dataset(&case.apply(base)?, oracle)
}
