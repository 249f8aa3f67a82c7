// SPDX-License-Identifier: Apache-2.0
//! The end-to-end surrogate: floorplan → rTCG → encoder → grid decoder →
//! deformation map in µm.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::{Decoder, DecoderConfig, GridPlan};
use crate::floorplan::Floorplan;
use crate::gnn::{Encoder, EncoderConfig, GraphInput};
use crate::laminate::{DeformationMap, OracleError};
use crate::rtcg::{build_rtcg, RtcgError, EDGE_FEATURES, NODE_FEATURES};
use crate::tensor::{read_checkpoint, write_checkpoint, Bound, Graph, ParamStore, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid floorplan: {}", .0.join("; "))]
    InvalidFloorplan(Vec<String>),
    #[error(transparent)]
    Rtcg(#[from] RtcgError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("checkpoint manifest mismatch: {0}")]
    Checkpoint(String),
    #[error("bad normalization statistics: {0}")]
    Norm(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-feature min-max range. Features with `max == min` pass through.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRange {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl FeatureRange {
    fn fit<'a>(dim: usize, rows: impl Iterator<Item = &'a [f64]>) -> Self {
        let mut min = vec![f64::INFINITY; dim];
        let mut max = vec![f64::NEG_INFINITY; dim];
        for r in rows {
            for k in 0..dim {
                min[k] = min[k].min(r[k]);
                max[k] = max[k].max(r[k]);
            }
        }
        for k in 0..dim {
            if !min[k].is_finite() {
                min[k] = 0.0;
                max[k] = 0.0;
            }
        }
        Self { min, max }
    }

    pub fn is_constant(&self, k: usize) -> bool {
        self.max[k] <= self.min[k]
    }

    fn apply(&self, data: &mut [f64]) {
        let dim = self.min.len();
        for row in data.chunks_mut(dim) {
            for (k, v) in row.iter_mut().enumerate() {
                if !self.is_constant(k) {
                    *v = (*v - self.min[k]) / (self.max[k] - self.min[k]);
                }
            }
        }
    }

    fn invert(&self, data: &mut [f64]) {
        let dim = self.min.len();
        for row in data.chunks_mut(dim) {
            for (k, v) in row.iter_mut().enumerate() {
                if !self.is_constant(k) {
                    *v = *v * (self.max[k] - self.min[k]) + self.min[k];
                }
            }
        }
    }
}

/// Input min-max ranges and the dataset-level target z-score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub node: FeatureRange,
    pub edge: FeatureRange,
    /// µm.
    pub target_mean: f64,
    /// µm.
    pub target_std: f64,
}

impl NormStats {
    /// No-op input scaling and a unit target transform.
    pub fn identity() -> Self {
        Self {
            node: FeatureRange {
                min: vec![0.0; NODE_FEATURES],
                max: vec![0.0; NODE_FEATURES],
            },
            edge: FeatureRange {
                min: vec![0.0; EDGE_FEATURES],
                max: vec![0.0; EDGE_FEATURES],
            },
            target_mean: 0.0,
            target_std: 1.0,
        }
    }

    /// Fits on raw (unnormalized) inputs and µm target maps.
    pub fn fit<'a>(
        inputs: impl IntoIterator<Item = &'a GraphInput> + Clone,
        targets: impl IntoIterator<Item = &'a [f64]> + Clone,
    ) -> Result<Self, ModelError> {
        let node = FeatureRange::fit(
            NODE_FEATURES,
            inputs.clone().into_iter().flat_map(|i| i.nodes.data.chunks(NODE_FEATURES)),
        );
        let edge = FeatureRange::fit(
            EDGE_FEATURES,
            inputs.into_iter().flat_map(|i| i.edges.data.chunks(EDGE_FEATURES)),
        );
        for (what, r) in [("node", &node), ("edge", &edge)] {
            for k in 0..r.min.len() {
                if r.is_constant(k) {
                    log::warn!("{what} feature {k} is constant ({}); passed through unscaled", r.min[k]);
                }
            }
        }
        let (mut n, mut sum) = (0usize, 0.0);
        for t in targets.clone() {
            n += t.len();
            sum += t.iter().sum::<f64>();
        }
        if n == 0 {
            return Err(ModelError::Norm("no target values".into()));
        }
        let mean = sum / n as f64;
        let var = targets
            .into_iter()
            .flat_map(|t| t.iter())
            .map(|v| (v - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        let std = var.sqrt();
        if !(std > 0.0) || !mean.is_finite() {
            return Err(ModelError::Norm(format!("target std {std} must be positive")));
        }
        Ok(Self {
            node,
            edge,
            target_mean: mean,
            target_std: std,
        })
    }

    pub fn apply(&self, input: &mut GraphInput) {
        self.node.apply(&mut input.nodes.data);
        self.edge.apply(&mut input.edges.data);
    }

    pub fn invert(&self, input: &mut GraphInput) {
        self.node.invert(&mut input.nodes.data);
        self.edge.invert(&mut input.edges.data);
    }

    pub fn normalize_target(&self, w: &[f64]) -> Vec<f64> {
        w.iter().map(|v| (v - self.target_mean) / self.target_std).collect()
    }

    pub fn denormalize_target(&self, z: &[f64]) -> Vec<f64> {
        z.iter().map(|v| v * self.target_std + self.target_mean).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Parameter initialization seed.
    pub seed: u64,
}

impl ModelConfig {
    pub fn gin() -> Self {
        Self {
            encoder: EncoderConfig::gin(),
            decoder: DecoderConfig::compact(),
            grid_h: 64,
            grid_w: 64,
            seed: 0,
        }
    }

    pub fn gcn() -> Self {
        Self {
            encoder: EncoderConfig::gcn(),
            ..Self::gin()
        }
    }
}

/// Model-ready form of one floorplan.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub input: GraphInput,
    pub plan: GridPlan,
    pub pkg_width: f64,
    pub pkg_height: f64,
}

/// Validates `fp` and builds its raw (unnormalized) model inputs.
pub fn prepare_raw(fp: &Floorplan, grid_h: usize, grid_w: usize) -> Result<Prepared, ModelError> {
    let report = fp.validate();
    if !report.is_ok() {
        return Err(ModelError::InvalidFloorplan(report.messages()));
    }
    let graph = build_rtcg(fp)?;
    Ok(Prepared {
        input: GraphInput::new(&graph, &fp.config),
        plan: GridPlan::new(fp, grid_h, grid_w)?,
        pkg_width: fp.config.pkg_width,
        pkg_height: fp.config.pkg_height,
    })
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub norm: NormStats,
    encoder: Encoder,
    decoder: Decoder,
}

const CHECKPOINT_KIND: &str = "warpforge-model";

#[derive(Serialize, Deserialize)]
struct Meta {
    kind: String,
    config: ModelConfig,
    norm: NormStats,
    #[serde(default)]
    extra: serde_json::Value,
}

impl Model {
    pub fn new(config: ModelConfig, norm: NormStats) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(config.encoder, &mut params, &mut rng);
        let decoder = Decoder::new(config.decoder, config.encoder.hidden, &mut params, &mut rng);
        Self {
            config,
            params,
            norm,
            encoder,
            decoder,
        }
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn prepare(&self, fp: &Floorplan) -> Result<Prepared, ModelError> {
        let mut p = prepare_raw(fp, self.config.grid_h, self.config.grid_w)?;
        self.norm.apply(&mut p.input);
        Ok(p)
    }

    /// Normalized `[1, H, W]` prediction on the tape.
    pub fn forward(&self, g: &mut Graph, p: &Bound, prep: &Prepared) -> Result<Var, TensorError> {
        let h = self.encoder.forward(g, p, &prep.input)?;
        self.decoder.forward(g, p, h, &prep.plan)
    }

    /// Normalized prediction without backward state.
    pub fn predict_normalized(&self, prep: &Prepared) -> Result<Vec<f64>, TensorError> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let out = self.forward(&mut g, &p, prep)?;
        Ok(g.value(out).data.clone())
    }

    pub fn predict_prepared(&self, prep: &Prepared) -> Result<DeformationMap, ModelError> {
        let z = self.predict_normalized(prep)?;
        let (h, w) = (self.config.grid_h, self.config.grid_w);
        Ok(DeformationMap::new(
            h,
            w,
            prep.pkg_width / w as f64,
            prep.pkg_height / h as f64,
            self.norm.denormalize_target(&z),
        )?)
    }

    /// Predicted map in µm.
    pub fn predict(&self, fp: &Floorplan) -> Result<DeformationMap, ModelError> {
        let prep = self.prepare(fp)?;
        self.predict_prepared(&prep)
    }

    pub fn write(&self, w: impl Write, extra: serde_json::Value) -> Result<(), ModelError> {
        let meta = Meta {
            kind: CHECKPOINT_KIND.into(),
            config: self.config,
            norm: self.norm.clone(),
            extra,
        };
        let meta = serde_json::to_value(meta).expect("meta serializes");
        write_checkpoint(w, self.params.names(), self.params.tensors(), meta)?;
        Ok(())
    }

    /// Returns the model and the free-form metadata stored with it.
    pub fn read(r: impl Read) -> Result<(Self, serde_json::Value), ModelError> {
        let ck = read_checkpoint(r).map_err(|e| match e {
            TensorError::Corrupt(s) | TensorError::Manifest(s) => ModelError::Checkpoint(s),
            TensorError::Io(e) => ModelError::Checkpoint(e.to_string()),
            other => ModelError::Checkpoint(other.to_string()),
        })?;
        let meta: Meta = serde_json::from_value(ck.meta.clone()).map_err(|e| ModelError::Checkpoint(format!("metadata: {e}")))?;
        if meta.kind != CHECKPOINT_KIND {
            return Err(ModelError::Checkpoint(format!("unexpected kind {:?}", meta.kind)));
        }
        let mut model = Self::new(meta.config, meta.norm);
        ck.verify_layout(model.params.names(), &model.params.shapes())
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        for (dst, src) in model.params.tensors_mut().iter_mut().zip(ck.params) {
            if src.data.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::Checkpoint("non-finite parameter".into()));
            }
            *dst = src;
        }
        Ok((model, meta.extra))
    }

    pub fn save(&self, path: impl AsRef<Path>, extra: serde_json::Value) -> Result<(), ModelError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w, extra)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, serde_json::Value), ModelError> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::floorplan::{Die, PackageConfig};
    use std::time::Instant;

    fn fp() -> Floorplan {
        let dies = (0..16)
            .map(|k| Die {
                id: k,
                x_origin: (k % 4) as f64 * 50.0 + 10.0 + (k as f64 * 1.7) % 12.0,
                y_origin: (k / 4) as f64 * 50.0 + 5.0 + (k as f64 * 3.1) % 15.0,
                width: 25.0,
                height: 25.0,
                cte: 3.0 + (k as f64 * 0.55) % 8.0,
            })
            .collect();
        Floorplan::new(PackageConfig::reference(), dies)
    }

    #[test]
    fn two_point_target_zscore() {
        let a = [0.0];
        let b = [10.0];
        let input = GraphInput::new(&build_rtcg(&fp()).unwrap(), &fp().config);
        let s = NormStats::fit([&input], [&a[..], &b[..]]).unwrap();
        assert_eq!((s.target_mean, s.target_std), (5.0, 5.0));
        assert_eq!(s.normalize_target(&[0.0, 10.0]), vec![-1.0, 1.0]);
        assert!(NormStats::fit([&input], [&[3.0, 3.0][..]]).is_err());
    }

    #[test]
    fn input_scaling_round_trips_and_keeps_constants() {
        let raw = GraphInput::new(&build_rtcg(&fp()).unwrap(), &fp().config);
        let t = [1.0, 2.0];
        let s = NormStats::fit([&raw], [&t[..]]).unwrap();
        // Every die is 25 mm square, so the size features are constant.
        assert!(s.node.is_constant(0) && s.node.is_constant(1));
        let mut x = raw.clone();
        s.apply(&mut x);
        assert!(x.nodes.data.iter().all(|v| (-1e-12..=1.0 + 1e-12).contains(v) || *v == 0.125));
        s.invert(&mut x);
        for (a, b) in x.nodes.data.iter().chain(&x.edges.data).zip(raw.nodes.data.iter().chain(&raw.edges.data)) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        let w = vec![-40.0, 3.5, 812.25];
        let back = s.denormalize_target(&s.normalize_target(&w));
        for (a, b) in back.iter().zip(&w) {
            assert!((a - b).abs() <= 1e-12 * b.abs());
        }
    }

    #[test]
    fn checkpoint_round_trip_reproduces_predictions() {
        let model = Model::new(ModelConfig::gin(), NormStats::identity());
        let mut buf = Vec::new();
        model.write(&mut buf, serde_json::json!({"epoch": 3})).unwrap();
        let (back, extra) = Model::read(&buf[..]).unwrap();
        assert_eq!(extra["epoch"], 3);
        assert_eq!(back.params, model.params);
        assert_eq!(back.predict(&fp()).unwrap(), model.predict(&fp()).unwrap());
    }

    #[test]
    fn mismatched_or_corrupt_checkpoints_are_rejected() {
        let gin = Model::new(ModelConfig::gin(), NormStats::identity());
        let mut buf = Vec::new();
        gin.write(&mut buf, serde_json::Value::Null).unwrap();
        let msg = Model::read(&buf[..20]).unwrap_err().to_string();
        assert!(msg.starts_with("checkpoint manifest mismatch"), "{msg}");
        let msg = Model::read(&b"not a checkpoint at all"[..]).unwrap_err().to_string();
        assert!(msg.starts_with("checkpoint manifest mismatch"), "{msg}");
        buf[100] ^= 0xff;
        assert!(Model::read(&buf[..]).is_err());
    }

    #[test]
    fn output_shape_is_independent_of_die_count() {
        let model = Model::new(ModelConfig::gcn(), NormStats::identity());
        let mut f = fp();
        for n in [16, 3, 1, 0] {
            f.dies.truncate(n);
            let m = model.predict(&f).unwrap();
            assert_eq!((m.height, m.width, m.values.len()), (64, 64, 4096));
        }
    }

    #[test]
    fn invalid_floorplans_are_reported() {
        let model = Model::new(ModelConfig::gin(), NormStats::identity());
        let mut f = fp();
        f.dies[1].x_origin = f.dies[0].x_origin;
        f.dies[1].y_origin = f.dies[0].y_origin;
        match model.predict(&f) {
            Err(ModelError::InvalidFloorplan(m)) => assert!(m.iter().any(|s| s.contains("overlap(0,1)")), "{m:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    #[ignore = "timing probe"]
    fn inference_timing_probe() {
        for cfg in [ModelConfig::gin(), ModelConfig::gcn()] {
            let model = Model::new(cfg, NormStats::identity());
            let f = fp();
            model.predict(&f).unwrap();
            let best = (0..10)
                .map(|_| {
                    let t = Instant::now();
                    for _ in 0..20 {
                        model.predict(&f).unwrap();
                    }
                    t.elapsed().as_secs_f64() * 50.0
                })
                .fold(f64::INFINITY, f64::min);
            eprintln!("{:?}: best {best:.3} ms", cfg.encoder.kind);
            let t = Instant::now();
            for _ in 0..50 {
                build_rtcg(&f).unwrap();
            }
            eprintln!("  rtcg {:.3} ms", t.elapsed().as_secs_f64() * 20.0);
            let t = Instant::now();
            for _ in 0..50 {
                model.prepare(&f).unwrap();
            }
            eprintln!("  prepare {:.3} ms", t.elapsed().as_secs_f64() * 20.0);
            let prep = model.prepare(&f).unwrap();
            let t = Instant::now();
            for _ in 0..50 {
                let mut g = Graph::new();
                let p = model.params.bind_frozen(&mut g);
                model.encoder.forward(&mut g, &p, &prep.input).unwrap();
            }
            eprintln!("  encode {:.3} ms", t.elapsed().as_secs_f64() * 20.0);
        }
    }
}
