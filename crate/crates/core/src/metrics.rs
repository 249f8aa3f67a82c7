// SPDX-License-Identifier: Apache-2.0
//! Error metrics in µm, evaluation reports and inference timing.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::Sample;
use crate::floorplan::Floorplan;
use crate::laminate::{solve_plate_with, OracleOptions};
use crate::model::{Model, ModelError};
use crate::worker_pool;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty evaluation split")]
    EmptySplit,
    #[error("empty timing run")]
    EmptyTiming,
    #[error("prediction has {pred} values, truth has {truth}")]
    Shape { pred: usize, truth: usize },
    #[error("ground truth has zero deformation range")]
    ZeroRange,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Denominator of NRMSE and NMAE.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeMode {
    /// `max − min` of the ground truth over the whole split.
    #[default]
    Split,
    /// `max − min` of each sample's own ground truth.
    PerSample,
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> f64 {
    let s: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    (s / truth.len() as f64).sqrt()
}

pub fn mae(pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / truth.len() as f64
}

/// `max − min`.
pub fn warpage_of(values: &[f64]) -> f64 {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    hi - lo
}

fn range_over<'a>(maps: impl Iterator<Item = &'a [f64]>) -> f64 {
    let (lo, hi) = maps
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    hi - lo
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: usize,
    /// µm.
    pub rmse: f64,
    /// %.
    pub nrmse: f64,
    /// %.
    pub nmae: f64,
    pub warpage_true: f64,
    pub warpage_pred: f64,
    /// µm.
    pub warpage_abs: f64,
    /// %; absent when the true warpage is zero.
    pub warpage_rel: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub count: usize,
    pub mean_rmse: f64,
    pub max_rmse: f64,
    pub min_rmse: f64,
    pub mean_nrmse: f64,
    pub mean_nmae: f64,
    pub mean_warpage_abs: f64,
    /// Mean of the per-sample relative errors, %.
    pub mean_warpage_rel: f64,
    /// RMSE in µm pooled over pixels whose normalized truth exceeds
    /// `sigma_t` in magnitude; absent when no pixel does.
    pub tail_rmse: Option<f64>,
    pub tail_pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub range_mode: RangeMode,
    /// Split-level ground-truth range, µm.
    pub full_range: f64,
    pub sigma_t: f64,
    pub aggregate: Aggregates,
    pub samples: Vec<SampleMetrics>,
}

/// Target z-score used to select tail pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TailSpec {
    pub mean: f64,
    pub std: f64,
    pub sigma_t: f64,
}

/// Metrics of `preds` against `truths`, both in µm.
pub fn evaluate_maps(
    ids: &[usize],
    preds: &[&[f64]],
    truths: &[&[f64]],
    mode: RangeMode,
    tail: TailSpec,
) -> Result<EvalReport, MetricsError> {
    if truths.is_empty() {
        return Err(MetricsError::EmptySplit);
    }
    for (p, t) in preds.iter().zip(truths) {
        if p.len() != t.len() {
            return Err(MetricsError::Shape {
                pred: p.len(),
                truth: t.len(),
            });
        }
    }
    let full_range = range_over(truths.iter().copied());
    let mut samples = Vec::with_capacity(truths.len());
    let (mut tail_sq, mut tail_n) = (0.0, 0usize);
    for ((&id, &p), &t) in ids.iter().zip(preds).zip(truths) {
        let range = match mode {
            RangeMode::Split => full_range,
            RangeMode::PerSample => warpage_of(t),
        };
        if !(range > 0.0) {
            return Err(MetricsError::ZeroRange);
        }
        let e = rmse(p, t);
        let (wt, wp) = (warpage_of(t), warpage_of(p));
        samples.push(SampleMetrics {
            id,
            rmse: e,
            nrmse: 100.0 * e / range,
            nmae: 100.0 * mae(p, t) / range,
            warpage_true: wt,
            warpage_pred: wp,
            warpage_abs: (wp - wt).abs(),
            warpage_rel: (wt > 0.0).then(|| 100.0 * (wp - wt).abs() / wt),
        });
        for (a, b) in p.iter().zip(t.iter()) {
            if ((b - tail.mean) / tail.std).abs() > tail.sigma_t {
                tail_sq += (a - b).powi(2);
                tail_n += 1;
            }
        }
    }
    let n = samples.len() as f64;
    let mean = |f: &dyn Fn(&SampleMetrics) -> f64| samples.iter().map(f).sum::<f64>() / n;
    let rel: Vec<f64> = samples.iter().filter_map(|s| s.warpage_rel).collect();
    let aggregate = Aggregates {
        count: samples.len(),
        mean_rmse: mean(&|s| s.rmse),
        max_rmse: samples.iter().map(|s| s.rmse).fold(f64::NEG_INFINITY, f64::max),
        min_rmse: samples.iter().map(|s| s.rmse).fold(f64::INFINITY, f64::min),
        mean_nrmse: mean(&|s| s.nrmse),
        mean_nmae: mean(&|s| s.nmae),
        mean_warpage_abs: mean(&|s| s.warpage_abs),
        mean_warpage_rel: if rel.is_empty() {
            0.0
        } else {
            rel.iter().sum::<f64>() / rel.len() as f64
        },
        tail_rmse: (tail_n > 0).then(|| (tail_sq / tail_n as f64).sqrt()),
        tail_pixels: tail_n,
    };
    Ok(EvalReport {
        range_mode: mode,
        full_range,
        sigma_t: tail.sigma_t,
        aggregate,
        samples,
    })
}

/// Denormalized predictions for `samples`, in sample order.
pub fn predict_samples(model: &Model, samples: &[&Sample]) -> Result<Vec<Vec<f64>>, MetricsError> {
    let pool = worker_pool();
    let preds: Result<Vec<Vec<f64>>, ModelError> = pool.install(|| {
        samples
            .par_iter()
            .map(|s| Ok(model.predict(&s.floorplan)?.values))
            .collect()
    });
    Ok(preds?)
}

/// Evaluates `model` on `samples` with tail pixels selected at `sigma_t`
/// under the model's target normalization.
pub fn evaluate(model: &Model, samples: &[&Sample], mode: RangeMode, sigma_t: f64) -> Result<EvalReport, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptySplit);
    }
    let preds = predict_samples(model, samples)?;
    let ids: Vec<usize> = samples.iter().map(|s| s.id).collect();
    let p: Vec<&[f64]> = preds.iter().map(Vec::as_slice).collect();
    let t: Vec<&[f64]> = samples.iter().map(|s| s.map.values.as_slice()).collect();
    let tail = TailSpec {
        mean: model.norm.target_mean,
        std: model.norm.target_std,
        sigma_t,
    };
    evaluate_maps(&ids, &p, &t, mode, tail)
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn table(&self) -> String {
        let a = &self.aggregate;
        let mut s = String::new();
        let rows: [(&str, String); 9] = [
            ("samples", a.count.to_string()),
            ("full range (um)", format!("{:.2}", self.full_range)),
            ("avg warpage error (um)", format!("{:.2}", a.mean_warpage_abs)),
            ("avg warpage error (%)", format!("{:.2}", a.mean_warpage_rel)),
            ("max RMSE (um)", format!("{:.2}", a.max_rmse)),
            ("min RMSE (um)", format!("{:.2}", a.min_rmse)),
            ("avg NRMSE (%)", format!("{:.2}", a.mean_nrmse)),
            ("avg NMAE (%)", format!("{:.2}", a.mean_nmae)),
            (
                "tail RMSE (um)",
                a.tail_rmse.map_or_else(|| "-".into(), |v| format!("{v:.2}")),
            ),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k:<24} {v:>12}");
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub runs: usize,
    /// Milliseconds per run.
    pub mean_ms: f64,
    pub std_ms: f64,
    pub median_ms: f64,
    pub min_ms: f64,
}

impl Timing {
    pub fn from_samples(ms: &[f64]) -> Result<Self, MetricsError> {
        if ms.is_empty() {
            return Err(MetricsError::EmptyTiming);
        }
        let n = ms.len() as f64;
        let mean = ms.iter().sum::<f64>() / n;
        let std = (ms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let mut sorted = ms.to_vec();
        sorted.sort_by(f64::total_cmp);
        let k = sorted.len() / 2;
        let median = if sorted.len() % 2 == 1 {
            sorted[k]
        } else {
            0.5 * (sorted[k - 1] + sorted[k])
        };
        Ok(Self {
            runs: ms.len(),
            mean_ms: mean,
            std_ms: std,
            median_ms: median,
            min_ms: sorted[0],
        })
    }
}

fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("thread pool builds")
        .install(f)
}

fn time_runs(n: usize, warmup: usize, mut f: impl FnMut() -> Result<(), MetricsError>) -> Result<Timing, MetricsError> {
    if n == 0 {
        return Err(MetricsError::EmptyTiming);
    }
    for _ in 0..warmup {
        f()?;
    }
    let mut ms = Vec::with_capacity(n);
    for _ in 0..n {
        let t = Instant::now();
        f()?;
        ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Timing::from_samples(&ms)
}

/// Wall time of `model.predict(fp)` (rTCG, encode, decode, denormalize)
/// on one thread, after three warm-up runs.
pub fn time_inference(model: &Model, fp: &Floorplan, n: usize) -> Result<Timing, MetricsError> {
    single_threaded(|| {
        time_runs(n, 3, || {
            std::hint::black_box(model.predict(std::hint::black_box(fp))?);
            Ok(())
        })
    })
}

/// Wall time of a full oracle solve on one thread, after one warm-up run.
pub fn time_oracle(fp: &Floorplan, options: &OracleOptions, n: usize) -> Result<Timing, MetricsError> {
    single_threaded(|| {
        time_runs(n, 1, || {
            std::hint::black_box(solve_plate_with(fp, options).map_err(ModelError::from)?);
            Ok(())
        })
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedReport {
    pub surrogate: Timing,
    pub oracle: Timing,
    /// Ratio of median times.
    pub speedup: f64,
}

pub fn speed_report(
    model: &Model,
    fp: &Floorplan,
    options: &OracleOptions,
    surrogate_runs: usize,
    oracle_runs: usize,
) -> Result<SpeedReport, MetricsError> {
    let surrogate = time_inference(model, fp, surrogate_runs)?;
    let oracle = time_oracle(fp, options, oracle_runs)?;
    Ok(SpeedReport {
        speedup: oracle.median_ms / surrogate.median_ms,
        surrogate,
        oracle,
    })
}
