// SPDX-License-Identifier: Apache-2.0
//! Mini-batch Adam training, validation-based checkpoint selection and the
//! loss-weight sweep.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{split_floorplans, Dataset, Sample};
use crate::decoder::GridPlan;
use crate::loss::{pi_loss_graph, LossConfig, LossTerms};
use crate::metrics::rmse;
use crate::model::{Model, ModelConfig, ModelError, NormStats, Prepared};
use crate::tensor::{Adam, Graph, Tensor, TensorError};
use crate::worker_pool;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training split is empty")]
    EmptyTrainSplit,
    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    Diverged {
        epoch: usize,
        step: usize,
        reason: String,
        /// Parameters at the start of the failing epoch.
        last_good: Box<Model>,
        /// Where `last_good` was written, when an output directory was given.
        saved: Option<PathBuf>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Architecture; its init seed is replaced by `seed`.
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate, cosine-decayed to `lr_min` over all steps.
    pub lr: f64,
    pub lr_min: f64,
    pub loss: LossConfig,
    pub seed: u64,
    /// Fraction of training geometries held out for validation.
    pub val_fraction: f64,
}

impl TrainConfig {
    pub fn gin() -> Self {
        Self {
            model: ModelConfig::gin(),
            epochs: 57,
            batch_size: 16,
            lr: 1e-3,
            lr_min: 1e-4,
            loss: LossConfig::tuned(),
            seed: 0,
            val_fraction: 0.1,
        }
    }

    pub fn gcn() -> Self {
        Self {
            model: ModelConfig::gcn(),
            epochs: 53,
            ..Self::gin()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.batch_size == 0 || self.model.encoder.layers == 0 {
            return bad("batch size and layer count must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr_min > 0.0 && self.lr_min <= self.lr && self.lr.is_finite()) {
            return bad(format!("learning rates {} → {} must satisfy 0 < min ≤ peak", self.lr, self.lr_min));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        self.loss.validate().map_err(TrainError::InvalidConfig)
    }

    fn model_config(&self) -> ModelConfig {
        ModelConfig {
            seed: self.seed,
            ..self.model
        }
    }
}

/// Cosine decay from `peak` at step 0 to `min` at `total`.
pub fn cosine_lr(peak: f64, min: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return peak;
    }
    let t = step as f64 / (total - 1) as f64;
    min + 0.5 * (peak - min) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Mean per-sample NRMSE on the validation set, %.
    pub val_nrmse: f64,
    pub train_mse: f64,
    pub train_tail: f64,
    pub train_grad: f64,
    pub val_mse: f64,
    pub val_tail: f64,
    pub val_grad: f64,
    pub lr: f64,
}

pub const HISTORY_HEADER: &str =
    "epoch,train_loss,val_loss,val_nrmse,train_mse,train_tail,train_grad,val_mse,val_tail,val_grad,lr";

pub fn write_history(w: &mut impl Write, history: &[EpochRecord]) -> std::io::Result<()> {
    writeln!(w, "{HISTORY_HEADER}")?;
    for r in history {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.train_loss,
            r.val_loss,
            r.val_nrmse,
            r.train_mse,
            r.train_tail,
            r.train_grad,
            r.val_mse,
            r.val_tail,
            r.val_grad,
            r.lr
        )?;
    }
    Ok(())
}

/// One sample ready for the tape: normalized inputs and target.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub id: usize,
    pub prep: Prepared,
    /// Normalized `[1, H, W]` target.
    pub target: Tensor,
    /// µm.
    pub truth: Arc<Vec<f64>>,
}

/// Builds normalized items, sharing one grid plan per geometry.
pub fn prepare_items(samples: &[&Sample], norm: &NormStats, cfg: &ModelConfig) -> Result<Vec<TrainItem>, ModelError> {
    let (h, w) = (cfg.grid_h, cfg.grid_w);
    let mut plans: HashMap<usize, GridPlan> = HashMap::new();
    samples
        .iter()
        .map(|s| {
            if s.map.height != h || s.map.width != w {
                return Err(ModelError::Norm(format!(
                    "sample {} map is {}x{}, model grid is {h}x{w}",
                    s.id, s.map.height, s.map.width
                )));
            }
            let plan = match plans.get(&s.floorplan_index) {
                Some(p) => p.clone(),
                None => {
                    let p = GridPlan::new(&s.floorplan, h, w)?;
                    plans.insert(s.floorplan_index, p.clone());
                    p
                }
            };
            let mut input = s.graph_input();
            norm.apply(&mut input);
            Ok(TrainItem {
                id: s.id,
                prep: Prepared {
                    input,
                    plan,
                    pkg_width: s.floorplan.config.pkg_width,
                    pkg_height: s.floorplan.config.pkg_height,
                },
                target: Tensor::new(vec![1, h, w], norm.normalize_target(&s.map.values))?,
                truth: Arc::new(s.map.values.clone()),
            })
        })
        .collect()
}

type SampleGrad = (Vec<Option<Vec<f64>>>, LossTerms);

fn sample_grad(model: &Model, item: &TrainItem, loss: &LossConfig) -> Result<SampleGrad, TensorError> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let out = model.forward(&mut g, &p, &item.prep)?;
    let lv = pi_loss_graph(&mut g, out, &item.target, loss)?;
    let terms = lv.values(&g);
    let grads = g.backward(lv.total)?;
    Ok(((0..model.params.len()).map(|i| grads.get(p[i]).map(<[f64]>::to_vec)).collect(), terms))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationResult {
    pub loss: LossTerms,
    /// Mean per-sample NRMSE over the set's full truth range, %.
    pub nrmse: f64,
}

fn mean_terms(terms: &[LossTerms]) -> LossTerms {
    let n = terms.len().max(1) as f64;
    let mut m = LossTerms::default();
    for t in terms {
        m.total += t.total / n;
        m.mse += t.mse / n;
        m.tail += t.tail / n;
        m.grad += t.grad / n;
    }
    m
}

/// Mean PI-loss terms and NRMSE of `model` on `items`.
pub fn validate(model: &Model, items: &[TrainItem], loss: &LossConfig) -> Result<ValidationResult, TrainError> {
    if items.is_empty() {
        return Ok(ValidationResult::default());
    }
    let (h, w) = (model.config.grid_h, model.config.grid_w);
    let pool = worker_pool();
    let per: Vec<Result<(LossTerms, Vec<f64>), TrainError>> = pool.install(|| {
        items
            .par_iter()
            .map(|it| {
                let z = model.predict_normalized(&it.prep)?;
                let terms = crate::loss::pi_loss(&z, &it.target.data, h, w, loss)?;
                Ok((terms, model.norm.denormalize_target(&z)))
            })
            .collect()
    });
    let per = per.into_iter().collect::<Result<Vec<_>, _>>()?;
    let (lo, hi) = items
        .iter()
        .flat_map(|it| it.truth.iter())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = (hi - lo).max(f64::MIN_POSITIVE);
    let nrmse = per
        .iter()
        .zip(items)
        .map(|((_, pred), it)| 100.0 * rmse(pred, &it.truth) / range)
        .sum::<f64>()
        / items.len() as f64;
    let terms: Vec<LossTerms> = per.iter().map(|(t, _)| *t).collect();
    Ok(ValidationResult {
        loss: mean_terms(&terms),
        nrmse,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub final_model: Model,
    pub best_model: Model,
    /// 0 when no epoch ran or validation is empty and the final model is kept.
    pub best_epoch: usize,
    pub best_val: ValidationResult,
    pub history: Vec<EpochRecord>,
    pub fit_ids: Vec<usize>,
    pub val_ids: Vec<usize>,
}

/// Geometry-level validation hold-out within the training split.
pub fn validation_split(train: &[&Sample], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut geos: Vec<usize> = train.iter().map(|s| s.floorplan_index).collect();
    geos.sort_unstable();
    geos.dedup();
    let (fit_g, val_g) = if fraction > 0.0 && geos.len() > 1 {
        let k = ((1.0 - fraction) * geos.len() as f64).round() as usize;
        split_floorplans(&geos, k.clamp(1, geos.len() - 1) as f64 / geos.len() as f64, seed ^ 0x7a11_da7e)
    } else {
        (geos, Vec::new())
    };
    let pick = |g: &[usize]| -> Vec<usize> {
        train
            .iter()
            .filter(|s| g.binary_search(&s.floorplan_index).is_ok())
            .map(|s| s.id)
            .collect()
    };
    (pick(&fit_g), pick(&val_g))
}

fn checkpoint_meta(epoch: usize, v: &ValidationResult, cfg: &TrainConfig) -> serde_json::Value {
    serde_json::json!({
        "epoch": epoch,
        "val_loss": v.loss.total,
        "val_nrmse": v.nrmse,
        "train_config": cfg,
    })
}

/// Trains on the dataset's training split. With `out`, writes
/// `final.ckpt`, `best.ckpt` and `history.csv` there, and `last_good.ckpt`
/// on divergence.
pub fn train(ds: &Dataset, cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainOutput, TrainError> {
    train_on(&ds.train(), &ds.manifest.norm, cfg, out)
}

pub fn train_on(
    train_split: &[&Sample],
    norm: &NormStats,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutput, TrainError> {
    cfg.validate()?;
    if train_split.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    let (fit_ids, val_ids) = validation_split(train_split, cfg.val_fraction, cfg.seed);
    if val_ids.is_empty() {
        log::warn!("no validation geometries; the final model doubles as the best model");
    }
    let by_id: HashMap<usize, &Sample> = train_split.iter().map(|s| (s.id, *s)).collect();
    let pick = |ids: &[usize]| -> Vec<&Sample> { ids.iter().map(|i| by_id[i]).collect() };
    let mc = cfg.model_config();
    let fit = prepare_items(&pick(&fit_ids), norm, &mc)?;
    let val = prepare_items(&pick(&val_ids), norm, &mc)?;

    let mut model = Model::new(mc, norm.clone());
    let mut opt = Adam::new(model.params.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let steps_per_epoch = fit.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut step = 0;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = (0usize, validate(&model, &val, &cfg.loss)?, model.clone());
    let pool = worker_pool();

    for epoch in 1..=cfg.epochs {
        let last_good = model.clone();
        let mut order: Vec<usize> = (0..fit.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_terms = Vec::with_capacity(fit.len());
        let mut lr = cfg.lr;
        for batch in order.chunks(cfg.batch_size) {
            let diverged = |reason: String, step: usize| -> Result<TrainOutput, TrainError> {
                let saved = match out {
                    Some(dir) => {
                        std::fs::create_dir_all(dir)?;
                        let p = dir.join("last_good.ckpt");
                        last_good.save(&p, serde_json::json!({ "epoch": epoch - 1 }))?;
                        Some(p)
                    }
                    None => None,
                };
                Err(TrainError::Diverged {
                    epoch,
                    step,
                    reason,
                    last_good: Box::new(last_good.clone()),
                    saved,
                })
            };
            let results: Vec<Result<SampleGrad, TensorError>> =
                pool.install(|| batch.par_iter().map(|&k| sample_grad(&model, &fit[k], &cfg.loss)).collect());
            let mut sum: Vec<Option<Vec<f64>>> = vec![None; model.params.len()];
            for r in results {
                let (grads, terms) = match r {
                    Ok(v) => v,
                    Err(e) => return diverged(e.to_string(), step),
                };
                if !terms.total.is_finite() {
                    return diverged(format!("loss {}", terms.total), step);
                }
                epoch_terms.push(terms);
                for (acc, g) in sum.iter_mut().zip(grads) {
                    match (acc.as_mut(), g) {
                        (Some(a), Some(g)) => a.iter_mut().zip(&g).for_each(|(a, g)| *a += g),
                        (None, Some(g)) => *acc = Some(g),
                        _ => {}
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for g in sum.iter_mut().flatten() {
                g.iter_mut().for_each(|v| *v *= inv);
            }
            lr = cosine_lr(cfg.lr, cfg.lr_min, step, total_steps);
            opt.update(model.params.tensors_mut(), &sum, lr);
            step += 1;
            if model.params.tensors().iter().any(|t| t.data.iter().any(|v| !v.is_finite())) {
                return diverged("non-finite parameters".into(), step);
            }
        }
        let tr = mean_terms(&epoch_terms);
        let v = validate(&model, &val, &cfg.loss)?;
        log::info!(
            "epoch {epoch}/{}: train {:.5} val {:.5} val NRMSE {:.3}%",
            cfg.epochs,
            tr.total,
            v.loss.total,
            v.nrmse
        );
        history.push(EpochRecord {
            epoch,
            train_loss: tr.total,
            val_loss: v.loss.total,
            val_nrmse: v.nrmse,
            train_mse: tr.mse,
            train_tail: tr.tail,
            train_grad: tr.grad,
            val_mse: v.loss.mse,
            val_tail: v.loss.tail,
            val_grad: v.loss.grad,
            lr,
        });
        if val.is_empty() || v.loss.total < best.1.loss.total {
            best = (epoch, v, model.clone());
        }
    }

    let (best_epoch, best_val, best_model) = best;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let fin = validate(&model, &val, &cfg.loss)?;
        model.save(dir.join("final.ckpt"), checkpoint_meta(cfg.epochs, &fin, cfg))?;
        best_model.save(dir.join("best.ckpt"), checkpoint_meta(best_epoch, &best_val, cfg))?;
        let mut w = BufWriter::new(File::create(dir.join("history.csv"))?);
        write_history(&mut w, &history)?;
        w.flush()?;
    }
    Ok(TrainOutput {
        final_model: model,
        best_model,
        best_epoch,
        best_val,
        history,
        fit_ids,
        val_ids,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub lambda: f64,
    /// Final-epoch validation PI-loss under the run's own weights.
    pub val_loss: f64,
    pub val_mse: f64,
    pub val_tail: f64,
    pub val_grad: f64,
    pub val_nrmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub best_alpha: f64,
    pub best_lambda: f64,
}

impl SweepReport {
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "alpha,lambda,val_loss,val_mse,val_tail,val_grad,val_nrmse")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.alpha, r.lambda, r.val_loss, r.val_mse, r.val_tail, r.val_grad, r.val_nrmse
            )?;
        }
        Ok(())
    }
}

/// Every `(α, λ)` in `alphas × lambdas` on `subset` with `base`'s schedule.
/// The argmin is taken over converged validation PI-loss; ties keep the
/// earlier grid point.
pub fn sweep(
    subset: &[&Sample],
    norm: &NormStats,
    alphas: &[f64],
    lambdas: &[f64],
    base: &TrainConfig,
) -> Result<SweepReport, TrainError> {
    let in_range = |v: &f64| (0.0..=0.1).contains(v);
    if alphas.is_empty() || lambdas.is_empty() || !alphas.iter().all(in_range) || !lambdas.iter().all(in_range) {
        return Err(TrainError::InvalidConfig("sweep grid must be a non-empty subset of [0, 0.1]²".into()));
    }
    let mut rows = Vec::with_capacity(alphas.len() * lambdas.len());
    for &alpha in alphas {
        for &lambda in lambdas {
            let cfg = TrainConfig {
                loss: LossConfig {
                    alpha,
                    lambda,
                    ..base.loss
                },
                ..*base
            };
            let out = train_on(subset, norm, &cfg, None)?;
            let row = match out.history.last() {
                Some(r) => SweepRow {
                    alpha,
                    lambda,
                    val_loss: r.val_loss,
                    val_mse: r.val_mse,
                    val_tail: r.val_tail,
                    val_grad: r.val_grad,
                    val_nrmse: r.val_nrmse,
                },
                None => SweepRow {
                    alpha,
                    lambda,
                    val_loss: out.best_val.loss.total,
                    val_mse: out.best_val.loss.mse,
                    val_tail: out.best_val.loss.tail,
                    val_grad: out.best_val.loss.grad,
                    val_nrmse: out.best_val.nrmse,
                },
            };
            log::info!("sweep α={alpha} λ={lambda}: val loss {:.5}", row.val_loss);
            rows.push(row);
        }
    }
    let best = rows
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.val_loss.total_cmp(&b.1.val_loss).then(a.0.cmp(&b.0)))
        .map(|(_, r)| (r.alpha, r.lambda))
        .expect("grid is non-empty");
    Ok(SweepReport {
        rows,
        best_alpha: best.0,
        best_lambda: best.1,
    })
}
