// SPDX-License-Identifier: Apache-2.0
//! Subcommands. Each returns the JSON document printed on stdout.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use warpforge::datagen::{gen_dataset, Dataset, ExtendedCase, GenSpec, Sample};
use warpforge::floorplan::Floorplan;
use warpforge::laminate::{solve_plate_with, DeformationMap, OracleOptions};
use warpforge::metrics::{evaluate, evaluate_maps, predict_samples, time_inference, RangeMode, TailSpec};
use warpforge::model::Model;
use warpforge::training::{sweep, train, TrainConfig};

use crate::error::CliError;
use crate::service::{self, AppState, MapResponse, ServiceConfig};

#[derive(Debug, Parser)]
#[command(name = "warpforge", version, about = "Thermal warpage surrogate pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample floorplans and solve them with the plate oracle.
    GenData(GenDataArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Grid search over the tail and gradient loss weights.
    Sweep(SweepArgs),
    /// Evaluate a checkpoint on a dataset split, or compare two maps.
    Eval(EvalArgs),
    /// Predict the deformation map of one floorplan.
    Infer(InferArgs),
    /// Solve one floorplan with the plate oracle.
    Oracle(OracleArgs),
    /// Serve predictions over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Generation spec JSON; the baseline spec when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Shifted distribution 1 (CTE), 2 (die size), 3 (package size) or 4 (die count).
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
    pub extended: Option<u8>,
    /// 200 floorplans × 10 CTE assignments.
    #[arg(long)]
    pub desk_scale: bool,
    /// Oracle nodes per side.
    #[arg(long, default_value_t = 65)]
    pub mesh: usize,
    /// Overrides the spec seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum EncoderArg {
    Gin,
    Gcn,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Full training config JSON; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub encoder: Option<EncoderArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_min: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub sigma_t: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// CSV report path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,0.02,0.05,0.1")]
    pub alphas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.02,0.05,0.1")]
    pub lambdas: Vec<f64>,
    /// Training samples used per run.
    #[arg(long, default_value_t = 200)]
    pub subset: usize,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, value_enum, default_value = "gin")]
    pub encoder: EncoderArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Test,
    Train,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, requires = "data")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Predicted map (binary) to compare against `--truth`.
    #[arg(long, requires = "truth", conflicts_with = "model")]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Writes the full report JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Normalize each sample by its own range instead of the split's.
    #[arg(long)]
    pub per_sample_range: bool,
    #[arg(long, default_value_t = 2.0)]
    pub sigma_t: f64,
    /// Writes `prediction − truth` maps as `{id}.bin` into this directory.
    #[arg(long)]
    pub error_maps: Option<PathBuf>,
    /// Prints the report JSON instead of the table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub floorplan: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Binary map output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Additional timed runs for latency statistics.
    #[arg(long, default_value_t = 0)]
    pub timing_runs: usize,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long)]
    pub floorplan: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 65)]
    pub mesh: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long)]
    pub with_oracle: bool,
    #[arg(long, default_value_t = 65)]
    pub oracle_mesh: usize,
    #[arg(long, default_value_t = 1)]
    pub oracle_workers: usize,
    /// Origin allowed by CORS; repeatable.
    #[arg(long)]
    pub allow_origin: Vec<String>,
}

fn require_file(p: &Path, what: &str) -> Result<(), CliError> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::Input(format!("{what} {} does not exist", p.display())))
    }
}

fn read_json<T: serde::de::DeserializeOwned>(p: &Path, what: &str) -> Result<T, CliError> {
    require_file(p, what)?;
    let s = fs::read_to_string(p).map_err(|e| CliError::Input(format!("{what} {}: {e}", p.display())))?;
    serde_json::from_str(&s).map_err(|e| CliError::Input(format!("{what} {}: {e}", p.display())))
}

fn load_dataset(dir: &Path) -> Result<Dataset, CliError> {
    require_file(&dir.join("manifest.json"), "dataset manifest")?;
    Ok(Dataset::load(dir)?)
}

fn load_model(p: &Path) -> Result<Model, CliError> {
    require_file(p, "checkpoint")?;
    Ok(Model::load(p)?.0)
}

fn load_floorplan(p: &Path) -> Result<Floorplan, CliError> {
    require_file(p, "floorplan")?;
    Ok(Floorplan::load(p)?)
}

fn write_map(m: &DeformationMap, out: Option<&Path>) -> Result<(), CliError> {
    if let Some(p) = out {
        m.save(p)?;
    }
    Ok(())
}

pub fn gen_data(a: &GenDataArgs) -> Result<Value, CliError> {
    let mut spec = match &a.spec {
        Some(p) => read_json::<GenSpec>(p, "spec")?,
        None => GenSpec::baseline(),
    };
    if a.desk_scale {
        let desk = GenSpec::desk();
        spec.floorplans = desk.floorplans;
        spec.assignments = desk.assignments;
    }
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    if let Some(n) = a.extended {
        spec = ExtendedCase::from_number(n).expect("clap bounds the case").apply(&spec)?;
    }
    spec.validate()?;
    let oracle = OracleOptions::with_mesh(a.mesh, a.mesh);
    let t = Instant::now();
    let ds = gen_dataset(&spec, &oracle)?;
    ds.save(&a.out)?;
    let m = &ds.manifest;
    let total = spec.sample_count();
    log::info!("{} samples in {:.1} s", ds.samples.len(), t.elapsed().as_secs_f64());
    let rate = m.skipped.len() as f64 / total as f64;
    if rate > 0.01 {
        return Err(CliError::Runtime(format!(
            "oracle failed on {} of {total} samples ({:.1}%); dataset written to {}",
            m.skipped.len(),
            100.0 * rate,
            a.out.display()
        )));
    }
    Ok(json!({
        "out": a.out,
        "samples": ds.samples.len(),
        "train": m.train.len(),
        "test": m.test.len(),
        "skipped": m.skipped.len(),
        "seed": m.seed,
    }))
}

fn encoder_config(e: EncoderArg) -> TrainConfig {
    match e {
        EncoderArg::Gin => TrainConfig::gin(),
        EncoderArg::Gcn => TrainConfig::gcn(),
    }
}

pub fn train_cmd(a: &TrainArgs) -> Result<Value, CliError> {
    let mut cfg = match (&a.config, a.encoder) {
        (Some(p), _) => read_json::<TrainConfig>(p, "training config")?,
        (None, e) => encoder_config(e.unwrap_or(EncoderArg::Gin)),
    };
    if let (Some(_), Some(e)) = (&a.config, a.encoder) {
        cfg.model.encoder = encoder_config(e).model.encoder;
    }
    macro_rules! set {
        ($field:expr, $flag:expr) => {
            if let Some(v) = $flag {
                $field = v;
            }
        };
    }
    set!(cfg.epochs, a.epochs);
    set!(cfg.batch_size, a.batch_size);
    set!(cfg.lr, a.lr);
    set!(cfg.lr_min, a.lr_min);
    set!(cfg.loss.alpha, a.alpha);
    set!(cfg.loss.lambda, a.lambda);
    set!(cfg.loss.sigma_t, a.sigma_t);
    set!(cfg.seed, a.seed);
    let ds = load_dataset(&a.data)?;
    let t = Instant::now();
    let out = train(&ds, &cfg, Some(&a.out))?;
    let secs = t.elapsed().as_secs_f64();
    log::info!("trained {} epochs in {secs:.1} s", cfg.epochs);
    Ok(json!({
        "epochs": cfg.epochs,
        "best_epoch": out.best_epoch,
        "best_val_loss": out.best_val.loss.total,
        "best_val_nrmse": out.best_val.nrmse,
        "final": a.out.join("final.ckpt"),
        "best": a.out.join("best.ckpt"),
        "history": a.out.join("history.csv"),
    }))
}

pub fn sweep_cmd(a: &SweepArgs) -> Result<Value, CliError> {
    let ds = load_dataset(&a.data)?;
    let train_split = ds.train();
    let subset: Vec<&Sample> = train_split.iter().copied().take(a.subset).collect();
    let base = TrainConfig {
        epochs: a.epochs,
        seed: a.seed,
        ..encoder_config(a.encoder)
    };
    let rep = sweep(&subset, &ds.manifest.norm, &a.alphas, &a.lambdas, &base)?;
    let mut w = BufWriter::new(File::create(&a.out)?);
    rep.write_csv(&mut w)?;
    w.flush()?;
    Ok(json!({
        "best_alpha": rep.best_alpha,
        "best_lambda": rep.best_lambda,
        "runs": rep.rows.len(),
        "report": a.out,
    }))
}

/// Returns the document and the human-readable table.
pub fn eval_cmd(a: &EvalArgs) -> Result<(Value, String), CliError> {
    let mode = if a.per_sample_range {
        RangeMode::PerSample
    } else {
        RangeMode::Split
    };
    let report = match (&a.model, &a.pred) {
        (Some(mp), _) => {
            let data = a.data.as_ref().expect("clap requires data with model");
            let model = load_model(mp)?;
            let ds = load_dataset(data)?;
            let samples: Vec<&Sample> = match a.split {
                SplitArg::Test => ds.test(),
                SplitArg::Train => ds.train(),
                SplitArg::All => ds.samples.iter().collect(),
            };
            if let Some(dir) = &a.error_maps {
                fs::create_dir_all(dir)?;
                let preds = predict_samples(&model, &samples)?;
                for (s, p) in samples.iter().zip(preds) {
                    let err: Vec<f64> = p.iter().zip(&s.map.values).map(|(p, t)| p - t).collect();
                    DeformationMap::new(s.map.height, s.map.width, s.map.dx, s.map.dy, err)?
                        .save(dir.join(format!("{}.bin", s.id)))?;
                }
            }
            evaluate(&model, &samples, mode, a.sigma_t)?
        }
        (None, Some(pp)) => {
            let tp = a.truth.as_ref().expect("clap requires truth with pred");
            require_file(pp, "prediction map")?;
            require_file(tp, "truth map")?;
            let (p, t) = (DeformationMap::load(pp)?, DeformationMap::load(tp)?);
            let n = t.values.len() as f64;
            let mean = t.values.iter().sum::<f64>() / n;
            let std = (t.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            let tail = TailSpec {
                mean,
                std: std.max(f64::MIN_POSITIVE),
                sigma_t: a.sigma_t,
            };
            evaluate_maps(&[0], &[&p.values], &[&t.values], mode, tail)?
        }
        (None, None) => return Err(CliError::Input("eval needs --model/--data or --pred/--truth".into())),
    };
    if let Some(out) = &a.out {
        fs::write(out, report.to_json())?;
    }
    Ok((serde_json::to_value(&report).expect("report serializes"), report.table()))
}

pub fn infer_cmd(a: &InferArgs) -> Result<Value, CliError> {
    let model = load_model(&a.model)?;
    let fp = load_floorplan(&a.floorplan)?;
    let t = Instant::now();
    let map = model.predict(&fp)?;
    let ms = t.elapsed().as_secs_f64() * 1e3;
    write_map(&map, a.out.as_deref())?;
    let mut doc = serde_json::to_value(MapResponse::new(&map, ms)).expect("response serializes");
    if a.timing_runs > 0 {
        let timing = time_inference(&model, &fp, a.timing_runs)?;
        doc["timing"] = serde_json::to_value(timing).expect("timing serializes");
    }
    Ok(doc)
}

pub fn oracle_cmd(a: &OracleArgs) -> Result<Value, CliError> {
    let fp = load_floorplan(&a.floorplan)?;
    let t = Instant::now();
    let sol = solve_plate_with(&fp, &OracleOptions::with_mesh(a.mesh, a.mesh))?;
    let ms = t.elapsed().as_secs_f64() * 1e3;
    write_map(&sol.map, a.out.as_deref())?;
    let mut doc = serde_json::to_value(MapResponse::new(&sol.map, ms)).expect("response serializes");
    doc["solve_ms"] = doc["inference_ms"].take();
    doc.as_object_mut().expect("object").remove("inference_ms");
    Ok(doc)
}

pub fn serve_cmd(a: &ServeArgs) -> Result<Value, CliError> {
    require_file(&a.model, "checkpoint")?;
    let config = ServiceConfig {
        with_oracle: a.with_oracle,
        oracle: OracleOptions::with_mesh(a.oracle_mesh, a.oracle_mesh),
        oracle_workers: a.oracle_workers,
        allow_origins: a.allow_origin.clone(),
    };
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(warpforge::worker_threads())
        .enable_all()
        .build()?;
    rt.block_on(async {
        let addr = format!("{}:{}", a.host, a.port);
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::Input(format!("cannot bind {addr}: {e}")))?;
        let state = AppState::new(config);
        service::load_in_background(state.clone(), a.model.clone());
        log::info!("listening on {}", listener.local_addr()?);
        axum::serve(listener, service::router(state)).await?;
        Ok(json!({ "status": "stopped" }))
    })
}

/// Runs one parsed command; `eval` prints its table unless JSON is asked for.
pub fn run(cli: &Cli) -> Result<Option<Value>, CliError> {
    let v = match &cli.command {
        Command::GenData(a) => gen_data(a)?,
        Command::Train(a) => train_cmd(a)?,
        Command::Sweep(a) => sweep_cmd(a)?,
        Command::Eval(a) => {
            let (doc, table) = eval_cmd(a)?;
            if !a.json {
                print!("{table}");
                return Ok(None);
            }
            doc
        }
        Command::Infer(a) => infer_cmd(a)?,
        Command::Oracle(a) => oracle_cmd(a)?,
        Command::Serve(a) => serve_cmd(a)?,
    };
    Ok(Some(v))
}
