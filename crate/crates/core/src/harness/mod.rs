//! Pipeline stages driven by a [`RunConfig`]. Stages exchange data only
//! through files in the output directory:
//!
//! | stage   | reads                                   | writes |
//! |---------|-----------------------------------------|--------|
//! | train   | dataset                                 | `baseline.ckpt`, `train_report.json` |
//! | score   | `baseline.ckpt`                         | `scores.csv` |
//! | tune    | `baseline.ckpt`, `scores.csv`           | `ratios.json`, `replay.jsonl` |
//! | prune   | `baseline.ckpt`, `scores.csv`, `ratios.json` | `pruned.ckpt`, `layer_filters.csv`, `prune_delta.json` |
//! | distill | `baseline.ckpt`, `pruned.ckpt`          | `distilled.ckpt`, `distill_report.json` |
//! | report  | all of the above                        | `report.json` |

mod config;

pub use config::{
    parse_pairs, DatasetConfig, DatasetKind, RunConfig, SensitivityConfig, KNOWN_KEYS,
};

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::controller::{replay_jsonl, run_search, PruneReward};
use crate::data::{parse_cifar10_binary, parse_mnist_idx, synthetic_blobs_with_noise, Dataset};
use crate::error::Error;
use crate::model::{
    build_by_name, count_flops, count_params, decode_checkpoint, encode_checkpoint, ModelGraph,
};
use crate::prune::{apply_prune, plan_from_scores, Direction, ModelDelta, PrunePlan};
use crate::sensitivity::{score_model, CalibrationSet, ScoreTable};
use crate::train::{distill, evaluate, train, TrainReport};

pub const BASELINE_CKPT: &str = "baseline.ckpt";
pub const TRAIN_REPORT: &str = "train_report.json";
pub const SCORES_CSV: &str = "scores.csv";
pub const RATIOS_JSON: &str = "ratios.json";
pub const REPLAY_JSONL: &str = "replay.jsonl";
pub const PRUNED_CKPT: &str = "pruned.ckpt";
pub const LAYER_FILTERS_CSV: &str = "layer_filters.csv";
pub const PRUNE_DELTA_JSON: &str = "prune_delta.json";
pub const DISTILLED_CKPT: &str = "distilled.ckpt";
pub const DISTILL_REPORT: &str = "distill_report.json";
pub const REPORT_JSON: &str = "report.json";

const TEST_SPLIT_SALT: u64 = 0x7E57_5EED;
const CALIB_SALT: u64 = 0xCA11_B8A7;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("artifact error: {0}")]
    Artifact(String),
    #[error("stage order error: {0}")]
    StageOrder(String),
    #[error(transparent)]
    Run(#[from] Error),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Artifact(_) => 3,
            HarnessError::StageOrder(_) => 4,
            HarnessError::Run(_) => 1,
        }
    }
}

type HResult<T> = Result<T, HarnessError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Train,
    Score,
    Tune,
    Prune,
    Distill,
    Report,
    Pipeline,
}

impl Stage {
    pub const SEQUENCE: [Stage; 6] = [
        Stage::Train,
        Stage::Score,
        Stage::Tune,
        Stage::Prune,
        Stage::Distill,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Train => "train",
            Stage::Score => "score",
            Stage::Tune => "tune",
            Stage::Prune => "prune",
            Stage::Distill => "distill",
            Stage::Report => "report",
            Stage::Pipeline => "pipeline",
        }
    }
}

/// Runs one stage, or every stage in order for [`Stage::Pipeline`].
pub fn run_stage(stage: Stage, cfg: &RunConfig) -> HResult<()> {
    validate_paths(cfg)?;
    match stage {
        Stage::Pipeline => Stage::SEQUENCE.iter().try_for_each(|&s| run_stage(s, cfg)),
        Stage::Train => cmd_train(cfg),
        Stage::Score => cmd_score(cfg),
        Stage::Tune => cmd_tune(cfg),
        Stage::Prune => cmd_prune(cfg),
        Stage::Distill => cmd_distill(cfg),
        Stage::Report => cmd_report(cfg).map(|_| ()),
    }
}

fn validate_paths(cfg: &RunConfig) -> HResult<()> {
    if let Some(p) = &cfg.dataset.path {
        if !p.exists() {
            return Err(HarnessError::Config(format!(
                "dataset.path {} does not exist",
                p.display()
            )));
        }
    }
    fs::create_dir_all(&cfg.output_dir).map_err(|e| {
        HarnessError::Config(format!("output.dir {}: {e}", cfg.output_dir.display()))
    })?;
    build_by_name(&cfg.model).map_err(|e| HarnessError::Config(format!("model.name: {e}")))?;
    Ok(())
}

fn artifact_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.output_dir.join(name)
}

fn read_artifact(cfg: &RunConfig, name: &str, producer: &str) -> HResult<Vec<u8>> {
    let path = artifact_path(cfg, name);
    if !path.exists() {
        return Err(HarnessError::StageOrder(format!(
            "{name} not found in {}; run `dsfp {producer}` first",
            cfg.output_dir.display()
        )));
    }
    fs::read(&path).map_err(|e| HarnessError::Artifact(format!("{}: {e}", path.display())))
}

fn write_artifact(cfg: &RunConfig, name: &str, bytes: &[u8]) -> HResult<()> {
    let path = artifact_path(cfg, name);
    fs::write(&path, bytes)
        .map_err(|e| HarnessError::Artifact(format!("{}: {e}", path.display())))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn load_model(cfg: &RunConfig, name: &str, producer: &str) -> HResult<ModelGraph<f32>> {
    let bytes = read_artifact(cfg, name, producer)?;
    decode_checkpoint(&bytes).map_err(|e| HarnessError::Artifact(format!("{name}: {e}")))
}

fn load_json<T: for<'de> Deserialize<'de>>(
    cfg: &RunConfig,
    name: &str,
    producer: &str,
) -> HResult<T> {
    let bytes = read_artifact(cfg, name, producer)?;
    serde_json::from_slice(&bytes).map_err(|e| HarnessError::Artifact(format!("{name}: {e}")))
}

fn load_scores(cfg: &RunConfig, model: &ModelGraph<f32>) -> HResult<ScoreTable> {
    let bytes = read_artifact(cfg, SCORES_CSV, "score")?;
    let text = String::from_utf8(bytes)
        .map_err(|_| HarnessError::Artifact(format!("{SCORES_CSV} is not UTF-8")))?;
    let table = ScoreTable::from_csv(&text)
        .map_err(|e| HarnessError::Artifact(format!("{SCORES_CSV}: {e}")))?;
    table
        .check_matches(model)
        .map_err(|e| HarnessError::Artifact(format!("{SCORES_CSV}: {e}")))?;
    Ok(table)
}

fn to_json<T: Serialize>(v: &T) -> HResult<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(v).map_err(Error::from)?;
    s.push(b'\n');
    Ok(s)
}

fn read_dir_sorted(dir: &Path, suffix: &str) -> HResult<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| HarnessError::Config(format!("dataset.path {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.to_string_lossy().ends_with(suffix))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads the configured dataset in full.
pub fn load_dataset(cfg: &RunConfig) -> HResult<Dataset> {
    let d = &cfg.dataset;
    let data_err = |e: Error| HarnessError::Artifact(format!("dataset: {e}"));
    let read = |p: &Path| {
        fs::read(p).map_err(|e| HarnessError::Config(format!("dataset file {}: {e}", p.display())))
    };
    let shape = build_by_name(&cfg.model)
        .map_err(|e| HarnessError::Config(format!("model.name: {e}")))?
        .meta
        .input_shape;
    let ds = match d.kind {
        DatasetKind::SyntheticBlobs => {
            synthetic_blobs_with_noise(d.samples.unwrap_or(2000), 10, shape, cfg.seed, d.noise)
                .map_err(data_err)?
        }
        DatasetKind::Cifar10 => {
            let path = d.path.as_ref().expect("validated");
            let files = if path.is_dir() {
                read_dir_sorted(path, ".bin")?
            } else {
                vec![path.clone()]
            };
            if files.is_empty() {
                return Err(HarnessError::Config(format!(
                    "no .bin files in {}",
                    path.display()
                )));
            }
            let parts = files
                .iter()
                .map(|f| parse_cifar10_binary(&read(f)?).map_err(data_err))
                .collect::<HResult<Vec<_>>>()?;
            Dataset::concat(&parts).map_err(data_err)?
        }
        DatasetKind::Mnist => {
            let dir = d.path.as_ref().expect("validated");
            let images = read(&dir.join("train-images-idx3-ubyte"))?;
            let labels = read(&dir.join("train-labels-idx1-ubyte"))?;
            parse_mnist_idx(&images, &labels).map_err(data_err)?
        }
    };
    let ds = match (d.kind.clone(), d.samples) {
        (DatasetKind::SyntheticBlobs, _) | (_, None) => ds,
        (_, Some(n)) => ds.take(n),
    };
    if ds.sample_shape() != shape {
        return Err(HarnessError::Config(format!(
            "dataset samples are {:?} but model {} expects {:?}",
            ds.sample_shape(),
            cfg.model,
            shape
        )));
    }
    Ok(ds)
}

/// `(train pool, test set)`; the pool is what training, scoring and tuning see.
pub fn split_dataset(cfg: &RunConfig) -> HResult<(Dataset, Dataset)> {
    let ds = load_dataset(cfg)?;
    let (pool, test) =
        ds.split_validation(cfg.dataset.test_fraction, cfg.seed ^ TEST_SPLIT_SALT)?;
    if pool.is_empty() || test.is_empty() {
        return Err(HarnessError::Config(format!(
            "dataset of {} samples is too small",
            ds.len()
        )));
    }
    Ok((pool, test))
}

fn cmd_train(cfg: &RunConfig) -> HResult<()> {
    let (pool, _) = split_dataset(cfg)?;
    let init = build_by_name(&cfg.model)?.initialized(cfg.seed);
    info!("training {} on {} samples", cfg.model, pool.len());
    let (best, report) = train(&init, &pool, &cfg.train)?;
    write_artifact(cfg, BASELINE_CKPT, &encode_checkpoint(&best)?)?;
    write_artifact(cfg, TRAIN_REPORT, &to_json(&report)?)
}

fn cmd_score(cfg: &RunConfig) -> HResult<()> {
    let model = load_model(cfg, BASELINE_CKPT, "train")?;
    let (pool, _) = split_dataset(cfg)?;
    let s = &cfg.sensitivity;
    let calib = CalibrationSet::from_dataset(
        &pool,
        s.calib_batches,
        s.calib_batch_size,
        cfg.seed ^ CALIB_SALT,
    )?;
    info!(
        "scoring {} filters over {} calibration batches",
        model.total_filters(),
        calib.batch_count()
    );
    let table = score_model(&model, &calib, s.mode)?;
    write_artifact(cfg, SCORES_CSV, table.to_csv().as_bytes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatiosFile {
    pub base_rate: f64,
    pub direction: Direction,
    pub ratios: Vec<f64>,
}

fn cmd_tune(cfg: &RunConfig) -> HResult<()> {
    let model = load_model(cfg, BASELINE_CKPT, "train")?;
    let scores = load_scores(cfg, &model)?;
    let (pool, _) = split_dataset(cfg)?;
    let (_, val) = pool.split_validation(crate::train::VALIDATION_FRACTION, cfg.train.seed)?;
    let eval = val.take(cfg.eval_subset);
    let dir = cfg.sensitivity.direction;
    let mut oracle = PruneReward::new(&model, &scores, dir, &eval, cfg.controller.lambda_r)?;
    info!("searching ratios over {} episodes", cfg.controller.episodes);
    let result = run_search(model.filter_counts().len(), &cfg.controller, &mut oracle)?;
    let ratios = RatiosFile {
        base_rate: cfg.controller.base_rate,
        direction: dir,
        ratios: result.ratios,
    };
    write_artifact(cfg, RATIOS_JSON, &to_json(&ratios)?)?;
    write_artifact(cfg, REPLAY_JSONL, replay_jsonl(&result.log)?.as_bytes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneRecord {
    pub identity: bool,
    pub plan: PrunePlan,
    pub delta: ModelDelta,
}

pub fn layer_filters_csv(delta: &ModelDelta) -> String {
    let mut out = String::from("layer_id,filters_before,filters_after\n");
    for (i, (b, a)) in delta
        .filters_before
        .iter()
        .zip(&delta.filters_after)
        .enumerate()
    {
        let _ = writeln!(out, "{i},{b},{a}");
    }
    out
}

fn cmd_prune(cfg: &RunConfig) -> HResult<()> {
    let model = load_model(cfg, BASELINE_CKPT, "train")?;
    let plan = if cfg.identity_prune {
        PrunePlan::identity(&model)
    } else {
        let scores = load_scores(cfg, &model)?;
        let ratios: RatiosFile = load_json(cfg, RATIOS_JSON, "tune")?;
        plan_from_scores(&model, &scores, &ratios.ratios, ratios.direction)
            .map_err(|e| HarnessError::Artifact(format!("{RATIOS_JSON}: {e}")))?
    };
    let (pruned, delta) = apply_prune(&model, &plan)?;
    info!(
        "params {} -> {}, MACs {} -> {}",
        delta.params_before, delta.params_after, delta.macs_before, delta.macs_after
    );
    write_artifact(cfg, PRUNED_CKPT, &encode_checkpoint(&pruned)?)?;
    write_artifact(cfg, LAYER_FILTERS_CSV, layer_filters_csv(&delta).as_bytes())?;
    let record = PruneRecord {
        identity: cfg.identity_prune,
        plan,
        delta,
    };
    write_artifact(cfg, PRUNE_DELTA_JSON, &to_json(&record)?)
}

fn cmd_distill(cfg: &RunConfig) -> HResult<()> {
    let teacher = load_model(cfg, BASELINE_CKPT, "train")?;
    let student = load_model(cfg, PRUNED_CKPT, "prune")?;
    let record: PruneRecord = load_json(cfg, PRUNE_DELTA_JSON, "prune")?;
    let (best, report) = if record.identity {
        // Nothing was removed, so the student is kept as is.
        (student, TrainReport::default())
    } else {
        let (pool, _) = split_dataset(cfg)?;
        info!("distilling for {} epochs", cfg.kd.epochs);
        distill(&student, &teacher, &pool, &cfg.kd)?
    };
    write_artifact(cfg, DISTILLED_CKPT, &encode_checkpoint(&best)?)?;
    write_artifact(cfg, DISTILL_REPORT, &to_json(&report)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub acc: f64,
    pub params: u64,
    pub macs: u64,
    pub flops: u64,
    pub filters: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub layer_id: usize,
    pub ratio: f64,
    pub filters_before: usize,
    pub filters_after: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageResults {
    pub train_best_epoch: usize,
    pub train_best_val_acc: f64,
    pub score_rows: usize,
    pub imp_min: f64,
    pub imp_max: f64,
    pub tuned_ratios: Vec<f64>,
    pub distill_best_epoch: usize,
    pub distill_best_val_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalSummary {
    pub acc_pruned: f64,
    pub acc_finetuned: f64,
    pub retention_pct: f64,
    pub retention: String,
    pub params: u64,
    pub macs: u64,
    pub flops: u64,
    pub filters: usize,
    pub params_reduction_pct: f64,
    pub flops_reduction_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub model: String,
    pub dataset: String,
    pub seed: u64,
    pub direction: Direction,
    pub kl_mode: String,
    pub identity_prune: bool,
    pub test_samples: usize,
    pub baseline: ModelSummary,
    pub stages: StageResults,
    pub layers: Vec<LayerRow>,
    #[serde(rename = "final")]
    pub final_: FinalSummary,
}

fn summarize(model: &ModelGraph<f32>, test: &Dataset) -> HResult<ModelSummary> {
    let flops = count_flops(model)?;
    Ok(ModelSummary {
        acc: evaluate(model, test)?,
        params: count_params(model).total,
        macs: flops.total_macs,
        flops: flops.total_flops,
        filters: model.total_filters(),
    })
}

fn pct_reduction(before: u64, after: u64) -> f64 {
    if before == 0 {
        0.0
    } else {
        100.0 * (1.0 - after as f64 / before as f64)
    }
}

fn cmd_report(cfg: &RunConfig) -> HResult<RunReport> {
    let baseline = load_model(cfg, BASELINE_CKPT, "train")?;
    let pruned = load_model(cfg, PRUNED_CKPT, "prune")?;
    let distilled = load_model(cfg, DISTILLED_CKPT, "distill")?;
    let train_rep: TrainReport = load_json(cfg, TRAIN_REPORT, "train")?;
    let distill_rep: TrainReport = load_json(cfg, DISTILL_REPORT, "distill")?;
    let record: PruneRecord = load_json(cfg, PRUNE_DELTA_JSON, "prune")?;
    let scores = load_scores(cfg, &baseline)?;
    let ratios: Option<RatiosFile> = if artifact_path(cfg, RATIOS_JSON).exists() {
        Some(load_json(cfg, RATIOS_JSON, "tune")?)
    } else {
        None
    };
    if pruned.filter_counts() != record.delta.filters_after
        || distilled.filter_counts() != record.delta.filters_after
    {
        return Err(HarnessError::Artifact(
            "pruned or distilled checkpoint disagrees with prune_delta.json".into(),
        ));
    }
    let (_, test) = split_dataset(cfg)?;
    let base = summarize(&baseline, &test)?;
    let acc_pruned = evaluate(&pruned, &test)?;
    let fin = summarize(&distilled, &test)?;
    if base.acc <= 0.0 {
        return Err(HarnessError::Run(Error::InvalidArgument(
            "baseline accuracy is zero on the test split".into(),
        )));
    }
    let retention_pct = 100.0 * fin.acc / base.acc;
    let imps = scores.rows.iter().map(|r| r.imp);
    let report = RunReport {
        model: cfg.model.clone(),
        dataset: baseline_dataset_name(cfg),
        seed: cfg.seed,
        direction: record.plan.direction,
        kl_mode: cfg.sensitivity.mode.to_string(),
        identity_prune: record.identity,
        test_samples: test.len(),
        stages: StageResults {
            train_best_epoch: train_rep.best_epoch,
            train_best_val_acc: train_rep.best_val_acc,
            score_rows: scores.len(),
            imp_min: imps.clone().fold(f64::INFINITY, f64::min),
            imp_max: imps.fold(f64::NEG_INFINITY, f64::max),
            tuned_ratios: ratios.map(|r| r.ratios).unwrap_or_default(),
            distill_best_epoch: distill_rep.best_epoch,
            distill_best_val_acc: distill_rep.best_val_acc,
        },
        layers: record
            .plan
            .layers
            .iter()
            .map(|lp| LayerRow {
                layer_id: lp.conv,
                ratio: lp.ratio,
                filters_before: record.delta.filters_before[lp.conv],
                filters_after: record.delta.filters_after[lp.conv],
            })
            .collect(),
        final_: FinalSummary {
            acc_pruned,
            acc_finetuned: fin.acc,
            retention_pct,
            retention: format!("{retention_pct:.2}%"),
            params: fin.params,
            macs: fin.macs,
            flops: fin.flops,
            filters: fin.filters,
            params_reduction_pct: pct_reduction(base.params, fin.params),
            flops_reduction_pct: pct_reduction(base.flops, fin.flops),
        },
        baseline: base,
    };
    write_artifact(cfg, REPORT_JSON, &to_json(&report)?)?;
    info!(
        "retention {}, FLOPs reduction {:.2}%",
        report.final_.retention, report.final_.flops_reduction_pct
    );
    Ok(report)
}

fn baseline_dataset_name(cfg: &RunConfig) -> String {
    match cfg.dataset.kind {
        DatasetKind::SyntheticBlobs => "synthetic_blobs".into(),
        DatasetKind::Cifar10 => "cifar10".into(),
        DatasetKind::Mnist => "mnist".into(),
    }
}

/// Runs the report stage and returns the parsed report.
pub fn build_report(cfg: &RunConfig) -> HResult<RunReport> {
    validate_paths(cfg)?;
    cmd_report(cfg)
}
