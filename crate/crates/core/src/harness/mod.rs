//! Training, checkpointing, evaluation and calibration drivers.

mod checkpoint;
mod train;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use refcod_tensor::Tensor;
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::data::{load_folder, synth_generate, DataError, Sample};
use crate::metrics::{reliability_csv, reliability_svg, MetricError, MetricsReport};
use crate::model::ModelError;

pub use checkpoint::{Checkpoint, ParamRecord, MAGIC, VERSION};
pub use train::{StepLog, TrainOutput, Trainer, LOG_HEADER};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("reading checkpoint: {0}")]
    CheckpointIo(#[from] std::io::Error),
    #[error("{0}")]
    NonFinite(String),
    #[error("cannot train on an empty dataset")]
    EmptyDataset,
    #[error("checkpoint was trained with architecture {trained}, this config describes {requested}; pass --force to evaluate anyway")]
    FingerprintMismatch { trained: String, requested: String },
}

impl HarnessError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// The configured dataset: the on-disk folder if one is set, otherwise the
/// synthetic generator. Folder items that fail to decode are logged and skipped.
pub fn load_dataset(cfg: &RunConfig) -> Result<Vec<Sample>, HarnessError> {
    let data = &cfg.data;
    match &data.folder {
        Some(root) => {
            let mut folder = load_folder(root, &data.split, &data.layout)?;
            folder.resize = Some(cfg.model.image_size as u32);
            folder.refs_per_sample = data.synth.refs_per_sample;
            let mut samples = Vec::with_capacity(folder.len());
            for (item, result) in folder.items.iter().zip(folder.iter()) {
                match result {
                    Ok(s) => samples.push(s),
                    Err(e) => log::warn!("skipping {}: {e}", item.id),
                }
            }
            Ok(samples)
        }
        None => Ok(synth_generate(&data.synth, data.seed)?),
    }
}

/// Refuses to pair a checkpoint with a config of a different architecture unless forced.
pub fn check_compatible(
    trained: &RunConfig,
    requested: &RunConfig,
    force: bool,
) -> Result<(), HarnessError> {
    let (a, b) = (
        trained.architecture_fingerprint_hex(),
        requested.architecture_fingerprint_hex(),
    );
    if a != b && !force {
        return Err(HarnessError::FingerprintMismatch {
            trained: a,
            requested: b,
        });
    }
    if a != b {
        log::warn!("evaluating a checkpoint of architecture {a} under config {b}");
    }
    Ok(())
}

/// Metrics over all samples and over the single- and multi-object subsets,
/// split by the number of connected regions in each ground truth.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub overall: MetricsReport,
    pub single: MetricsReport,
    pub multiple: MetricsReport,
}

impl EvaluationReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, r) in [
            ("overall", &self.overall),
            ("single", &self.single),
            ("multiple", &self.multiple),
        ] {
            let _ = writeln!(out, "[{name}]");
            out.push_str(&r.to_text());
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Scores precomputed probability maps, one per sample in order.
pub fn evaluate_predictions(
    preds: &[Tensor],
    samples: &[Sample],
    n_bins: usize,
) -> Result<EvaluationReport, HarnessError> {
    if preds.len() != samples.len() {
        return Err(HarnessError::Metric(MetricError::Count {
            preds: preds.len(),
            gts: samples.len(),
        }));
    }
    let mut split: [(Vec<Tensor>, Vec<Tensor>); 2] = Default::default();
    for (p, s) in preds.iter().zip(samples) {
        let bucket = usize::from(s.object_count() >= 2);
        split[bucket].0.push(p.clone());
        split[bucket].1.push(s.gt.clone());
    }
    let gts: Vec<Tensor> = samples.iter().map(|s| s.gt.clone()).collect();
    Ok(EvaluationReport {
        overall: MetricsReport::compute(preds, &gts, n_bins)?,
        single: MetricsReport::compute(&split[0].0, &split[0].1, n_bins)?,
        multiple: MetricsReport::compute(&split[1].0, &split[1].1, n_bins)?,
    })
}

/// Writes `reliability.csv` and `reliability.svg` for the overall bins into `dir`.
pub fn write_calibration(
    dir: &Path,
    report: &MetricsReport,
) -> Result<(PathBuf, PathBuf), HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let csv = dir.join("reliability.csv");
    let svg = dir.join("reliability.svg");
    std::fs::write(&csv, reliability_csv(&report.reliability_bins))
        .map_err(|e| HarnessError::io(&csv, e))?;
    std::fs::write(&svg, reliability_svg(&report.reliability_bins, report.ece))
        .map_err(|e| HarnessError::io(&svg, e))?;
    Ok((csv, svg))
}

/// `cfg` with one module switched off and the run renamed after it.
pub fn ablation_config(cfg: &RunConfig, module: &str) -> Result<RunConfig, HarnessError> {
    let mut out = cfg.clone();
    out.ablation.disable(module)?;
    out.name = format!("{}-without-{module}", cfg.name);
    Ok(out)
}
