//! Training loop: shuffled mini-batches, Adam with per-group learning rates,
//! cosine annealing per epoch, CSV logging, checkpoints and a NaN abort.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use refcod_tensor::nn::{ParamGroup, ParamStore, Session};
use refcod_tensor::optim::{cosine_lr, Adam};
use refcod_tensor::Tensor;
use serde::Serialize;

use super::checkpoint::Checkpoint;
use super::HarnessError;
use crate::config::RunConfig;
use crate::data::Sample;
use crate::losses::{total_loss, LossReport};
use crate::model::{Batch, Model};

/// Shuffling draws from this ChaCha stream of the run seed; initialisation uses stream 0.
const SHUFFLE_STREAM: u64 = 1;

pub const LOG_HEADER: &str =
    "step,epoch,lr_head,lr_backbone,total,structural_1,structural_2,refined_1,refined_2,evidential,focal";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    /// 1-based index of the step.
    pub step: u64,
    pub epoch: u64,
    pub lr_head: f64,
    pub lr_backbone: f64,
    pub report: LossReport,
}

impl StepLog {
    /// One CSV row; floats use the shortest representation that round-trips.
    pub fn csv_row(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.lr_head,
            self.lr_backbone,
            r.total,
            r.structural[0],
            r.structural[1],
            r.structural_refined[0],
            r.structural_refined[1],
            r.evidential,
            r.focal
        )
    }
}

/// Where a run writes its log and checkpoints.
#[derive(Clone, Debug, Default)]
pub struct TrainOutput {
    pub dir: Option<PathBuf>,
}

impl TrainOutput {
    pub fn to_dir(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: Some(dir.into()),
        }
    }

    pub fn log_path(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("loss_log.csv"))
    }

    pub fn checkpoint_path(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("checkpoint.bin"))
    }
}

pub struct Trainer {
    pub config: RunConfig,
    pub store: ParamStore,
    pub model: Model,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed steps.
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub log: Vec<StepLog>,
}

impl Trainer {
    pub fn new(config: &RunConfig) -> Result<Self, HarnessError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::new(&mut store, &config.model, &mut init)?;
        let adam = Adam::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(SHUFFLE_STREAM);
        Ok(Self {
            config: config.clone(),
            store,
            model,
            adam,
            epoch: 0,
            step: 0,
            rng,
            log: Vec::new(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, HarnessError> {
        let mut trainer = Self::new(&ckpt.config)?;
        ckpt.restore(&mut trainer.store, &mut trainer.adam)?;
        trainer.epoch = ckpt.epoch;
        trainer.step = ckpt.step;
        trainer.rng = ckpt.rng();
        Ok(trainer)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            &self.config,
            self.epoch,
            self.step,
            &self.rng,
            &self.store,
            &self.adam,
        )
    }

    pub fn num_parameters(&self) -> usize {
        self.store
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(_, e)| e.value.numel())
            .sum()
    }

    /// Head learning rate for the current epoch.
    pub fn learning_rate(&self) -> f64 {
        let o = &self.config.optim;
        cosine_lr(o.base_lr, o.lr_floor, self.epoch as usize, o.epochs)
    }

    fn finished(&self) -> bool {
        let o = &self.config.optim;
        self.epoch as usize >= o.epochs || (o.max_steps > 0 && self.step as usize >= o.max_steps)
    }

    /// One optimiser step on `batch` at head learning rate `lr`.
    pub fn step(&mut self, batch: &Batch, lr: f64) -> Result<StepLog, HarnessError> {
        let (report, grads, buffers) = {
            let s = Session::new(&self.store, true);
            let out = self.model.forward(&s, batch, &self.config.ablation)?;
            let (loss, report) = total_loss(&out.loss_inputs(&batch.gt), &self.config.loss);
            if !report.total.is_finite() {
                return Err(self.non_finite(batch, &report, "loss"));
            }
            loss.backward();
            (report, s.grads(), s.take_buffer_updates())
        };
        if let Some((id, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
            let what = format!("gradient of `{}`", self.store.entry(*id).name);
            return Err(self.non_finite(batch, &report, &what));
        }
        for (id, value) in buffers {
            *self.store.get_mut(id) = value;
        }
        let backbone = lr * self.config.optim.backbone_lr_scale;
        self.adam.update(&mut self.store, &grads, |g| match g {
            ParamGroup::Backbone => backbone,
            ParamGroup::Head => lr,
        });
        self.step += 1;
        let entry = StepLog {
            step: self.step,
            epoch: self.epoch,
            lr_head: lr,
            lr_backbone: backbone,
            report,
        };
        self.log.push(entry.clone());
        Ok(entry)
    }

    fn non_finite(&self, batch: &Batch, report: &LossReport, what: &str) -> HarnessError {
        let mut diag = String::new();
        let _ = writeln!(
            diag,
            "non-finite {what} at step {} (epoch {})",
            self.step + 1,
            self.epoch
        );
        let _ = writeln!(diag, "batch: {}", batch.ids.join(", "));
        let _ = writeln!(diag, "loss parts: {report:?}");
        let _ = writeln!(
            diag,
            "input range: [{}, {}]",
            batch.images.min(),
            batch.images.max()
        );
        HarnessError::NonFinite(diag)
    }

    /// Runs epochs until `optim.epochs` or `optim.max_steps` is reached.
    /// Appends each step to `<dir>/loss_log.csv`, writes
    /// `<dir>/checkpoint_epoch<N>.bin` every `checkpoint_every` epochs and
    /// `<dir>/checkpoint.bin` at the end. A NaN aborts the run and, with an
    /// output directory, leaves the diagnostics in `<dir>/nan_diagnostics.txt`.
    pub fn train(&mut self, data: &[Sample], out: &TrainOutput) -> Result<(), HarnessError> {
        if data.is_empty() {
            return Err(HarnessError::EmptyDataset);
        }
        if let Some(dir) = &out.dir {
            fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        }
        let mut log = out.log_path().map(|p| open_log(&p)).transpose()?;
        let batch_size = self.config.optim.batch_size;
        while !self.finished() {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut self.rng);
            let lr = self.learning_rate();
            for chunk in order.chunks(batch_size) {
                if self.finished() {
                    break;
                }
                let samples: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
                let batch = Batch::from_samples(&samples)?;
                let entry = match self.step(&batch, lr) {
                    Ok(entry) => entry,
                    Err(e) => {
                        if let (HarnessError::NonFinite(diag), Some(dir)) = (&e, &out.dir) {
                            let _ = fs::write(dir.join("nan_diagnostics.txt"), diag);
                        }
                        return Err(e);
                    }
                };
                if let Some((path, file)) = log.as_mut() {
                    writeln!(file, "{}", entry.csv_row()).map_err(|e| HarnessError::io(path, e))?;
                }
                log::debug!("step {} loss {:.6}", entry.step, entry.report.total);
            }
            self.epoch += 1;
            let every = self.config.optim.checkpoint_every as u64;
            if let Some(dir) = &out.dir {
                if every > 0 && self.epoch.is_multiple_of(every) {
                    self.checkpoint()
                        .save(&dir.join(format!("checkpoint_epoch{}.bin", self.epoch)))?;
                }
            }
        }
        if let Some(path) = out.checkpoint_path() {
            self.checkpoint().save(&path)?;
        }
        Ok(())
    }

    /// Final probability maps `[H, W]` in evaluation mode, in sample order.
    pub fn predict(&self, samples: &[Sample]) -> Result<Vec<Tensor>, HarnessError> {
        let mut preds = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(self.config.optim.batch_size.max(1)) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let batch = Batch::from_samples(&refs)?;
            let s = Session::new(&self.store, false);
            let out = self.model.forward(&s, &batch, &self.config.ablation)?;
            let prob = out.final_prob();
            let (h, w) = (prob.shape()[2], prob.shape()[3]);
            for plane in prob.value().data().chunks(h * w) {
                preds.push(Tensor::from_vec(&[h, w], plane.to_vec()));
            }
        }
        Ok(preds)
    }
}

/// Opens a loss log for appending, writing the header if the file is new or empty.
fn open_log(path: &Path) -> Result<(PathBuf, fs::File), HarnessError> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| HarnessError::io(path, e))?;
    if fresh {
        writeln!(file, "{LOG_HEADER}").map_err(|e| HarnessError::io(path, e))?;
    }
    Ok((path.to_path_buf(), file))
}
