//! Masked patch-wise MSE training with Adam.

mod normalize;
mod optim;

pub use normalize::{denormalize, normalize_window, Normalization, ScaleRecord, STD_FLOOR};
pub use optim::{adam_step, AdamState, LrSchedule, StepReport, ADAM_EPS, BETA1, BETA2};

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::data::{sample_training_windows, validation_windows, Corpus, DataError, Mixture, TrainingWindow, WindowShape};
use crate::model::{forward_on_tape, ModelConfig, ModelError, ModelWeights, Params, PatchBatch};
use crate::tensor::{Segment, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training configuration: {0}")]
    Config(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("training diverged at step {step}: {reason}")]
    Diverged {
        step: u64,
        reason: String,
        last_checkpoint: Option<PathBuf>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Fraction of `steps` spent in linear warmup.
    pub warmup_fraction: f64,
    pub cosine_decay: bool,
    pub batch_size: usize,
    pub steps: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub normalization: Normalization,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Compute validation loss every this many steps; 0 only at the end.
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            warmup_fraction: 0.05,
            cosine_decay: true,
            batch_size: 16,
            steps: 2000,
            clip_norm: Some(1.0),
            seed: 0,
            normalization: Normalization::PerWindow,
            checkpoint_every: 0,
            eval_every: 100,
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is accepted so a run can be replayed with frozen
    /// weights.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1]");
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return bad("clip_norm must be positive");
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::new(self.learning_rate, self.warmup_fraction, self.steps, self.cosine_decay)
    }
}

/// Mean over active tokens of the per-token MSE between `[N × h]` forecasts
/// and targets.
pub fn train_loss(forecasts: &Tensor, targets: &Tensor, mask: &[bool]) -> Result<f64> {
    if forecasts.shape() != targets.shape() || forecasts.shape().len() != 2 || mask.len() != forecasts.rows() {
        return Err(TensorError::Shape {
            op: "train_loss",
            lhs: forecasts.shape().to_vec(),
            rhs: targets.shape().to_vec(),
        }
        .into());
    }
    let h = forecasts.cols();
    let active = mask.iter().filter(|&&m| m).count();
    if active == 0 {
        return Err(TrainError::DegenerateBatch("no token has a full target".into()));
    }
    let total: f64 = (0..forecasts.rows())
        .filter(|&j| mask[j])
        .map(|j| {
            let (f, t) = (forecasts.row(j), targets.row(j));
            f.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / h as f64
        })
        .sum();
    Ok(total / active as f64)
}

/// Model inputs, targets and loss mask for a set of windows.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledBatch {
    pub batch: PatchBatch,
    /// `[rows × h]`; rows without a full target are zero.
    pub targets: Tensor,
    pub mask: Vec<bool>,
    pub records: Vec<ScaleRecord>,
}

/// Normalizes each window by the statistics of its input span and lays the
/// windows out as consecutive segments.
pub fn assemble_batch(windows: &[TrainingWindow], config: &ModelConfig, mode: Normalization) -> Result<AssembledBatch> {
    if windows.is_empty() {
        return Err(TrainError::DegenerateBatch("no windows".into()));
    }
    let (p, h, r) = (config.input_patch_len, config.output_patch_len, config.feature_dim);
    let width = config.patch_width();
    let rows: usize = windows.iter().map(|w| w.num_tokens).sum();
    let mut inputs = Vec::with_capacity(rows * width);
    let mut targets = vec![0.0; rows * h];
    let mut mask = Vec::with_capacity(rows);
    let mut segments = Vec::with_capacity(windows.len());
    let mut records = Vec::with_capacity(windows.len());
    let mut row = 0;
    for w in windows {
        let n = w.num_tokens;
        if n == 0 || !w.mask.iter().any(|&m| m) {
            return Err(TrainError::DegenerateBatch(format!("window of {} has no usable token", w.series_id)));
        }
        let record = mode.record(&w.values[..n * p]);
        let z = record.apply_all(&w.values);
        for j in 0..n {
            inputs.extend_from_slice(&z[j * p..(j + 1) * p]);
            if r > 0 {
                for f in &w.features[j * p..(j + 1) * p] {
                    inputs.extend_from_slice(&f[..r]);
                }
            }
            if w.mask[j] {
                let start = p * (j + 1);
                targets[(row + j) * h..(row + j + 1) * h].copy_from_slice(&z[start..start + h]);
            }
        }
        mask.extend_from_slice(&w.mask);
        segments.push(Segment { start: row, len: n });
        records.push(record);
        row += n;
    }
    Ok(AssembledBatch {
        batch: PatchBatch {
            inputs: Tensor::matrix(rows, width, inputs)?,
            segments,
        },
        targets: Tensor::matrix(rows, h, targets)?,
        mask,
        records,
    })
}

fn collect_grads(tape: &Tape, params: &Params<Var>, weights: &ModelWeights) -> ModelWeights {
    let mut grads = weights.clone();
    for (slot, (_, &var)) in grads.values_mut().into_iter().zip(params.named()) {
        *slot = tape.grad(var).unwrap_or_else(|| Tensor::zeros(slot.shape()));
    }
    grads
}

/// Batch loss (mean of per-window losses) and its gradient.
pub fn loss_and_grad(
    weights: &ModelWeights,
    config: &ModelConfig,
    batch: &AssembledBatch,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<(f64, ModelWeights)> {
    let mut tape = Tape::new();
    let params = weights.bind(&mut tape, true);
    let pred = forward_on_tape(&mut tape, &params, config, &batch.batch, &mut { dropout })?;
    let loss = tape.window_mse(pred, &batch.targets, &batch.mask, &batch.batch.segments)?;
    tape.backward(loss)?;
    let value = tape.value(loss).data()[0];
    Ok((value, collect_grads(&tape, &params, weights)))
}

/// Batch loss without gradients.
pub fn batch_loss(weights: &ModelWeights, config: &ModelConfig, batch: &AssembledBatch) -> Result<f64> {
    let mut tape = Tape::new();
    let params = weights.bind(&mut tape, false);
    let pred = forward_on_tape(&mut tape, &params, config, &batch.batch, &mut None)?;
    let loss = tape.window_mse(pred, &batch.targets, &batch.mask, &batch.batch.segments)?;
    Ok(tape.value(loss).data()[0])
}

/// Mean per-window loss over `windows`, evaluated `chunk` windows at a time.
pub fn mean_window_loss(
    weights: &ModelWeights,
    config: &ModelConfig,
    windows: &[TrainingWindow],
    mode: Normalization,
    chunk: usize,
) -> Result<f64> {
    if windows.is_empty() {
        return Err(TrainError::DegenerateBatch("no windows".into()));
    }
    let mut total = 0.0;
    for part in windows.chunks(chunk.max(1)) {
        let batch = assemble_batch(part, config, mode)?;
        total += batch_loss(weights, config, &batch)? * part.len() as f64;
    }
    Ok(total / windows.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    /// 0-based update index; the loss is measured before that update.
    pub step: u64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

pub fn write_loss_csv(curve: &[LossRecord], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "step,train_loss,val_loss")?;
    for r in curve {
        match r.val_loss {
            Some(v) => writeln!(out, "{},{},{}", r.step, r.train_loss, v)?,
            None => writeln!(out, "{},{},", r.step, r.train_loss)?,
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub curve: Vec<LossRecord>,
    pub checkpoints: Vec<PathBuf>,
    /// Validation loss after the last update, when validation windows exist.
    pub final_val_loss: Option<f64>,
}

/// Training state: weights, optimizer moments and the loss curve so far.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub weights: ModelWeights,
    pub optimizer: AdamState,
    /// Completed updates.
    pub step: u64,
    pub curve: Vec<LossRecord>,
    /// Most recent checkpoint written by this trainer.
    pub last_checkpoint: Option<PathBuf>,
}

const BATCH_STREAM_KEY: u64 = 0x6261_7463_6800_0000;
const DROPOUT_STREAM_KEY: u64 = 0x6472_6f70_0000_0000;

impl Trainer {
    /// Fresh weights initialized from `train.seed`.
    pub fn new(model: ModelConfig, train: TrainConfig) -> Result<Self> {
        model.validate()?;
        train.validate()?;
        Ok(Self {
            weights: ModelWeights::init(&model, train.seed)?,
            optimizer: AdamState::new(&model)?,
            model,
            train,
            step: 0,
            curve: Vec::new(),
            last_checkpoint: None,
        })
    }

    /// Continues from a checkpoint that carries optimizer state. `train`
    /// overrides the stored training configuration.
    pub fn resume(ck: Checkpoint, train: Option<TrainConfig>) -> Result<Self> {
        let train = train
            .or(ck.train)
            .ok_or_else(|| TrainError::Config("checkpoint has no training configuration".into()))?;
        train.validate()?;
        let optimizer = ck
            .optimizer
            .ok_or_else(|| TrainError::Config("checkpoint has no optimizer state".into()))?;
        ck.weights.check_shapes(&ck.config)?;
        Ok(Self {
            model: ck.config,
            train,
            weights: ck.weights,
            optimizer,
            step: ck.step,
            curve: Vec::new(),
            last_checkpoint: None,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.clone(),
            weights: self.weights.clone(),
            normalization: self.train.normalization,
            step: self.step,
            train: Some(self.train.clone()),
            optimizer: Some(self.optimizer.clone()),
        }
    }

    /// The batch for update `step`; depends only on the seed and `step`.
    pub fn batch_for_step(&self, corpus: &Corpus, mixture: &Mixture, step: u64) -> Result<Vec<TrainingWindow>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.train.seed ^ BATCH_STREAM_KEY);
        rng.set_stream(step);
        Ok(sample_training_windows(
            corpus,
            mixture,
            &WindowShape::of(&self.model),
            self.train.batch_size,
            &mut rng,
        )?)
    }

    /// Runs one update and returns the pre-update batch loss. Weights are
    /// untouched when it fails.
    pub fn step_once(&mut self, corpus: &Corpus, mixture: &Mixture) -> Result<f64> {
        let windows = self.batch_for_step(corpus, mixture, self.step)?;
        let batch = assemble_batch(&windows, &self.model, self.train.normalization)?;
        let mut drop_rng = (self.model.dropout > 0.0).then(|| {
            let mut r = ChaCha8Rng::seed_from_u64(self.train.seed ^ DROPOUT_STREAM_KEY);
            r.set_stream(self.step);
            r
        });
        let (loss, grads) = loss_and_grad(&self.weights, &self.model, &batch, drop_rng.as_mut())?;
        if !loss.is_finite() {
            return Err(TrainError::DegenerateBatch(format!("loss {loss}")));
        }
        let lr = self.train.schedule().at(self.step);
        adam_step(&mut self.weights, &grads, &mut self.optimizer, lr, self.train.clip_norm)?;
        self.step += 1;
        Ok(loss)
    }

    pub fn run(&mut self, corpus: &Corpus, mixture: &Mixture, out_dir: Option<&Path>) -> Result<TrainSummary> {
        self.run_until(corpus, mixture, self.train.steps, out_dir)
    }

    /// Trains until `stop` updates have completed (at most `train.steps`).
    ///
    /// With `out_dir`, checkpoints go to `step-NNNNNN.ptck` at the configured
    /// cadence and at `stop`, and the loss curve to `losses.csv`. A failed
    /// step returns `Diverged` naming the last checkpoint written; the
    /// trainer keeps the weights from before the failure.
    pub fn run_until(
        &mut self,
        corpus: &Corpus,
        mixture: &Mixture,
        stop: u64,
        out_dir: Option<&Path>,
    ) -> Result<TrainSummary> {
        let stop = stop.min(self.train.steps);
        let val = validation_windows(corpus, &WindowShape::of(&self.model));
        let eval_chunk = self.train.batch_size.max(8);
        let mut checkpoints = Vec::new();
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)?;
        }

        while self.step < stop {
            let s = self.step;
            let want_val = !val.is_empty() && self.train.eval_every > 0 && s.is_multiple_of(self.train.eval_every);
            let val_loss = if want_val {
                Some(mean_window_loss(&self.weights, &self.model, &val, self.train.normalization, eval_chunk)?)
            } else {
                None
            };
            let train_loss = match self.step_once(corpus, mixture) {
                Ok(l) => l,
                Err(e @ (TrainError::NonFiniteGradient(_) | TrainError::DegenerateBatch(_) | TrainError::Tensor(_))) => {
                    log::error!("step {s}: {e}; keeping weights from step {}", self.step);
                    if let Some(dir) = out_dir {
                        write_loss_csv(&self.curve, std::fs::File::create(dir.join("losses.csv"))?)?;
                    }
                    return Err(TrainError::Diverged {
                        step: s,
                        reason: e.to_string(),
                        last_checkpoint: self.last_checkpoint.clone(),
                    });
                }
                Err(e) => return Err(e),
            };
            self.curve.push(LossRecord {
                step: s,
                train_loss,
                val_loss,
            });
            if s.is_multiple_of(100) {
                log::info!("step {s}: train {train_loss:.6}{}", val_loss.map(|v| format!(" val {v:.6}")).unwrap_or_default());
            }
            let cadence = self.train.checkpoint_every > 0 && self.step.is_multiple_of(self.train.checkpoint_every);
            if let Some(dir) = out_dir {
                if cadence || self.step == stop {
                    let path = dir.join(format!("step-{:06}.ptck", self.step));
                    self.checkpoint().save(&path)?;
                    checkpoints.push(path.clone());
                    self.last_checkpoint = Some(path);
                }
            }
        }

        let final_val_loss = if val.is_empty() {
            None
        } else {
            Some(mean_window_loss(&self.weights, &self.model, &val, self.train.normalization, eval_chunk)?)
        };
        if let Some(dir) = out_dir {
            write_loss_csv(&self.curve, std::fs::File::create(dir.join("losses.csv"))?)?;
        }
        Ok(TrainSummary {
            curve: self.curve.clone(),
            checkpoints,
            final_val_loss,
        })
    }
}
