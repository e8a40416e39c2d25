//! Autoregressive forecasting for any context length and horizon.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::data::TimeSeries;
use crate::eval::{rolling_eval, EvalError, EvalReport, EvalTask, PointForecaster};
use crate::model::{ModelConfig, ModelError, PatchedDecoder, DATE_FEATURES};
use crate::training::{Normalization, ScaleRecord};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("context of {len} points is shorter than the input patch length {patch_len}")]
    ContextTooShort { len: usize, patch_len: usize },
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("expected {expected} feature rows (context + horizon), got {got}")]
    Features { expected: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, InferenceError>;

pub type FeatureRow = [f64; DATE_FEATURES];

#[derive(Debug, Clone, Copy)]
pub struct ForecastRequest<'a> {
    pub context: &'a [f64],
    /// Rows for the context followed by the horizon (`L + H` rows).
    pub features: Option<&'a [FeatureRow]>,
    pub horizon: usize,
}

impl<'a> ForecastRequest<'a> {
    pub fn new(context: &'a [f64], horizon: usize) -> Self {
        Self {
            context,
            features: None,
            horizon,
        }
    }

    pub fn with_features(mut self, features: &'a [FeatureRow]) -> Self {
        self.features = Some(features);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastResult {
    pub predictions: Vec<f64>,
    /// 0-based decoding round that produced each prediction.
    pub round: Vec<usize>,
    pub rounds: usize,
    pub scale: ScaleRecord,
    /// Predictions in the model's normalized units, before `scale` is
    /// inverted.
    pub normalized: Vec<f64>,
}

/// `ceil(horizon / output_patch_len)`.
pub fn autoregressive_rounds(horizon: usize, output_patch_len: usize) -> usize {
    horizon.div_ceil(output_patch_len)
}

/// Joins a normalized history and predictions before decoding continues.
pub type ConcatFn = fn(&[f64], &[f64]) -> Vec<f64>;

pub fn concat(history: &[f64], predictions: &[f64]) -> Vec<f64> {
    let mut v = history.to_vec();
    v.extend_from_slice(predictions);
    v
}

/// A model plus the normalization it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecaster {
    pub model: PatchedDecoder,
    pub normalization: Normalization,
}

impl Forecaster {
    pub fn new(model: PatchedDecoder, normalization: Normalization) -> Self {
        Self { model, normalization }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        Ok(Self {
            model: PatchedDecoder::new(ck.config, ck.weights)?,
            normalization: ck.normalization,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    fn check(&self, req: &ForecastRequest) -> Result<()> {
        let p = self.config().input_patch_len;
        if req.horizon == 0 {
            return Err(InferenceError::BadRequest("horizon must be at least 1".into()));
        }
        if req.context.len() < p {
            return Err(InferenceError::ContextTooShort {
                len: req.context.len(),
                patch_len: p,
            });
        }
        if let Some(f) = req.features {
            let expected = req.context.len() + req.horizon;
            if f.len() != expected {
                return Err(InferenceError::Features { expected, got: f.len() });
            }
        }
        if req.context.iter().any(|v| !v.is_finite()) {
            return Err(InferenceError::BadRequest("context contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn forecast(&self, req: &ForecastRequest) -> Result<ForecastResult> {
        self.check(req)?;
        let scale = self.normalization.record(req.context);
        let history = scale.apply_all(req.context);
        let (z, round) = self.decode(history, req.features, req.horizon)?;
        Ok(ForecastResult {
            predictions: scale.invert_all(&z),
            rounds: autoregressive_rounds(req.horizon, self.config().output_patch_len),
            round,
            scale,
            normalized: z,
        })
    }

    /// Decodes `horizon` normalized values after `history`. `features`, when
    /// given, must cover at least `history.len() + horizon` rows starting at
    /// the first history point.
    fn decode(
        &self,
        mut history: Vec<f64>,
        features: Option<&[FeatureRow]>,
        horizon: usize,
    ) -> Result<(Vec<f64>, Vec<usize>)> {
        let cfg = self.config();
        let (p, h) = (cfg.input_patch_len, cfg.output_patch_len);
        let start_len = history.len();
        let mut round = Vec::with_capacity(horizon);
        let mut k = 0;
        while history.len() - start_len < horizon {
            let len = history.len();
            let used = (len / p).min(cfg.max_positions) * p;
            let window = &history[len - used..];
            let rows = match features {
                Some(f) => self.model.forecast_rows(window, Some(&f[len - used..len]))?,
                None => self.model.forecast_rows::<FeatureRow>(window, None)?,
            };
            let last = rows.row(rows.rows() - 1).to_vec();
            let take = h.min(horizon - (len - start_len));
            round.extend(std::iter::repeat_n(k, take));
            history.extend_from_slice(&last[..take]);
            k += 1;
        }
        Ok((history.split_off(start_len), round))
    }

    /// Checks that a forecast of `horizon` starts with the forecast of `split`
    /// bit for bit, and that decoding resumed from `join(context, first split
    /// predictions)` with the original scale record reproduces the rest.
    pub fn consistency_probe(&self, req: &ForecastRequest, split: usize, join: ConcatFn) -> Result<bool> {
        let h = self.config().output_patch_len;
        if split == 0 || split > req.horizon || !split.is_multiple_of(h) {
            return Err(InferenceError::BadRequest(format!(
                "split point {split} must be a positive multiple of {h} no larger than the horizon"
            )));
        }
        self.check(req)?;
        let full = self.forecast(req)?;
        let prefix_features = req.features.map(|f| &f[..req.context.len() + split]);
        let prefix = self.forecast(&ForecastRequest {
            context: req.context,
            features: prefix_features,
            horizon: split,
        })?;
        let same = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        if !same(&full.predictions[..split], &prefix.predictions) {
            return Ok(false);
        }
        let scale = full.scale;
        let history = join(&scale.apply_all(req.context), &prefix.normalized);
        let rest = req.horizon - split;
        if rest == 0 {
            return Ok(true);
        }
        if let Some(f) = req.features {
            if history.len() + rest > f.len() {
                return Ok(false);
            }
        }
        let (z, _) = self.decode(history, req.features, rest)?;
        Ok(same(&scale.invert_all(&z), &full.predictions[split..]))
    }
}

impl PointForecaster for Forecaster {
    fn name(&self) -> String {
        "model".into()
    }

    fn predict(&self, context: &[f64], features: Option<&[FeatureRow]>, horizon: usize) -> std::result::Result<Vec<f64>, EvalError> {
        let req = ForecastRequest {
            context,
            features,
            horizon,
        };
        Ok(self.forecast(&req).map_err(|e| EvalError::Forecast(e.to_string()))?.predictions)
    }

    fn wants_features(&self) -> bool {
        self.config().feature_dim > 0
    }
}

/// Pooled metrics at each context length, horizon held fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextSweep {
    pub horizon: usize,
    pub contexts: Vec<usize>,
    pub reports: Vec<EvalReport>,
}

/// Rolling test-period evaluation of one forecaster at several context
/// lengths.
pub fn variable_context_sweep(
    forecaster: &dyn PointForecaster,
    series: &[TimeSeries],
    contexts: &[usize],
    horizon: usize,
    stride: usize,
) -> std::result::Result<ContextSweep, EvalError> {
    let reports = contexts
        .iter()
        .map(|&context| {
            rolling_eval(
                forecaster,
                series,
                &EvalTask {
                    dataset: "sweep".into(),
                    context,
                    horizon,
                    stride,
                },
            )
        })
        .collect::<std::result::Result<_, _>>()?;
    Ok(ContextSweep {
        horizon,
        contexts: contexts.to_vec(),
        reports,
    })
}
