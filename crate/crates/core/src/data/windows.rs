use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, DataError, Granularity, Result};
use crate::model::{ModelConfig, DATE_FEATURES};

/// Patch geometry that determines window lengths and loss masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowShape {
    pub patch_len: usize,
    pub horizon: usize,
    pub max_positions: usize,
}

impl WindowShape {
    pub fn of(config: &ModelConfig) -> Self {
        Self {
            patch_len: config.input_patch_len,
            horizon: config.output_patch_len,
            max_positions: config.max_positions,
        }
    }

    /// Longest context for a granularity, capped by the positional capacity.
    pub fn max_context(&self, g: Granularity) -> usize {
        g.max_context().min(self.patch_len * self.max_positions)
    }

    /// Whether token `j` (0-based) has its full `h`-point target inside a
    /// window of `len` points.
    pub fn token_has_target(&self, j: usize, len: usize) -> bool {
        self.patch_len * (j + 1) + self.horizon <= len
    }
}

/// A contiguous slice of one series' train split.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingWindow {
    pub series_index: usize,
    pub series_id: String,
    pub granularity: Granularity,
    /// Offset of the first point within the series.
    pub start: usize,
    pub values: Vec<f64>,
    pub features: Vec<[f64; DATE_FEATURES]>,
    /// Number of input tokens, `min(floor(len/p), max_positions)`.
    pub num_tokens: usize,
    /// Per-token loss mask.
    pub mask: Vec<bool>,
}

impl TrainingWindow {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Target values of token `j`.
    pub fn target(&self, shape: &WindowShape, j: usize) -> Option<&[f64]> {
        let s = shape.patch_len * (j + 1);
        self.values.get(s..s + shape.horizon)
    }

    fn build(corpus: &Corpus, index: usize, start: usize, len: usize, shape: &WindowShape) -> Self {
        let s = &corpus.series()[index];
        let num_tokens = (len / shape.patch_len).min(shape.max_positions);
        Self {
            series_index: index,
            series_id: s.id.clone(),
            granularity: s.granularity,
            start,
            values: s.values[start..start + len].to_vec(),
            features: corpus.features(index).slice(start..start + len).to_vec(),
            num_tokens,
            mask: (0..num_tokens).map(|j| shape.token_has_target(j, len)).collect(),
        }
    }
}

/// Sampling weight per granularity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Mixture {
    weights: BTreeMap<Granularity, f64>,
}

impl Mixture {
    pub fn new(weights: BTreeMap<Granularity, f64>) -> Result<Self> {
        let m = Self { weights };
        m.validate()?;
        Ok(m)
    }

    /// Equal weight for every granularity present in the corpus.
    pub fn uniform(corpus: &Corpus) -> Result<Self> {
        let g = corpus.granularities();
        if g.is_empty() {
            return Err(DataError::Config("empty corpus".into()));
        }
        let w = 1.0 / g.len() as f64;
        Self::new(g.into_iter().map(|g| (g, w)).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.values().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(DataError::Config("mixture weights must be finite and non-negative".into()));
        }
        let total: f64 = self.weights.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(DataError::Config(format!("mixture weights sum to {total}, expected 1")));
        }
        Ok(())
    }

    pub fn weights(&self) -> &BTreeMap<Granularity, f64> {
        &self.weights
    }
}

/// Series indices of each granularity whose train split fits at least one
/// token with a full target.
fn eligible(corpus: &Corpus, shape: &WindowShape) -> BTreeMap<Granularity, Vec<usize>> {
    let mut out: BTreeMap<Granularity, Vec<usize>> = BTreeMap::new();
    for (i, s) in corpus.series().iter().enumerate() {
        if shape.token_has_target(0, corpus.split(i).train_end) {
            out.entry(s.granularity).or_default().push(i);
        }
    }
    out
}

/// Draws `batch_size` windows from the train splits.
///
/// A granularity is picked from the mixture, then a series uniformly among
/// that granularity's eligible series, then a window start uniformly within
/// the train split. The window length is `min(max_context + h, train_end)`.
pub fn sample_training_windows<R: Rng>(
    corpus: &Corpus,
    mixture: &Mixture,
    shape: &WindowShape,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<TrainingWindow>> {
    mixture.validate()?;
    let pools = eligible(corpus, shape);
    let mut choices = Vec::new();
    let mut weights = Vec::new();
    for (&g, &w) in mixture.weights() {
        if w <= 0.0 {
            continue;
        }
        match pools.get(&g) {
            Some(pool) => {
                choices.push(pool);
                weights.push(w);
            }
            None => {
                return Err(DataError::Config(format!(
                    "granularity {g} has mixture weight {w} but no series with a train split of at least {} points",
                    shape.patch_len + shape.horizon
                )))
            }
        }
    }
    let dist = WeightedIndex::new(&weights).map_err(|e| DataError::Config(format!("mixture: {e}")))?;
    Ok((0..batch_size)
        .map(|_| {
            let pool = choices[dist.sample(rng)];
            let index = pool[rng.gen_range(0..pool.len())];
            let g = corpus.series()[index].granularity;
            let train_end = corpus.split(index).train_end;
            let len = (shape.max_context(g) + shape.horizon).min(train_end);
            let start = rng.gen_range(0..=train_end - len);
            TrainingWindow::build(corpus, index, start, len, shape)
        })
        .collect())
}

/// One deterministic window per series ending at the validation boundary.
///
/// The length is trimmed so the final token's target ends exactly at the
/// boundary, and only tokens whose targets reach into the validation split
/// count towards the loss.
pub fn validation_windows(corpus: &Corpus, shape: &WindowShape) -> Vec<TrainingWindow> {
    let mut out = Vec::new();
    for (i, s) in corpus.series().iter().enumerate() {
        let split = corpus.split(i);
        let room = (shape.max_context(s.granularity) + shape.horizon).min(split.val_end);
        if room < shape.patch_len + shape.horizon {
            continue;
        }
        let len = (room - shape.horizon) / shape.patch_len * shape.patch_len + shape.horizon;
        let start = split.val_end - len;
        let mut w = TrainingWindow::build(corpus, i, start, len, shape);
        for (j, m) in w.mask.iter_mut().enumerate() {
            *m = *m && start + shape.patch_len * (j + 1) + shape.horizon > split.train_end;
        }
        if w.mask.iter().any(|&m| m) {
            out.push(w);
        }
    }
    out
}
