use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::{ModelConfig, ModelWeights};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moment accumulators, shaped like the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    /// Number of completed updates.
    pub step: u64,
    pub m: ModelWeights,
    pub v: ModelWeights,
}

impl AdamState {
    pub fn new(config: &ModelConfig) -> crate::model::Result<Self> {
        Ok(Self {
            step: 0,
            m: ModelWeights::zeros(config)?,
            v: ModelWeights::zeros(config)?,
        })
    }
}

/// Summary of one optimizer update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Factor applied to the gradient (1 when not clipped).
    pub clip_scale: f64,
}

/// One bias-corrected Adam update with optional global-norm clipping.
///
/// Gradients are checked before anything is modified, so a non-finite
/// gradient leaves weights and state untouched.
pub fn adam_step(
    weights: &mut ModelWeights,
    grads: &ModelWeights,
    state: &mut AdamState,
    lr: f64,
    clip_norm: Option<f64>,
) -> Result<StepReport, TrainError> {
    let named = grads.named();
    let mut sq = 0.0;
    for (name, g) in &named {
        if !g.is_finite() {
            return Err(TrainError::NonFiniteGradient(name.clone()));
        }
        sq += g.data().iter().map(|x| x * x).sum::<f64>();
    }
    let grad_norm = sq.sqrt();
    let clip_scale = match clip_norm {
        Some(c) if grad_norm > c => c / grad_norm,
        _ => 1.0,
    };
    let gs: Vec<&[f64]> = named.iter().map(|(_, g)| g.data()).collect();

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    let params = weights.values_mut().into_iter().zip(state.m.values_mut()).zip(state.v.values_mut());
    for (((w, m), v), g) in params.zip(gs) {
        let moments = m.data_mut().iter_mut().zip(v.data_mut().iter_mut());
        for ((w, &g), (m, v)) in w.data_mut().iter_mut().zip(g).zip(moments) {
            let g = g * clip_scale;
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
        }
    }
    Ok(StepReport { grad_norm, clip_scale })
}

/// Linear warmup over the first `warmup_fraction` of steps, then optional
/// cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub cosine: bool,
}

impl LrSchedule {
    pub fn new(base: f64, warmup_fraction: f64, total_steps: u64, cosine: bool) -> Self {
        Self {
            base,
            warmup_steps: (warmup_fraction * total_steps as f64).ceil() as u64,
            total_steps,
            cosine,
        }
    }

    /// Rate for the 0-based update index `step`.
    pub fn at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if !self.cosine || self.total_steps <= self.warmup_steps {
            return self.base;
        }
        let progress = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        0.5 * self.base * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn tiny() -> ModelConfig {
        ModelConfig {
            input_patch_len: 2,
            output_patch_len: 2,
            model_dim: 4,
            num_layers: 1,
            num_heads: 1,
            feature_dim: 0,
            ffn_hidden: 4,
            residual_hidden: 3,
            max_positions: 4,
            dropout: 0.0,
        }
    }

    fn filled(cfg: &ModelConfig, g: f64) -> ModelWeights {
        let mut w = ModelWeights::zeros(cfg).unwrap();
        w.for_each_mut(|_, t| t.data_mut().iter_mut().for_each(|x| *x = g));
        w
    }

    #[test]
    fn zero_gradient_leaves_weights() {
        let cfg = tiny();
        let mut w = ModelWeights::init(&cfg, 1).unwrap();
        let before = w.clone();
        let mut st = AdamState::new(&cfg).unwrap();
        st.m = filled(&cfg, 0.5);
        adam_step(&mut w, &filled(&cfg, 0.0), &mut st, 0.1, None).unwrap();
        // m is non-zero, so weights move by the decayed momentum; with zero
        // moments they must not move at all.
        assert_ne!(w, before);
        let mut w = before.clone();
        let mut st = AdamState::new(&cfg).unwrap();
        adam_step(&mut w, &filled(&cfg, 0.0), &mut st, 0.1, None).unwrap();
        assert_eq!(w, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = tiny();
        let mut w = ModelWeights::zeros(&cfg).unwrap();
        let mut st = AdamState::new(&cfg).unwrap();
        adam_step(&mut w, &filled(&cfg, 0.37), &mut st, 0.01, None).unwrap();
        for (_, t) in w.named() {
            for &x in t.data() {
                // |Δ| = lr · g / (|g| + ε)
                assert!((x + 0.01 * 0.37 / (0.37 + ADAM_EPS)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn clipping_scales_gradient() {
        let cfg = tiny();
        let mut w = ModelWeights::zeros(&cfg).unwrap();
        let n = w.num_parameters() as f64;
        // Every entry equal to 10/sqrt(n) gives a global norm of 10.
        let g = filled(&cfg, 10.0 / n.sqrt());
        let mut st = AdamState::new(&cfg).unwrap();
        let r = adam_step(&mut w, &g, &mut st, 0.01, Some(1.0)).unwrap();
        assert!((r.grad_norm - 10.0).abs() < 1e-9);
        assert!((r.clip_scale - 0.1).abs() < 1e-12);
        let (_, m) = &st.m.named()[0];
        assert!((m.data()[0] - 0.1 * (1.0 - BETA1) * 10.0 / n.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let cfg = tiny();
        let mut w = ModelWeights::init(&cfg, 0).unwrap();
        let before = w.clone();
        let mut g = filled(&cfg, 0.0);
        g.layers[0].wk = Tensor::full(&[4, 4], f64::NAN);
        let mut st = AdamState::new(&cfg).unwrap();
        match adam_step(&mut w, &g, &mut st, 0.1, Some(1.0)) {
            Err(TrainError::NonFiniteGradient(name)) => assert_eq!(name, "layers.0.attn.wk"),
            other => panic!("{other:?}"),
        }
        assert_eq!(w, before);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn schedule_shape() {
        let s = LrSchedule::new(1.0, 0.05, 100, true);
        assert_eq!(s.warmup_steps, 5);
        assert!((s.at(0) - 0.2).abs() < 1e-15);
        assert_eq!(s.at(4), 1.0);
        assert_eq!(s.at(5), 1.0);
        assert!((s.at(52) - 0.5 * (1.0 + (std::f64::consts::PI * 47.0 / 95.0).cos())).abs() < 1e-15);
        assert!(s.at(99) < 0.01);
        let flat = LrSchedule::new(0.3, 0.0, 10, false);
        assert_eq!(flat.at(7), 0.3);
    }
}
