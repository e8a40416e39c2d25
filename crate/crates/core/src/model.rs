//! The patched decoder: patch tokenization, input residual block, sinusoidal
//! positions, a stack of pre-norm causal transformer layers, and an output
//! residual block that turns each token into an `output_patch_len` forecast.
//!
//! Activations are kept as `[rows × width]` matrices where each independent
//! sequence occupies a contiguous [`Segment`] of rows. A single window is one
//! segment; training batches concatenate many.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Segment, Tape, Tensor, TensorError, Var};

/// Number of date-derived feature columns per time point.
pub const DATE_FEATURES: usize = 5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("context of {len} points is shorter than the input patch length {patch_len}")]
    ContextTooShort { len: usize, patch_len: usize },
    #[error("{tokens} tokens exceed the model capacity of {max} positions")]
    Capacity { tokens: usize, max: usize },
    #[error("feature rows: expected {expected}, got {got}")]
    Features { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_patch_len: usize,
    pub output_patch_len: usize,
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Date-feature width per time point: 5 when enabled, 0 when disabled.
    pub feature_dim: usize,
    /// Always equal to `model_dim`.
    pub ffn_hidden: usize,
    pub residual_hidden: usize,
    pub max_positions: usize,
    #[serde(default)]
    pub dropout: f64,
}

impl ModelConfig {
    /// 16 heads, 20 layers, patches 32 in / 128 out, width 1280.
    pub fn full_scale() -> Self {
        Self {
            input_patch_len: 32,
            output_patch_len: 128,
            model_dim: 1280,
            num_layers: 20,
            num_heads: 16,
            feature_dim: DATE_FEATURES,
            ffn_hidden: 1280,
            residual_hidden: 1280,
            max_positions: 16,
            dropout: 0.0,
        }
    }

    pub fn desk_scale() -> Self {
        Self {
            input_patch_len: 4,
            output_patch_len: 8,
            model_dim: 32,
            num_layers: 2,
            num_heads: 2,
            feature_dim: DATE_FEATURES,
            ffn_hidden: 32,
            residual_hidden: 64,
            max_positions: 128,
            dropout: 0.0,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "full-scale" => Some(Self::full_scale()),
            "desk-scale" => Some(Self::desk_scale()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_patch_len", self.input_patch_len),
            ("output_patch_len", self.output_patch_len),
            ("model_dim", self.model_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("residual_hidden", self.residual_hidden),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(ModelError::Config(format!(
                "num_heads {} does not divide model_dim {}",
                self.num_heads, self.model_dim
            )));
        }
        if self.ffn_hidden != self.model_dim {
            return Err(ModelError::Config("ffn_hidden must equal model_dim".into()));
        }
        if self.feature_dim != 0 && self.feature_dim != DATE_FEATURES {
            return Err(ModelError::Config(format!(
                "feature_dim must be 0 or {DATE_FEATURES}, got {}",
                self.feature_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Width of one flattened patch: `p · (1 + r)`.
    pub fn patch_width(&self) -> usize {
        self.input_patch_len * (1 + self.feature_dim)
    }

    /// Longest context the model attends to, in time points.
    pub fn context_capacity(&self) -> usize {
        self.max_positions * self.input_patch_len
    }
}

/// One-hidden-layer MLP with a skip connection. `skip` is `None` when input
/// and output widths match and the skip is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
    pub skip: Option<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub attn_norm_gain: T,
    pub attn_norm_bias: T,
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub ffn_norm_gain: T,
    pub ffn_norm_bias: T,
    pub ffn_w1: T,
    pub ffn_b1: T,
    pub ffn_w2: T,
    pub ffn_b2: T,
}

/// All learnable parameters, generic over storage so the same layout holds
/// plain tensors or tape handles.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub input: ResidualBlock<T>,
    pub layers: Vec<LayerParams<T>>,
    pub output: ResidualBlock<T>,
}

pub type ModelWeights = Params<Tensor>;

impl<T> ResidualBlock<T> {
    fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> ResidualBlock<U> {
        ResidualBlock {
            w1: f(&format!("{prefix}.w1"), &self.w1),
            b1: f(&format!("{prefix}.b1"), &self.b1),
            w2: f(&format!("{prefix}.w2"), &self.w2),
            b2: f(&format!("{prefix}.b2"), &self.b2),
            skip: self.skip.as_ref().map(|s| f(&format!("{prefix}.skip"), s)),
        }
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        f(&format!("{prefix}.w1"), &mut self.w1);
        f(&format!("{prefix}.b1"), &mut self.b1);
        f(&format!("{prefix}.w2"), &mut self.w2);
        f(&format!("{prefix}.b2"), &mut self.b2);
        if let Some(s) = self.skip.as_mut() {
            f(&format!("{prefix}.skip"), s);
        }
    }
}

impl<T> LayerParams<T> {
    fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> LayerParams<U> {
        let mut g = |name: &str, v: &T| f(&format!("{prefix}.{name}"), v);
        LayerParams {
            attn_norm_gain: g("attn_norm.gain", &self.attn_norm_gain),
            attn_norm_bias: g("attn_norm.bias", &self.attn_norm_bias),
            wq: g("attn.wq", &self.wq),
            wk: g("attn.wk", &self.wk),
            wv: g("attn.wv", &self.wv),
            wo: g("attn.wo", &self.wo),
            ffn_norm_gain: g("ffn_norm.gain", &self.ffn_norm_gain),
            ffn_norm_bias: g("ffn_norm.bias", &self.ffn_norm_bias),
            ffn_w1: g("ffn.w1", &self.ffn_w1),
            ffn_b1: g("ffn.b1", &self.ffn_b1),
            ffn_w2: g("ffn.w2", &self.ffn_w2),
            ffn_b2: g("ffn.b2", &self.ffn_b2),
        }
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        let mut g = |name: &str, v: &mut T| f(&format!("{prefix}.{name}"), v);
        g("attn_norm.gain", &mut self.attn_norm_gain);
        g("attn_norm.bias", &mut self.attn_norm_bias);
        g("attn.wq", &mut self.wq);
        g("attn.wk", &mut self.wk);
        g("attn.wv", &mut self.wv);
        g("attn.wo", &mut self.wo);
        g("ffn_norm.gain", &mut self.ffn_norm_gain);
        g("ffn_norm.bias", &mut self.ffn_norm_bias);
        g("ffn.w1", &mut self.ffn_w1);
        g("ffn.b1", &mut self.ffn_b1);
        g("ffn.w2", &mut self.ffn_w2);
        g("ffn.b2", &mut self.ffn_b2);
    }
}

impl<T> Params<T> {
    /// Maps every parameter in canonical order, passing its dotted name.
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> Params<U> {
        Params {
            input: self.input.map("input", &mut f),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.map(&format!("layers.{i}"), &mut f))
                .collect(),
            output: self.output.map("output", &mut f),
        }
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut T)) {
        self.input.for_each_mut("input", &mut f);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.for_each_mut(&format!("layers.{i}"), &mut f);
        }
        self.output.for_each_mut("output", &mut f);
    }

    /// Mutable references in canonical order.
    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        collect_muts(self, &mut out);
        out
    }

    /// Parameters with their names, in canonical order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let names = self.map(|name, _| name.to_string());
        let mut name_refs = Vec::new();
        collect_refs(&names, &mut name_refs);
        let mut refs = Vec::new();
        collect_refs(self, &mut refs);
        name_refs.into_iter().cloned().zip(refs).collect()
    }
}

fn block_refs<'a, T>(b: &'a ResidualBlock<T>, out: &mut Vec<&'a T>) {
    out.extend([&b.w1, &b.b1, &b.w2, &b.b2]);
    if let Some(s) = &b.skip {
        out.push(s);
    }
}

fn block_muts<'a, T>(b: &'a mut ResidualBlock<T>, out: &mut Vec<&'a mut T>) {
    out.extend([&mut b.w1, &mut b.b1, &mut b.w2, &mut b.b2]);
    if let Some(s) = &mut b.skip {
        out.push(s);
    }
}

fn collect_muts<'a, T>(p: &'a mut Params<T>, out: &mut Vec<&'a mut T>) {
    block_muts(&mut p.input, out);
    for l in &mut p.layers {
        out.extend([
            &mut l.attn_norm_gain,
            &mut l.attn_norm_bias,
            &mut l.wq,
            &mut l.wk,
            &mut l.wv,
            &mut l.wo,
            &mut l.ffn_norm_gain,
            &mut l.ffn_norm_bias,
            &mut l.ffn_w1,
            &mut l.ffn_b1,
            &mut l.ffn_w2,
            &mut l.ffn_b2,
        ]);
    }
    block_muts(&mut p.output, out);
}

fn collect_refs<'a, T>(p: &'a Params<T>, out: &mut Vec<&'a T>) {
    block_refs(&p.input, out);
    for l in &p.layers {
        out.extend([
            &l.attn_norm_gain,
            &l.attn_norm_bias,
            &l.wq,
            &l.wk,
            &l.wv,
            &l.wo,
            &l.ffn_norm_gain,
            &l.ffn_norm_bias,
            &l.ffn_w1,
            &l.ffn_b1,
            &l.ffn_w2,
            &l.ffn_b2,
        ]);
    }
    block_refs(&p.output, out);
}

impl ModelWeights {
    /// Random initialization: uniform fan-in scaled weights, zero biases,
    /// unit norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = Self::zeros(config)?;
        Ok(shapes.map(|name, t| {
            let shape = t.shape().to_vec();
            if name.ends_with("gain") {
                Tensor::full(&shape, 1.0)
            } else if shape.len() == 1 {
                Tensor::zeros(&shape)
            } else {
                let bound = (3.0 / shape[0] as f64).sqrt();
                let n = shape[0] * shape[1];
                Tensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).expect("shape")
            }
        }))
    }

    /// All-zero parameters with the shapes `config` implies.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let block = |inp: usize, hid: usize, out: usize| ResidualBlock {
            w1: Tensor::zeros(&[inp, hid]),
            b1: Tensor::zeros(&[hid]),
            w2: Tensor::zeros(&[hid, out]),
            b2: Tensor::zeros(&[out]),
            skip: (inp != out).then(|| Tensor::zeros(&[inp, out])),
        };
        let layer = || LayerParams {
            attn_norm_gain: Tensor::zeros(&[d]),
            attn_norm_bias: Tensor::zeros(&[d]),
            wq: Tensor::zeros(&[d, d]),
            wk: Tensor::zeros(&[d, d]),
            wv: Tensor::zeros(&[d, d]),
            wo: Tensor::zeros(&[d, d]),
            ffn_norm_gain: Tensor::zeros(&[d]),
            ffn_norm_bias: Tensor::zeros(&[d]),
            ffn_w1: Tensor::zeros(&[d, config.ffn_hidden]),
            ffn_b1: Tensor::zeros(&[config.ffn_hidden]),
            ffn_w2: Tensor::zeros(&[config.ffn_hidden, d]),
            ffn_b2: Tensor::zeros(&[d]),
        };
        Ok(Params {
            input: block(config.patch_width(), config.residual_hidden, d),
            layers: (0..config.num_layers).map(|_| layer()).collect(),
            output: block(d, config.residual_hidden, config.output_patch_len),
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    /// Checks every tensor against the shapes `config` implies.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let expected = Self::zeros(config)?;
        let got = self.named();
        let want = expected.named();
        if got.len() != want.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter arrays, found {}",
                want.len(),
                got.len()
            )));
        }
        for ((name, g), (_, w)) in got.iter().zip(&want) {
            if g.shape() != w.shape() {
                return Err(ModelError::Config(format!(
                    "{name}: shape {:?}, expected {:?}",
                    g.shape(),
                    w.shape()
                )));
            }
        }
        Ok(())
    }

    /// Places every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Params<Var> {
        self.map(|_, t| tape.leaf(t.clone(), requires_grad))
    }
}

/// Sinusoidal encoding of zero-based `pos` at width `dim`.
pub fn positional_encoding(pos: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|c| {
            let pair = (c / 2 * 2) as f64;
            let angle = pos as f64 / 10000f64.powf(pair / dim as f64);
            if c % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// One input patch: `p` target values and the matching `p × r` feature rows,
/// flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub values: Vec<f64>,
    pub features: Vec<f64>,
}

impl Patch {
    /// Concatenated model input of width `p · (1 + r)`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.values.clone();
        v.extend_from_slice(&self.features);
        v
    }
}

/// Splits the most recent `p · floor(L/p)` points into non-overlapping
/// patches; the oldest `L mod p` points are dropped.
///
/// `features`, when given, has one row per value; each row's width becomes
/// the patch's feature width.
pub fn patchify<F: AsRef<[f64]>>(values: &[f64], features: Option<&[F]>, patch_len: usize) -> Result<Vec<Patch>> {
    let len = values.len();
    if patch_len == 0 || len < patch_len {
        return Err(ModelError::ContextTooShort { len, patch_len });
    }
    if let Some(f) = features {
        if f.len() != len {
            return Err(ModelError::Features {
                expected: len,
                got: f.len(),
            });
        }
    }
    let offset = len % patch_len;
    Ok((offset..len)
        .step_by(patch_len)
        .map(|start| Patch {
            values: values[start..start + patch_len].to_vec(),
            features: features
                .map(|f| f[start..start + patch_len].iter().flat_map(|r| r.as_ref().iter().copied()).collect())
                .unwrap_or_default(),
        })
        .collect())
}

/// Transformer input tokens, `[N × d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A batch of flattened patches ready for the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBatch {
    /// `[rows × p(1+r)]`
    pub inputs: Tensor,
    pub segments: Vec<Segment>,
}

impl PatchBatch {
    pub fn single(patches: &[Patch], config: &ModelConfig) -> Result<Self> {
        if patches.is_empty() {
            return Err(ModelError::ContextTooShort {
                len: 0,
                patch_len: config.input_patch_len,
            });
        }
        let width = config.patch_width();
        let mut data = Vec::with_capacity(patches.len() * width);
        for p in patches {
            let row = p.flatten();
            if row.len() != width {
                return Err(TensorError::Shape {
                    op: "input_tokens",
                    lhs: vec![width],
                    rhs: vec![row.len()],
                }
                .into());
            }
            data.extend(row);
        }
        Ok(Self {
            inputs: Tensor::matrix(patches.len(), width, data)?,
            segments: vec![Segment {
                start: 0,
                len: patches.len(),
            }],
        })
    }
}

/// Dropout masks are drawn from this source when a forward pass trains with
/// dropout.
pub type DropoutRng<'a> = Option<&'a mut ChaCha8Rng>;

fn residual_block_on_tape(tape: &mut Tape, block: &ResidualBlock<Var>, x: Var) -> Result<Var> {
    let h = tape.matmul(x, block.w1)?;
    let h = tape.add_row_bias(h, block.b1)?;
    let h = tape.relu(h)?;
    let y = tape.matmul(h, block.w2)?;
    let y = tape.add_row_bias(y, block.b2)?;
    let skip = match block.skip {
        Some(w) => tape.matmul(x, w)?,
        None => x,
    };
    Ok(tape.add(y, skip)?)
}

fn positions_for(segments: &[Segment], dim: usize) -> Tensor {
    let rows: usize = segments.iter().map(|s| s.len).sum();
    let mut data = Vec::with_capacity(rows * dim);
    for seg in segments {
        for pos in 0..seg.len {
            data.extend(positional_encoding(pos, dim));
        }
    }
    Tensor::matrix(rows, dim, data).expect("positional table shape")
}

fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: &mut DropoutRng) -> Result<Var> {
    let Some(rng) = rng.as_deref_mut() else {
        return Ok(x);
    };
    if rate == 0.0 {
        return Ok(x);
    }
    let shape = tape.value(x).shape().to_vec();
    let n = tape.value(x).len();
    let keep = 1.0 / (1.0 - rate);
    let mask = (0..n).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
    let m = tape.constant(Tensor::new(shape, mask)?);
    Ok(tape.mul(x, m)?)
}

/// Input residual block plus positional encoding, for every row.
pub fn embed_on_tape(tape: &mut Tape, params: &Params<Var>, config: &ModelConfig, batch: &PatchBatch) -> Result<Var> {
    for seg in &batch.segments {
        if seg.len > config.max_positions {
            return Err(ModelError::Capacity {
                tokens: seg.len,
                max: config.max_positions,
            });
        }
    }
    if batch.inputs.cols() != config.patch_width() {
        return Err(TensorError::Shape {
            op: "input_tokens",
            lhs: vec![config.patch_width()],
            rhs: vec![batch.inputs.cols()],
        }
        .into());
    }
    let x = tape.constant(batch.inputs.clone());
    let t = residual_block_on_tape(tape, &params.input, x)?;
    let pe = tape.constant(positions_for(&batch.segments, config.model_dim));
    Ok(tape.add(t, pe)?)
}

/// Runs the transformer stack over `tokens`.
pub fn transformer_on_tape(
    tape: &mut Tape,
    params: &Params<Var>,
    config: &ModelConfig,
    tokens: Var,
    segments: &[Segment],
    rng: &mut DropoutRng,
) -> Result<Var> {
    for seg in segments {
        if seg.len > config.max_positions {
            return Err(ModelError::Capacity {
                tokens: seg.len,
                max: config.max_positions,
            });
        }
    }
    let mut x = tokens;
    for layer in &params.layers {
        let n = tape.layer_norm(x, layer.attn_norm_gain, layer.attn_norm_bias)?;
        let q = tape.matmul(n, layer.wq)?;
        let k = tape.matmul(n, layer.wk)?;
        let v = tape.matmul(n, layer.wv)?;
        let a = tape.causal_attention(q, k, v, config.num_heads, segments)?;
        let a = tape.matmul(a, layer.wo)?;
        let a = dropout(tape, a, config.dropout, rng)?;
        x = tape.add(x, a)?;

        let n = tape.layer_norm(x, layer.ffn_norm_gain, layer.ffn_norm_bias)?;
        let f = tape.matmul(n, layer.ffn_w1)?;
        let f = tape.add_row_bias(f, layer.ffn_b1)?;
        let f = tape.relu(f)?;
        let f = tape.matmul(f, layer.ffn_w2)?;
        let f = tape.add_row_bias(f, layer.ffn_b2)?;
        let f = dropout(tape, f, config.dropout, rng)?;
        x = tape.add(x, f)?;
    }
    Ok(x)
}

/// Full forward pass: `[rows × h]` forecasts, row `j` of each segment being
/// the forecast for the `h` points after patch `j`.
pub fn forward_on_tape(
    tape: &mut Tape,
    params: &Params<Var>,
    config: &ModelConfig,
    batch: &PatchBatch,
    rng: &mut DropoutRng,
) -> Result<Var> {
    let tokens = embed_on_tape(tape, params, config, batch)?;
    let out = transformer_on_tape(tape, params, config, tokens, &batch.segments, rng)?;
    residual_block_on_tape(tape, &params.output, out)
}

/// Applies one residual block to a single vector.
pub fn residual_block(v: &[f64], block: &ResidualBlock<Tensor>) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let b = block.map("", &mut |_, t| tape.constant(t.clone()));
    let x = tape.constant(Tensor::matrix(1, v.len(), v.to_vec())?);
    let y = residual_block_on_tape(&mut tape, &b, x)?;
    Ok(tape.value(y).data().to_vec())
}

/// `t_j = InputResidualBlock(patch_j) + PE_j` for every patch.
pub fn input_tokens(patches: &[Patch], weights: &ModelWeights, config: &ModelConfig) -> Result<TokenSequence> {
    let batch = PatchBatch::single(patches, config)?;
    let mut tape = Tape::new();
    let params = weights.bind(&mut tape, false);
    let t = embed_on_tape(&mut tape, &params, config, &batch)?;
    Ok(TokenSequence {
        tokens: tape.value(t).clone(),
    })
}

/// Output tokens `o_1..o_N` of the causal stack.
pub fn stacked_transformer(tokens: &TokenSequence, weights: &ModelWeights, config: &ModelConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let params = weights.bind(&mut tape, false);
    let x = tape.constant(tokens.tokens.clone());
    let seg = [Segment {
        start: 0,
        len: tokens.len(),
    }];
    let o = transformer_on_tape(&mut tape, &params, config, x, &seg, &mut None)?;
    Ok(tape.value(o).clone())
}

/// Maps output tokens `[N × d]` to forecasts `[N × h]`.
pub fn output_forecasts(outputs: &Tensor, weights: &ModelWeights) -> Result<Tensor> {
    let mut tape = Tape::new();
    let block = weights.output.map("", &mut |_, t| tape.constant(t.clone()));
    let x = tape.constant(outputs.clone());
    let y = residual_block_on_tape(&mut tape, &block, x)?;
    Ok(tape.value(y).clone())
}

/// A configured model with its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchedDecoder {
    pub config: ModelConfig,
    pub weights: ModelWeights,
}

impl PatchedDecoder {
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        weights.check_shapes(&config)?;
        Ok(Self { config, weights })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let weights = ModelWeights::init(&config, seed)?;
        Ok(Self { config, weights })
    }

    /// Forecast rows for a context of values and (optionally) feature rows.
    ///
    /// Feature rows are ignored when the model has no feature input; when the
    /// model expects features and none are given, every feature is masked
    /// with -1.
    pub fn forecast_rows<F: AsRef<[f64]>>(&self, values: &[f64], features: Option<&[F]>) -> Result<Tensor> {
        let patches = match (self.config.feature_dim, features) {
            (0, _) => patchify::<F>(values, None, self.config.input_patch_len)?,
            (_, Some(f)) => patchify(values, Some(f), self.config.input_patch_len)?,
            (r, None) => {
                let masked = vec![vec![-1.0; r]; values.len()];
                patchify(values, Some(&masked), self.config.input_patch_len)?
            }
        };
        let batch = PatchBatch::single(&patches, &self.config)?;
        let mut tape = Tape::new();
        let params = self.weights.bind(&mut tape, false);
        let y = forward_on_tape(&mut tape, &params, &self.config, &batch, &mut None)?;
        Ok(tape.value(y).clone())
    }
}
