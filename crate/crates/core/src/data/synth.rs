use chrono::{NaiveDate, NaiveDateTime};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, Granularity, Result, TimeSeries};

/// Pattern family of a generated series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Sum of one to three sinusoids.
    Sinusoid,
    /// Linear or piecewise-linear trend.
    Trend,
    /// A random pattern repeated with an integer period.
    SeasonalDummy,
    /// Sinusoid plus trend.
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Partition {
    Pretrain,
    Holdout,
}

impl Partition {
    fn name(self) -> &'static str {
        match self {
            Partition::Pretrain => "pretrain",
            Partition::Holdout => "holdout",
        }
    }
}

/// Allowed parameter values, each a union of closed intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamBand {
    /// Seasonal periods, in time steps.
    pub periods: Vec<[f64; 2]>,
    /// Trend slopes, in amplitude units per time step.
    pub slopes: Vec<[f64; 2]>,
}

impl ParamBand {
    fn validate(&self, name: &str) -> Result<()> {
        let check = |what: &str, v: &[[f64; 2]], min: f64| {
            if v.is_empty() {
                return Err(DataError::Config(format!("{name} band has no {what} intervals")));
            }
            for &[lo, hi] in v {
                if !(lo.is_finite() && hi.is_finite() && lo <= hi && lo >= min) {
                    return Err(DataError::Config(format!("{name} band has invalid {what} interval [{lo}, {hi}]")));
                }
            }
            Ok(())
        };
        check("period", &self.periods, 2.0)?;
        check("slope", &self.slopes, f64::NEG_INFINITY)
    }

    pub fn contains_period(&self, p: f64) -> bool {
        self.periods.iter().any(|&[lo, hi]| (lo..=hi).contains(&p))
    }

    pub fn contains_slope(&self, s: f64) -> bool {
        self.slopes.iter().any(|&[lo, hi]| (lo..=hi).contains(&s))
    }
}

fn overlaps(a: &[[f64; 2]], b: &[[f64; 2]]) -> bool {
    a.iter().any(|&[alo, ahi]| b.iter().any(|&[blo, bhi]| alo <= bhi && blo <= ahi))
}

/// Uniform draw from a union of intervals, weighting each by its width.
fn sample_band<R: Rng>(rng: &mut R, intervals: &[[f64; 2]]) -> f64 {
    let total: f64 = intervals.iter().map(|[lo, hi]| hi - lo).sum();
    if total <= 0.0 {
        return intervals[rng.gen_range(0..intervals.len())][0];
    }
    let mut u = rng.gen::<f64>() * total;
    for &[lo, hi] in intervals {
        let w = hi - lo;
        if u < w {
            return lo + u;
        }
        u -= w;
    }
    intervals[intervals.len() - 1][1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthGroup {
    pub granularity: Granularity,
    pub count: usize,
    /// Inclusive length range.
    pub length: [usize; 2],
    pub families: Vec<Family>,
    pub partition: Partition,
    /// Standard deviation of additive Gaussian noise, in amplitude units.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Additive level range.
    #[serde(default = "default_level")]
    pub level: [f64; 2],
    /// Multiplicative scale range.
    #[serde(default = "default_scale")]
    pub scale: [f64; 2],
}

fn default_noise() -> f64 {
    0.1
}

fn default_level() -> [f64; 2] {
    [10.0, 20.0]
}

fn default_scale() -> [f64; 2] {
    [1.0, 3.0]
}

/// Generator configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub groups: Vec<SynthGroup>,
    #[serde(default = "default_pretrain_band")]
    pub pretrain_band: ParamBand,
    #[serde(default = "default_holdout_band")]
    pub holdout_band: ParamBand,
    #[serde(default = "default_start")]
    pub start: NaiveDateTime,
}

fn default_start() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2000, 1, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid constant date")
}

fn default_pretrain_band() -> ParamBand {
    ParamBand {
        periods: vec![[5.0, 12.0], [20.0, 30.0]],
        slopes: vec![[-0.02, -0.006], [0.006, 0.02]],
    }
}

fn default_holdout_band() -> ParamBand {
    ParamBand {
        periods: vec![[14.0, 18.0]],
        slopes: vec![[-0.004, 0.004]],
    }
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            groups: Vec::new(),
            pretrain_band: default_pretrain_band(),
            holdout_band: default_holdout_band(),
            start: default_start(),
        }
    }
}

impl SynthSpec {
    pub fn with_group(mut self, group: SynthGroup) -> Self {
        self.groups.push(group);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.iter().all(|g| g.count == 0) {
            return Err(DataError::Config("synthetic spec has no series".into()));
        }
        self.pretrain_band.validate("pretrain")?;
        self.holdout_band.validate("holdout")?;
        if overlaps(&self.pretrain_band.periods, &self.holdout_band.periods) {
            return Err(DataError::Config("pretrain and holdout period bands overlap".into()));
        }
        if overlaps(&self.pretrain_band.slopes, &self.holdout_band.slopes) {
            return Err(DataError::Config("pretrain and holdout slope bands overlap".into()));
        }
        for (i, g) in self.groups.iter().enumerate() {
            let bad = |m: &str| Err(DataError::Config(format!("group {i}: {m}")));
            if g.count > 0 && g.families.is_empty() {
                return bad("no pattern families");
            }
            if g.length[0] < 10 || g.length[0] > g.length[1] {
                return bad("length range must satisfy 10 <= min <= max");
            }
            if !(g.noise.is_finite() && g.noise >= 0.0) {
                return bad("noise must be finite and non-negative");
            }
            if !(g.level[0] <= g.level[1] && g.scale[0] <= g.scale[1] && g.scale[0] > 0.0) {
                return bad("level/scale ranges must be ordered with positive scale");
            }
        }
        Ok(())
    }

    fn band(&self, p: Partition) -> &ParamBand {
        match p {
            Partition::Pretrain => &self.pretrain_band,
            Partition::Holdout => &self.holdout_band,
        }
    }
}

/// Deterministic synthetic corpus. Series `i` of group `g` draws from its own
/// ChaCha8 stream, so groups can be added without perturbing earlier ones.
pub fn synth_corpus(spec: &SynthSpec, seed: u64) -> Result<Vec<TimeSeries>> {
    spec.validate()?;
    let mut out = Vec::new();
    for (gi, group) in spec.groups.iter().enumerate() {
        let band = spec.band(group.partition);
        for i in 0..group.count {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(((gi as u64) << 32) | i as u64);
            let len = rng.gen_range(group.length[0]..=group.length[1]);
            let family = group.families[rng.gen_range(0..group.families.len())];
            let shape = generate_shape(&mut rng, family, band, len);
            let noise = Normal::new(0.0, group.noise.max(f64::MIN_POSITIVE)).expect("valid normal");
            let scale = sample_band(&mut rng, &[group.scale]);
            let level = sample_band(&mut rng, &[group.level]);
            let values = shape
                .into_iter()
                .map(|v| {
                    let eps = if group.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    level + scale * (v + eps)
                })
                .collect();
            let id = format!("{}-{}-{gi}-{i:04}", group.partition.name(), group.granularity);
            out.push(TimeSeries::new(id, group.granularity, spec.start, values)?);
        }
    }
    Ok(out)
}

fn sinusoids<R: Rng>(rng: &mut R, band: &ParamBand, len: usize) -> Vec<f64> {
    let k = rng.gen_range(1..=3);
    let mut out = vec![0.0; len];
    for c in 0..k {
        let period = sample_band(rng, &band.periods);
        let amp = if c == 0 { rng.gen_range(0.7..1.3) } else { rng.gen_range(0.1..0.5) };
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        for (t, v) in out.iter_mut().enumerate() {
            *v += amp * (std::f64::consts::TAU * t as f64 / period + phase).sin();
        }
    }
    out
}

fn trend<R: Rng>(rng: &mut R, band: &ParamBand, len: usize) -> Vec<f64> {
    let pieces = rng.gen_range(1..=3usize);
    let mut breaks: Vec<usize> = (1..pieces).map(|_| rng.gen_range(1..len)).collect();
    breaks.sort_unstable();
    let slopes: Vec<f64> = (0..pieces).map(|_| sample_band(rng, &band.slopes)).collect();
    let mut out = Vec::with_capacity(len);
    let mut v = 0.0;
    for t in 0..len {
        let piece = breaks.iter().take_while(|&&b| b <= t).count();
        out.push(v);
        v += slopes[piece];
    }
    // Centre so the level range alone sets the offset.
    let mean = out.iter().sum::<f64>() / len as f64;
    out.iter_mut().for_each(|x| *x -= mean);
    out
}

fn seasonal_dummy<R: Rng>(rng: &mut R, band: &ParamBand, len: usize) -> Vec<f64> {
    let period = (sample_band(rng, &band.periods).round() as usize).max(2);
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let pattern: Vec<f64> = (0..period).map(|_| normal.sample(rng)).collect();
    (0..len).map(|t| pattern[t % period]).collect()
}

fn generate_shape<R: Rng>(rng: &mut R, family: Family, band: &ParamBand, len: usize) -> Vec<f64> {
    match family {
        Family::Sinusoid => sinusoids(rng, band, len),
        Family::Trend => trend(rng, band, len),
        Family::SeasonalDummy => seasonal_dummy(rng, band, len),
        Family::Mixed => {
            let s = sinusoids(rng, band, len);
            let t = trend(rng, band, len);
            s.into_iter().zip(t).map(|(a, b)| a + b).collect()
        }
    }
}
