use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use patchcast::data::{ingest_csv, synth_corpus, Granularity, IngestOptions, Partition, SynthSpec, TimeSeries};
use patchcast::model::ModelConfig;
use patchcast::training::TrainConfig;
use serde::{Deserialize, Serialize};

pub const OUTPUT_ENV: &str = "PATCHCAST_OUTPUT_DIR";

/// Model preset plus per-field overrides.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Option<String>,
    pub input_patch_len: Option<usize>,
    pub output_patch_len: Option<usize>,
    pub model_dim: Option<usize>,
    pub num_layers: Option<usize>,
    pub num_heads: Option<usize>,
    pub feature_dim: Option<usize>,
    pub ffn_hidden: Option<usize>,
    pub residual_hidden: Option<usize>,
    pub max_positions: Option<usize>,
    pub dropout: Option<f64>,
}

impl ModelSection {
    pub fn resolve(&self) -> Result<ModelConfig> {
        let name = self.preset.as_deref().unwrap_or("desk-scale");
        let mut c = ModelConfig::preset(name)
            .with_context(|| format!("unknown model preset {name:?} (expected desk-scale or full-scale)"))?;
        macro_rules! apply {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        apply!(
            input_patch_len,
            output_patch_len,
            model_dim,
            num_layers,
            num_heads,
            feature_dim,
            ffn_hidden,
            residual_hidden,
            max_positions,
            dropout
        );
        c.validate()?;
        Ok(c)
    }

    pub fn explicit(c: &ModelConfig) -> Self {
        Self {
            preset: None,
            input_patch_len: Some(c.input_patch_len),
            output_patch_len: Some(c.output_patch_len),
            model_dim: Some(c.model_dim),
            num_layers: Some(c.num_layers),
            num_heads: Some(c.num_heads),
            feature_dim: Some(c.feature_dim),
            ffn_hidden: Some(c.ffn_hidden),
            residual_hidden: Some(c.residual_hidden),
            max_positions: Some(c.max_positions),
            dropout: Some(c.dropout),
        }
    }
}

/// Where series come from: a CSV file or the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub name: String,
    pub csv: Option<PathBuf>,
    pub granularity: Option<Granularity>,
    #[serde(default)]
    pub log_transform: bool,
    pub synthetic: Option<SynthSpec>,
    #[serde(default)]
    pub seed: u64,
    /// Keep only synthetic series from this partition.
    pub partition: Option<Partition>,
}

impl DatasetSection {
    /// Relative CSV paths resolve against `base`, the config file's directory.
    pub fn load(&self, base: &Path) -> Result<Vec<TimeSeries>> {
        match (&self.csv, &self.synthetic) {
            (Some(path), None) => {
                let granularity = self
                    .granularity
                    .with_context(|| format!("dataset {}: csv input needs a granularity", self.name))?;
                let path = base.join(path);
                let report = ingest_csv(
                    &path,
                    IngestOptions {
                        granularity,
                        log_transform: self.log_transform,
                    },
                )
                .with_context(|| format!("reading {}", path.display()))?;
                for s in &report.skipped {
                    eprintln!("skipped series {}: {}", s.id, s.reason);
                }
                Ok(report.series)
            }
            (None, Some(spec)) => {
                let all = synth_corpus(spec, self.seed)?;
                let prefix = match self.partition {
                    Some(Partition::Pretrain) => "pretrain-",
                    Some(Partition::Holdout) => "holdout-",
                    None => "",
                };
                Ok(all.into_iter().filter(|s| s.id.starts_with(prefix)).collect())
            }
            _ => bail!("dataset {}: set exactly one of `csv` or `synthetic`", self.name),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    pub corpus: DatasetSection,
    /// Sampling weight per granularity; equal weights when omitted.
    pub mixture: Option<BTreeMap<Granularity, f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    pub output_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub dataset: DatasetSection,
    pub context: usize,
    pub horizon: usize,
    #[serde(default = "one")]
    pub stride: usize,
    /// Season length for the seasonal-naive baseline.
    pub season: Option<usize>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    pub output_dir: Option<PathBuf>,
    pub datasets: Vec<DatasetSection>,
    #[serde(default = "one")]
    pub stride: usize,
    pub context: Option<ContextSuite>,
    pub input_patch: Option<PatchSuite>,
    pub output_patch: Option<PatchSuite>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextSuite {
    pub checkpoint: PathBuf,
    #[serde(default = "sweep_contexts")]
    pub contexts: Vec<usize>,
    #[serde(default = "ninety_six")]
    pub horizon: usize,
}

fn sweep_contexts() -> Vec<usize> {
    patchcast::eval::SWEEP_CONTEXTS.to_vec()
}

fn ninety_six() -> usize {
    96
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSuite {
    pub checkpoints: Vec<PathBuf>,
    pub context: usize,
    pub horizon: usize,
}

pub fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
}

/// Directory containing `path`, for resolving relative paths inside it.
pub fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Output directory: command-line flag, then the environment override, then
/// the config file, then `runs/<command>`.
pub fn output_dir(flag: Option<&Path>, from_config: Option<&Path>, command: &str) -> PathBuf {
    if let Some(f) = flag {
        return f.to_path_buf();
    }
    if let Some(env) = std::env::var_os(OUTPUT_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(env);
    }
    from_config
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("runs").join(command))
}

pub fn write_snapshot<T: Serialize>(dir: &Path, value: &T) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let text = toml::to_string(value).context("serializing resolved config")?;
    std::fs::write(dir.join("resolved_config.toml"), text)?;
    Ok(())
}
