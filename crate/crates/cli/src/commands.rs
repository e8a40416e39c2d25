use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use patchcast::checkpoint::Checkpoint;
use patchcast::data::{
    derive_date_features, parse_timestamp, Corpus, Family, Granularity, Mixture, Partition, SynthGroup, SynthSpec,
};
use patchcast::eval::{
    context_table, input_patch_table, output_patch_table, rolling_eval, Dataset, EvalReport, EvalTask, PointForecaster,
    RepeatLast, SeasonalNaive, Table,
};
use patchcast::inference::{FeatureRow, ForecastRequest, Forecaster};
use patchcast::model::ModelConfig;
use patchcast::training::{TrainConfig, TrainError, Trainer};
use serde::{Deserialize, Serialize};

use crate::config::{
    base_dir, output_dir, read_config, write_snapshot, AblateConfig, DatasetSection, EvaluateConfig, ModelSection,
    PretrainConfig,
};

pub fn load_forecaster(path: &Path) -> Result<Forecaster> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(Forecaster::from_checkpoint(ck)?)
}

pub fn pretrain(config_path: &Path, out_flag: Option<&Path>) -> Result<()> {
    let mut cfg: PretrainConfig = read_config(config_path)?;
    let model = cfg.model.resolve()?;
    cfg.train.validate()?;
    let out = output_dir(out_flag, cfg.output_dir.as_deref(), "pretrain");
    let series = cfg.corpus.load(&base_dir(config_path))?;
    if series.is_empty() {
        bail!("corpus {} has no series", cfg.corpus.name);
    }
    let corpus = Corpus::new(series)?;
    let mixture = match &cfg.mixture {
        Some(w) => Mixture::new(w.clone())?,
        None => Mixture::uniform(&corpus)?,
    };

    cfg.model = ModelSection::explicit(&model);
    cfg.output_dir = Some(out.clone());
    cfg.mixture = Some(mixture.weights().clone());
    write_snapshot(&out, &cfg)?;
    serde_json::to_writer_pretty(std::fs::File::create(out.join("corpus_manifest.json"))?, &corpus.manifest())?;

    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    println!(
        "pretraining {} parameters on {} series for {} steps",
        trainer.weights.num_parameters(),
        corpus.len(),
        cfg.train.steps
    );
    let summary = match trainer.run(&corpus, &mixture, Some(&out)) {
        Ok(s) => s,
        Err(TrainError::Diverged {
            step,
            reason,
            last_checkpoint,
        }) => {
            let kept = last_checkpoint.map_or("none".to_string(), |p| p.display().to_string());
            bail!("training diverged at step {step}: {reason}; last good checkpoint: {kept}");
        }
        Err(e) => return Err(e.into()),
    };
    let final_path = summary.checkpoints.last().context("no checkpoint written")?;
    std::fs::copy(final_path, out.join("model.ptck"))?;
    let last = summary.curve.last().map(|r| r.train_loss).unwrap_or(f64::NAN);
    println!("final train loss {last:.6}");
    if let Some(v) = summary.final_val_loss {
        println!("final validation loss {v:.6}");
    }
    println!("wrote {}", out.join("model.ptck").display());
    Ok(())
}

#[derive(Debug, Deserialize)]
struct ForecastInput {
    id: String,
    context: Vec<f64>,
    start: Option<String>,
    granularity: Option<Granularity>,
    /// Overrides the command's horizon for this record.
    horizon: Option<usize>,
}

#[derive(Debug, Serialize)]
struct ForecastSnapshot<'a> {
    checkpoint: &'a Path,
    input: &'a Path,
    horizon: usize,
    output: &'a Path,
}

#[derive(Debug, Serialize)]
#[serde(untagged)]
enum ForecastOutput {
    Ok { id: String, predictions: Vec<f64> },
    Err { id: String, error: String },
}

fn forecast_one(f: &Forecaster, rec: &ForecastInput, horizon: usize) -> Result<Vec<f64>> {
    let horizon = rec.horizon.unwrap_or(horizon);
    if horizon == 0 {
        bail!("horizon must be at least 1");
    }
    let features: Option<Vec<FeatureRow>> = match (&rec.start, rec.granularity) {
        (Some(s), Some(g)) if f.config().feature_dim > 0 => {
            let start = parse_timestamp(s).with_context(|| format!("unparseable start {s:?}"))?;
            Some(derive_date_features(start, g, rec.context.len() + horizon)?.rows().to_vec())
        }
        _ => None,
    };
    let mut req = ForecastRequest::new(&rec.context, horizon);
    if let Some(rows) = &features {
        req = req.with_features(rows);
    }
    Ok(f.forecast(&req)?.predictions)
}

pub fn forecast(checkpoint: &Path, input: &Path, horizon: usize, output: Option<&Path>) -> Result<()> {
    if horizon == 0 {
        bail!("horizon must be at least 1");
    }
    let f = load_forecaster(checkpoint)?;
    let out_path = match output {
        Some(p) => p.to_path_buf(),
        None => output_dir(None, None, "forecast").join("forecasts.jsonl"),
    };
    let out_dir = out_path.parent().map(Path::to_path_buf).unwrap_or_default();
    write_snapshot(
        &out_dir,
        &ForecastSnapshot {
            checkpoint,
            input,
            horizon,
            output: &out_path,
        },
    )?;
    let reader = BufReader::new(std::fs::File::open(input).with_context(|| format!("opening {}", input.display()))?);
    let mut out = std::io::BufWriter::new(std::fs::File::create(&out_path)?);
    let (mut ok, mut failed) = (0, 0);
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = match serde_json::from_str::<ForecastInput>(&line) {
            Ok(rec) => match forecast_one(&f, &rec, horizon) {
                Ok(predictions) => ForecastOutput::Ok { id: rec.id, predictions },
                Err(e) => ForecastOutput::Err {
                    id: rec.id,
                    error: format!("{e:#}"),
                },
            },
            Err(e) => ForecastOutput::Err {
                id: format!("line {}", i + 1),
                error: e.to_string(),
            },
        };
        match record {
            ForecastOutput::Ok { .. } => ok += 1,
            ForecastOutput::Err { .. } => failed += 1,
        }
        serde_json::to_writer(&mut out, &record)?;
        writeln!(out)?;
    }
    out.flush()?;
    println!("{ok} forecast(s), {failed} error(s) -> {}", out_path.display());
    Ok(())
}

/// Command-line task flags; each overrides the matching config entry.
#[derive(Debug, Default)]
pub struct EvaluateFlags {
    pub checkpoint: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub granularity: Option<Granularity>,
    pub log_transform: bool,
    pub context: Option<usize>,
    pub horizon: Option<usize>,
    pub stride: Option<usize>,
    pub season: Option<usize>,
    pub output: Option<PathBuf>,
}

pub fn evaluate(flags: EvaluateFlags) -> Result<()> {
    let (mut cfg, base) = match &flags.config {
        Some(p) => (read_config::<EvaluateConfig>(p)?, base_dir(p)),
        None => {
            let data = flags.data.clone().context("pass --config or --data")?;
            let cfg = EvaluateConfig {
                output_dir: None,
                checkpoint: None,
                dataset: DatasetSection {
                    name: data.file_stem().map_or("data".into(), |s| s.to_string_lossy().into_owned()),
                    csv: Some(data),
                    granularity: flags.granularity,
                    log_transform: flags.log_transform,
                    synthetic: None,
                    seed: 0,
                    partition: None,
                },
                context: flags.context.context("--context is required without --config")?,
                horizon: flags.horizon.context("--horizon is required without --config")?,
                stride: 1,
                season: None,
            };
            (cfg, PathBuf::new())
        }
    };
    if flags.config.is_some() {
        if let Some(d) = &flags.data {
            cfg.dataset.csv = Some(std::env::current_dir()?.join(d));
            cfg.dataset.synthetic = None;
        }
        if flags.granularity.is_some() {
            cfg.dataset.granularity = flags.granularity;
        }
    }
    cfg.checkpoint = flags.checkpoint.clone().or(cfg.checkpoint);
    cfg.context = flags.context.unwrap_or(cfg.context);
    cfg.horizon = flags.horizon.unwrap_or(cfg.horizon);
    cfg.stride = flags.stride.unwrap_or(cfg.stride);
    cfg.season = flags.season.or(cfg.season);
    if cfg.horizon == 0 || cfg.context == 0 || cfg.stride == 0 {
        bail!("context, horizon and stride must be positive");
    }
    let ck_path = cfg.checkpoint.clone().context("no checkpoint given")?;
    let model = load_forecaster(&base.join(&ck_path))?;
    let series = cfg.dataset.load(&base)?;
    let out = output_dir(flags.output.as_deref(), cfg.output_dir.as_deref(), "evaluate");
    cfg.output_dir = Some(out.clone());
    write_snapshot(&out, &cfg)?;

    let task = EvalTask {
        dataset: cfg.dataset.name.clone(),
        context: cfg.context,
        horizon: cfg.horizon,
        stride: cfg.stride,
    };
    let mut entries: Vec<(String, Box<dyn PointForecaster>)> = vec![
        ("model".into(), Box::new(model)),
        ("repeat-last".into(), Box::new(RepeatLast)),
    ];
    if let Some(season) = cfg.season {
        entries.push(("seasonal-naive".into(), Box::new(SeasonalNaive { season })));
    }
    let mut reports: Vec<(String, EvalReport)> = Vec::new();
    for (stem, f) in &entries {
        let r = rolling_eval(f.as_ref(), &series, &task)?;
        r.save(&out, stem)?;
        reports.push((stem.clone(), r));
    }
    let model_nrmse = reports[0].1.pooled.nrmse;
    let table = Table {
        title: format!(
            "{}: context {}, horizon {}, {} windows",
            task.dataset, task.context, task.horizon, reports[0].1.pooled.windows
        ),
        header: ["Forecaster", "NRMSE", "WAPE", "model gain"].map(String::from).to_vec(),
        rows: reports
            .iter()
            .map(|(_, r)| {
                vec![
                    r.model.clone(),
                    format!("{:.4}", r.pooled.nrmse),
                    format!("{:.4}", r.pooled.wape),
                    format!("{:+.1}%", 100.0 * (1.0 - model_nrmse / r.pooled.nrmse)),
                ]
            })
            .collect(),
    };
    let text = table.render();
    std::fs::write(out.join("summary.txt"), &text)?;
    print!("{text}");
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    Context,
    InputPatch,
    OutputPatch,
    All,
}

fn emit(out: &Path, stem: &str, table: &Table) -> Result<()> {
    std::fs::write(out.join(format!("{stem}.txt")), table.render())?;
    std::fs::write(out.join(format!("{stem}.csv")), table.to_csv())?;
    print!("{}", table.render());
    println!();
    Ok(())
}

pub fn ablate(suite: Suite, config_path: &Path, out_flag: Option<&Path>) -> Result<()> {
    let mut cfg: AblateConfig = read_config(config_path)?;
    let base = base_dir(config_path);
    let datasets = cfg
        .datasets
        .iter()
        .map(|d| {
            Ok(Dataset {
                name: d.name.clone(),
                series: d.load(&base)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let out = output_dir(out_flag, cfg.output_dir.as_deref(), "ablate");
    cfg.output_dir = Some(out.clone());
    write_snapshot(&out, &cfg)?;
    let want = |s: Suite| suite == s || suite == Suite::All;

    if want(Suite::Context) {
        let c = cfg.context.as_ref().context("config has no [context] section")?;
        let f = load_forecaster(&base.join(&c.checkpoint))?;
        let (table, plot) = context_table(&f, &datasets, &c.contexts, c.horizon, cfg.stride)?;
        emit(&out, "context", &table)?;
        std::fs::write(out.join("context_plot.csv"), plot)?;
    }
    let models = |paths: &[PathBuf]| paths.iter().map(|p| load_forecaster(&base.join(p))).collect::<Result<Vec<_>>>();
    if want(Suite::InputPatch) {
        let s = cfg.input_patch.as_ref().context("config has no [input_patch] section")?;
        let fs = models(&s.checkpoints)?;
        let refs: Vec<(usize, &dyn PointForecaster)> =
            fs.iter().map(|f| (f.config().input_patch_len, f as &dyn PointForecaster)).collect();
        emit(&out, "input_patch", &input_patch_table(&refs, &datasets, s.context, s.horizon, cfg.stride)?)?;
    }
    if want(Suite::OutputPatch) {
        let s = cfg.output_patch.as_ref().context("config has no [output_patch] section")?;
        let fs = models(&s.checkpoints)?;
        let refs: Vec<(usize, &dyn PointForecaster)> =
            fs.iter().map(|f| (f.config().output_patch_len, f as &dyn PointForecaster)).collect();
        emit(&out, "output_patch", &output_patch_table(&refs, &datasets, s.context, s.horizon, cfg.stride)?)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum DefaultsSection {
    Pretrain,
    Model,
    Train,
}

/// A small pretraining setup over the synthetic generator.
pub fn default_pretrain() -> PretrainConfig {
    let group = |partition, count, families| SynthGroup {
        granularity: Granularity::Hourly,
        count,
        length: [256, 512],
        families,
        partition,
        noise: 0.1,
        level: [10.0, 20.0],
        scale: [1.0, 3.0],
    };
    PretrainConfig {
        output_dir: None,
        model: ModelSection::explicit(&ModelConfig::desk_scale()),
        train: TrainConfig::default(),
        corpus: DatasetSection {
            name: "synthetic".into(),
            csv: None,
            granularity: None,
            log_transform: false,
            synthetic: Some(
                SynthSpec::default()
                    .with_group(group(Partition::Pretrain, 200, vec![Family::Sinusoid, Family::Trend, Family::Mixed]))
                    .with_group(group(Partition::Holdout, 20, vec![Family::Mixed])),
            ),
            seed: 0,
            partition: Some(Partition::Pretrain),
        },
        mixture: None,
    }
}

pub fn defaults(section: DefaultsSection) -> Result<String> {
    Ok(match section {
        DefaultsSection::Pretrain => toml::to_string(&default_pretrain())?,
        DefaultsSection::Model => format!("[model]\n{}", toml::to_string(&ModelSection::explicit(&ModelConfig::desk_scale()))?),
        DefaultsSection::Train => format!("[train]\n{}", toml::to_string(&TrainConfig::default())?),
    })
}
