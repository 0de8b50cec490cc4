//! Experiment configuration, the epoch loop, sweeps and metrics files.
//!
//! A run directory holds:
//! - `config.toml`: the validated configuration;
//! - `metrics.csv`: long form, columns `epoch,metric,value`, one row per
//!   epoch per metric (see [`metric`] for names; absent precisions are
//!   omitted);
//! - `summary.json`: [`RunSummary`];
//! - `params.json`: [`ParameterCounts`];
//! - `checkpoint.bin`: final weights (see [`GridModel::write_checkpoint`]);
//! - `checkpoints/epoch_NNNN.bin` when per-epoch checkpointing is enabled.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    generate_multilabel_with, generate_pixel_with, split, Dataset, MultiLabelParams, NoiseReport, NoiseSpec,
    PixelParams, SplitRatios, Splits,
};
use crate::error::{Error, FieldError, Result};
use crate::eval::{baseline_selectors, evaluate_retrieval, DetectionTrace, EpochAccumulator, Selector};
use crate::grid::{ablation_step, Adam, LambdaSpec, Mode, Optimizer, Sgd};
use crate::io::write_atomic;
use crate::model::{sample_eps, GridModel, ModelConfig, ParameterCounts, TaskSpec};

pub const SCHEMA_VERSION: u32 = 1;

/// Epochs averaged for the detection summary.
pub const TAIL_EPOCHS: usize = 10;

/// Metric names used in `metrics.csv`.
pub mod metric {
    pub const DISC_LOSS: &str = "disc_loss";
    pub const GEN_LOSS: &str = "gen_loss";
    pub const ROUTED_LOSS: &str = "routed_loss";
    pub const RECON_LOSS: &str = "recon_loss";
    pub const KL_LOSS: &str = "kl_loss";
    pub const VAL_NDCG: &str = "val_ndcg";
    pub const PRECISION_PREFIX: &str = "precision_";
    pub const BALANCED_ACCURACY_PREFIX: &str = "balanced_accuracy_";
}

/// splitmix64 of `base` advanced by `index + 1` steps.
pub fn sub_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

mod stream {
    pub const DATA: u64 = 0;
    pub const NOISE: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const MODEL: u64 = 3;
    pub const TRAIN: u64 = 4;
    pub const RANDOM_SELECTOR: u64 = 5;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    SceneMultilabel,
    Pixel,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::SceneMultilabel => "scene_multilabel",
            Scenario::Pixel => "pixel",
        }
    }

    pub fn default_lambda_percent(self) -> u32 {
        match self {
            Scenario::SceneMultilabel => 20,
            Scenario::Pixel => 10,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Scenario::SceneMultilabel, Scenario::Pixel]
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown scenario `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_samples: usize,
    pub n_classes: usize,
    /// Scene scenario only.
    pub feature_dim: usize,
    /// Scene scenario only.
    pub max_labels: usize,
    /// Scene scenario only.
    pub extra_label_prob: f64,
    pub feature_noise: f64,
    /// Pixel scenario only.
    pub height: usize,
    /// Pixel scenario only.
    pub width: usize,
    /// Pixel scenario only.
    pub channels: usize,
    /// Pixel scenario only.
    pub max_regions: usize,
    pub train_fraction: f64,
    pub validation_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            n_classes: 8,
            feature_dim: 32,
            max_labels: 3,
            extra_label_prob: 0.5,
            feature_noise: 0.5,
            height: 8,
            width: 8,
            channels: 3,
            max_regions: 3,
            train_fraction: 0.7,
            validation_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub latent_dim: usize,
    pub backbone_hidden: Vec<usize>,
    pub descriptor_dim: usize,
    pub encoder_hidden: usize,
    pub head_hidden: Vec<usize>,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            latent_dim: m.latent_dim,
            backbone_hidden: m.backbone_hidden,
            descriptor_dim: m.descriptor_dim,
            encoder_hidden: m.encoder_hidden,
            head_hidden: m.head_hidden,
        }
    }
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub scenario: Scenario,
    pub mode: Mode,
    /// Detected-noisy percentage per batch; defaults by scenario when unset.
    pub lambda_percent: Option<u32>,
    pub slnir: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// NDCG cutoff for validation retrieval.
    pub eval_k: usize,
    pub output_dir: Option<PathBuf>,
    pub checkpoint_every_epoch: bool,
    pub data: DataConfig,
    pub model: ModelSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            scenario: Scenario::SceneMultilabel,
            mode: Mode::Hybrid,
            lambda_percent: None,
            slnir: 0.3,
            epochs: 100,
            batch_size: 128,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            eval_k: 20,
            output_dir: None,
            checkpoint_every_epoch: false,
            data: DataConfig::default(),
            model: ModelSettings::default(),
        }
    }
}

fn field(errors: &mut Vec<FieldError>, ok: bool, name: &str, message: impl Into<String>) {
    if !ok {
        errors.push(FieldError {
            field: name.into(),
            message: message.into(),
        });
    }
}

impl ExperimentConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::format("config file", e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::format("config file", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn lambda(&self) -> LambdaSpec {
        LambdaSpec {
            percent: self.lambda_percent.unwrap_or(self.scenario.default_lambda_percent()),
        }
    }

    /// Checks every field and reports all failures at once.
    pub fn validate(&self) -> Result<()> {
        let mut e = Vec::new();
        let d = &self.data;
        let m = &self.model;
        field(&mut e, self.schema_version == SCHEMA_VERSION, "schema_version", format!("must be {SCHEMA_VERSION}"));
        field(&mut e, self.lambda().percent <= 100, "lambda_percent", "must be at most 100");
        field(
            &mut e,
            (0.0..=NoiseSpec::MAX_SLNIR + 1e-12).contains(&self.slnir),
            "slnir",
            format!("must lie in [0, {}]", NoiseSpec::MAX_SLNIR),
        );
        field(&mut e, self.epochs >= 1, "epochs", "must be at least 1");
        field(&mut e, self.batch_size >= 1, "batch_size", "must be at least 1");
        field(
            &mut e,
            self.learning_rate.is_finite() && self.learning_rate > 0.0,
            "learning_rate",
            "must be positive and finite",
        );
        field(&mut e, self.eval_k >= 1, "eval_k", "must be at least 1");
        field(&mut e, d.n_classes >= 2, "data.n_classes", "must be at least 2");
        field(
            &mut e,
            d.feature_noise.is_finite() && d.feature_noise >= 0.0,
            "data.feature_noise",
            "must be non-negative",
        );
        let fractions_ok = d.train_fraction > 0.0
            && d.validation_fraction > 0.0
            && d.train_fraction + d.validation_fraction < 1.0;
        field(&mut e, fractions_ok, "data.train_fraction", "train and validation fractions must be positive and sum below 1");
        if fractions_ok {
            let n = d.n_samples as f64;
            let tr = (d.train_fraction * n).round() as usize;
            let va = (d.validation_fraction * n).round() as usize;
            field(
                &mut e,
                tr >= 1 && va >= 1 && tr + va < d.n_samples,
                "data.n_samples",
                "too small for a non-empty train/validation/test split",
            );
        }
        match self.scenario {
            Scenario::SceneMultilabel => {
                field(&mut e, d.feature_dim >= 1, "data.feature_dim", "must be positive");
                field(&mut e, d.max_labels >= 1, "data.max_labels", "must be positive");
                field(
                    &mut e,
                    (0.0..=1.0).contains(&d.extra_label_prob),
                    "data.extra_label_prob",
                    "must lie in [0, 1]",
                );
            }
            Scenario::Pixel => {
                for (name, v) in [
                    ("data.height", d.height),
                    ("data.width", d.width),
                    ("data.channels", d.channels),
                    ("data.max_regions", d.max_regions),
                ] {
                    field(&mut e, v >= 1, name, "must be positive");
                }
            }
        }
        for (name, v) in [
            ("model.latent_dim", m.latent_dim),
            ("model.descriptor_dim", m.descriptor_dim),
            ("model.encoder_hidden", m.encoder_hidden),
        ] {
            field(&mut e, v >= 1, name, "must be positive");
        }
        field(&mut e, m.backbone_hidden.iter().all(|&h| h > 0), "model.backbone_hidden", "widths must be positive");
        field(&mut e, m.head_hidden.iter().all(|&h| h > 0), "model.head_hidden", "widths must be positive");
        if let Some(dir) = &self.output_dir {
            field(&mut e, !dir.as_os_str().is_empty(), "output_dir", "must not be empty");
        }
        if e.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(e))
        }
    }

    pub fn task(&self) -> TaskSpec {
        let d = &self.data;
        match self.scenario {
            Scenario::SceneMultilabel => TaskSpec::MultiLabel { classes: d.n_classes },
            Scenario::Pixel => TaskSpec::Pixel {
                height: d.height,
                width: d.width,
                classes: d.n_classes,
            },
        }
    }

    pub fn input_dim(&self) -> usize {
        let d = &self.data;
        match self.scenario {
            Scenario::SceneMultilabel => d.feature_dim,
            Scenario::Pixel => d.height * d.width * d.channels,
        }
    }

    /// The model this configuration trains; independent of generated data.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input_dim: self.input_dim(),
            backbone_hidden: self.model.backbone_hidden.clone(),
            descriptor_dim: self.model.descriptor_dim,
            encoder_hidden: self.model.encoder_hidden,
            latent_dim: self.model.latent_dim,
            head_hidden: self.model.head_hidden.clone(),
            task: self.task(),
        }
    }
}

/// Data for one run: noise is injected into the training split only.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub splits: Splits,
    pub noise: NoiseReport,
}

pub fn prepare_data(config: &ExperimentConfig) -> Result<PreparedData> {
    let d = &config.data;
    let data_seed = sub_seed(config.seed, stream::DATA);
    let full = match config.scenario {
        Scenario::SceneMultilabel => Dataset::MultiLabel(generate_multilabel_with(&MultiLabelParams {
            n_samples: d.n_samples,
            n_classes: d.n_classes,
            feature_dim: d.feature_dim,
            max_labels: d.max_labels,
            extra_label_prob: d.extra_label_prob,
            feature_noise: d.feature_noise,
            seed: data_seed,
        })?),
        Scenario::Pixel => Dataset::Pixel(generate_pixel_with(&PixelParams {
            n_samples: d.n_samples,
            n_classes: d.n_classes,
            height: d.height,
            width: d.width,
            channels: d.channels,
            max_regions: d.max_regions,
            feature_noise: d.feature_noise,
            seed: data_seed,
        })?),
    };
    let ratios = SplitRatios {
        train: d.train_fraction,
        validation: d.validation_fraction,
    };
    let mut splits = split(&full, ratios, sub_seed(config.seed, stream::SPLIT))?;
    let spec = NoiseSpec::new(config.slnir, sub_seed(config.seed, stream::NOISE))?;
    let (train, noise) = splits.train.inject_noise(&spec)?;
    splits.train = train;
    Ok(PreparedData { splits, noise })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSummary {
    pub total_assignments: usize,
    pub flips: usize,
    pub skipped: usize,
    /// Fraction of training samples with any altered label.
    pub noisy_sample_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub scenario: Scenario,
    pub mode: Mode,
    pub lambda_percent: u32,
    pub slnir: f64,
    pub seed: u64,
    pub epochs: usize,
    pub eval_k: usize,
    pub final_val_ndcg: f64,
    pub final_disc_loss: f64,
    pub final_gen_loss: f64,
    pub final_routed_loss: f64,
    /// Mean precision per selector over the last [`TAIL_EPOCHS`] epochs.
    pub detection_tail_precision: BTreeMap<Selector, Option<f64>>,
    pub noise: NoiseSummary,
    pub parameters: ParameterCounts,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<MetricRecord>,
    pub trace: DetectionTrace,
    pub summary: RunSummary,
    pub model: GridModel,
}

fn optimizer(config: &ExperimentConfig) -> Box<dyn Optimizer> {
    match config.optimizer {
        OptimizerKind::Adam => Box::new(Adam::new(config.learning_rate)),
        OptimizerKind::Sgd => Box::new(Sgd {
            lr: config.learning_rate,
        }),
    }
}

/// Runs training in memory; `on_epoch` sees the model after each epoch.
pub fn train_with(
    config: &ExperimentConfig,
    on_epoch: &mut dyn FnMut(usize, &GridModel) -> Result<()>,
) -> Result<RunOutput> {
    config.validate()?;
    let data = prepare_data(config)?;
    let train = &data.splits.train;
    let mut model = GridModel::new(
        config.model_config(),
        &mut ChaCha8Rng::seed_from_u64(sub_seed(config.seed, stream::MODEL)),
    )?;
    let mut opt = optimizer(config);
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, stream::TRAIN));
    let mut selector_rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, stream::RANDOM_SELECTOR));
    let lambda = config.lambda();
    let flags = train.noise_flags().to_vec();
    let latent = config.model.latent_dim;

    let mut records = Vec::new();
    let mut trace = DetectionTrace::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut last = None;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut acc = EpochAccumulator::default();
        for chunk in order.chunks(config.batch_size) {
            let batch = train.batch(chunk)?;
            let eps = sample_eps(&mut rng, chunk.len(), latent);
            let out = ablation_step(&mut model, &batch, config.mode, lambda, &eps, opt.as_mut())?;
            let batch_flags: Vec<bool> = chunk.iter().map(|&i| flags[i]).collect();
            acc.add_batch(&out.report, &out.partition);
            acc.add_detection(Selector::Grid, &out.partition, &batch_flags);
            for (s, p) in baseline_selectors(&out.report, out.partition.lambda, &mut selector_rng)? {
                acc.add_detection(s, &p, &batch_flags);
            }
        }
        let losses = acc.losses();
        let ndcg = evaluate_retrieval(&model, &data.splits.validation, &data.splits.test, config.eval_k)?;
        let mut push = |metric: &str, value: f64| {
            records.push(MetricRecord {
                epoch,
                metric: metric.to_string(),
                value,
            })
        };
        push(metric::DISC_LOSS, losses.disc);
        push(metric::GEN_LOSS, losses.gen);
        push(metric::ROUTED_LOSS, losses.routed);
        push(metric::RECON_LOSS, losses.recon);
        push(metric::KL_LOSS, losses.kl);
        push(metric::VAL_NDCG, ndcg);
        for s in Selector::ALL {
            let c = acc.confusion(s);
            let p = c.precision();
            let ba = c.balanced_accuracy();
            if let Some(v) = p {
                push(&format!("{}{}", metric::PRECISION_PREFIX, s.name()), v);
            }
            if let Some(v) = ba {
                push(&format!("{}{}", metric::BALANCED_ACCURACY_PREFIX, s.name()), v);
            }
            trace.precision.entry(s).or_default().push(p);
            trace.balanced_accuracy.entry(s).or_default().push(ba);
        }
        on_epoch(epoch, &model)?;
        last = Some((losses, ndcg));
    }
    let (losses, ndcg) = last.expect("at least one epoch");
    let flagged = flags.iter().filter(|f| **f).count();
    let summary = RunSummary {
        schema_version: SCHEMA_VERSION,
        scenario: config.scenario,
        mode: config.mode,
        lambda_percent: lambda.percent,
        slnir: config.slnir,
        seed: config.seed,
        epochs: config.epochs,
        eval_k: config.eval_k,
        final_val_ndcg: ndcg,
        final_disc_loss: losses.disc,
        final_gen_loss: losses.gen,
        final_routed_loss: losses.routed,
        detection_tail_precision: Selector::ALL.iter().map(|&s| (s, trace.tail_mean(s, TAIL_EPOCHS))).collect(),
        noise: NoiseSummary {
            total_assignments: data.noise.total_assignments,
            flips: data.noise.flips.len(),
            skipped: data.noise.skipped,
            noisy_sample_fraction: flagged as f64 / flags.len() as f64,
        },
        parameters: model.count_parameters(),
    };
    Ok(RunOutput {
        records,
        trace,
        summary,
        model,
    })
}

pub fn train(config: &ExperimentConfig) -> Result<RunOutput> {
    train_with(config, &mut |_, _| Ok(()))
}

pub fn metrics_csv(records: &[MetricRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn output_dir(config: &ExperimentConfig) -> Result<&Path> {
    config.output_dir.as_deref().ok_or_else(|| {
        Error::Config(vec![FieldError {
            field: "output_dir".into(),
            message: "required to write run outputs".into(),
        }])
    })
}

/// Trains and writes the run directory described in the module docs.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutput> {
    config.validate()?;
    let dir = output_dir(config)?.to_path_buf();
    let every = config.checkpoint_every_epoch;
    let out = train_with(config, &mut |epoch, model| {
        if every {
            model.save(&dir.join("checkpoints").join(format!("epoch_{epoch:04}.bin")))?;
        }
        Ok(())
    })?;
    write_atomic(&dir.join("config.toml"), config.to_toml()?.as_bytes())?;
    write_atomic(&dir.join("metrics.csv"), &metrics_csv(&out.records)?)?;
    write_atomic(&dir.join("summary.json"), serde_json::to_string_pretty(&out.summary)?.as_bytes())?;
    write_atomic(
        &dir.join("params.json"),
        serde_json::to_string_pretty(&out.summary.parameters)?.as_bytes(),
    )?;
    out.model.save(&dir.join("checkpoint.bin"))?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Lambda,
    Slnir,
    Mode,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Lambda => "lambda",
            SweepAxis::Slnir => "slnir",
            SweepAxis::Mode => "mode",
        }
    }

    /// The full axis range studied by default.
    pub fn default_values(self) -> Vec<String> {
        match self {
            SweepAxis::Lambda => (0..=90).step_by(10).map(|k| k.to_string()).collect(),
            SweepAxis::Slnir => (1..=6).map(|k| format!("0.{k}")).collect(),
            SweepAxis::Mode => Mode::ALL.iter().map(|m| m.name().to_string()).collect(),
        }
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let mut c = base.clone();
        let bad = |e: String| {
            Error::Config(vec![FieldError {
                field: self.name().into(),
                message: format!("value `{value}`: {e}"),
            }])
        };
        match self {
            SweepAxis::Lambda => c.lambda_percent = Some(value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?),
            SweepAxis::Slnir => c.slnir = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
            SweepAxis::Mode => c.mode = value.parse().map_err(|e: Error| bad(e.to_string()))?,
        }
        Ok(c)
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [SweepAxis::Lambda, SweepAxis::Slnir, SweepAxis::Mode]
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown sweep axis `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub axis: SweepAxis,
    pub value: String,
    pub replicate: usize,
    pub seed: u64,
    pub final_val_ndcg: f64,
    pub grid_precision: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    /// `(value, mean, sample std, n)` of the final NDCG per axis value, in axis order.
    pub fn ndcg_by_value(&self) -> Vec<(String, f64, f64, usize)> {
        let mut values: Vec<&str> = Vec::new();
        for c in &self.cells {
            if !values.contains(&c.value.as_str()) {
                values.push(&c.value);
            }
        }
        values
            .into_iter()
            .map(|v| {
                let xs: Vec<f64> = self.cells.iter().filter(|c| c.value == v).map(|c| c.final_val_ndcg).collect();
                let n = xs.len();
                let mean = xs.iter().sum::<f64>() / n as f64;
                let var = if n > 1 {
                    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
                } else {
                    0.0
                };
                (v.to_string(), mean, var.sqrt(), n)
            })
            .collect()
    }

    pub fn cells_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["axis", "value", "replicate", "seed", "final_val_ndcg", "grid_precision"])?;
        for c in &self.cells {
            w.write_record([
                self.axis.name().to_string(),
                c.value.clone(),
                c.replicate.to_string(),
                c.seed.to_string(),
                c.final_val_ndcg.to_string(),
                c.grid_precision.map(|p| p.to_string()).unwrap_or_default(),
            ])?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn summary_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([self.axis.name(), "mean_ndcg", "std_ndcg", "replicates"])?;
        for (v, m, s, n) in self.ndcg_by_value() {
            w.write_record([v, m.to_string(), s.to_string(), n.to_string()])?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}

/// One run per `(value, replicate)`. Replicate `r` uses seed
/// `sub_seed(base.seed, r)` for every value, so cells are paired across the
/// axis. With an output directory, each cell writes a run directory
/// `<axis>_<value>/rep_<r>` and the table goes to `sweep.csv` and
/// `sweep_summary.csv`.
pub fn run_sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[String], replicates: usize) -> Result<SweepTable> {
    if values.is_empty() || replicates == 0 {
        return Err(Error::invalid("a sweep needs at least one value and one replicate"));
    }
    let mut jobs = Vec::new();
    for v in values {
        for r in 0..replicates {
            let mut c = axis.apply(base, v)?;
            c.seed = sub_seed(base.seed, r as u64);
            c.output_dir = base
                .output_dir
                .as_ref()
                .map(|d| d.join(format!("{}_{v}", axis.name())).join(format!("rep_{r}")));
            c.validate()?;
            jobs.push((v.clone(), r, c));
        }
    }
    let cells = jobs
        .par_iter()
        .map(|(v, r, c)| {
            let out = if c.output_dir.is_some() { run_experiment(c)? } else { train(c)? };
            Ok(SweepCell {
                axis,
                value: v.clone(),
                replicate: *r,
                seed: c.seed,
                final_val_ndcg: out.summary.final_val_ndcg,
                grid_precision: out.summary.detection_tail_precision[&Selector::Grid],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let table = SweepTable { axis, cells };
    if let Some(dir) = &base.output_dir {
        write_atomic(&dir.join("sweep.csv"), &table.cells_csv()?)?;
        write_atomic(&dir.join("sweep_summary.csv"), &table.summary_csv()?)?;
    }
    Ok(table)
}

fn find_runs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if dir.join("metrics.csv").is_file() {
        out.push(dir.to_path_buf());
    }
    let mut children: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    children.sort();
    for c in children {
        find_runs(&c, out)?;
    }
    Ok(())
}

/// Writes tidy per-figure files for every run directory under `metrics_dir`:
/// `<run>/detection_<selector>.csv` (`epoch,selector,precision`),
/// `<run>/loss_curves.csv` (`epoch,curve,value`) and `<run>/ndcg.csv`
/// (`epoch,ndcg`). `<run>` is the run's path relative to `metrics_dir` with
/// separators replaced by `__` (`run` for `metrics_dir` itself).
pub fn emit_plot_data(metrics_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if !metrics_dir.is_dir() {
        return Err(Error::MissingMetrics(metrics_dir.to_path_buf()));
    }
    let mut runs = Vec::new();
    find_runs(metrics_dir, &mut runs)?;
    if runs.is_empty() {
        return Err(Error::MissingMetrics(metrics_dir.to_path_buf()));
    }
    let mut written = Vec::new();
    for run in runs {
        let rel = run.strip_prefix(metrics_dir).unwrap_or(&run);
        let label = if rel.as_os_str().is_empty() {
            "run".to_string()
        } else {
            rel.components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join("__")
        };
        let records = read_metrics(&run.join("metrics.csv"))?;
        let target = out_dir.join(label);

        for s in Selector::ALL {
            let name = format!("{}{}", metric::PRECISION_PREFIX, s.name());
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["epoch", "selector", "precision"])?;
            for r in records.iter().filter(|r| r.metric == name) {
                w.write_record([r.epoch.to_string(), s.name().to_string(), r.value.to_string()])?;
            }
            let path = target.join(format!("detection_{}.csv", s.name()));
            write_atomic(&path, &w.into_inner().map_err(|e| Error::Io(e.into_error()))?)?;
            written.push(path);
        }

        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "curve", "value"])?;
        for r in records
            .iter()
            .filter(|r| [metric::DISC_LOSS, metric::GEN_LOSS, metric::ROUTED_LOSS].contains(&r.metric.as_str()))
        {
            w.write_record([r.epoch.to_string(), r.metric.clone(), r.value.to_string()])?;
        }
        let path = target.join("loss_curves.csv");
        write_atomic(&path, &w.into_inner().map_err(|e| Error::Io(e.into_error()))?)?;
        written.push(path);

        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "ndcg"])?;
        for r in records.iter().filter(|r| r.metric == metric::VAL_NDCG) {
            w.write_record([r.epoch.to_string(), r.value.to_string()])?;
        }
        let path = target.join("ndcg.csv");
        write_atomic(&path, &w.into_inner().map_err(|e| Error::Io(e.into_error()))?)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn quick() -> ExperimentConfig {
        ExperimentConfig {
            epochs: 2,
            batch_size: 16,
            seed: 3,
            data: DataConfig {
                n_samples: 120,
                n_classes: 4,
                feature_dim: 6,
                ..DataConfig::default()
            },
            model: ModelSettings {
                latent_dim: 4,
                backbone_hidden: vec![8],
                descriptor_dim: 6,
                encoder_hidden: 6,
                head_hidden: vec![],
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn defaults() {
        let c = ExperimentConfig::default();
        assert_eq!((c.epochs, c.batch_size, c.learning_rate, c.model.latent_dim), (100, 128, 1e-3, 128));
        assert_eq!(c.lambda().percent, 20);
        let p = ExperimentConfig {
            scenario: Scenario::Pixel,
            ..c
        };
        assert_eq!(p.lambda().percent, 10);
    }

    #[test]
    fn toml_round_trip() {
        let mut c = quick();
        c.lambda_percent = Some(30);
        c.output_dir = Some("runs/a".into());
        c.slnir = 0.1 + 0.2;
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
        let partial = ExperimentConfig::from_toml("epochs = 5\n[data]\nn_samples = 50\n").unwrap();
        assert_eq!((partial.epochs, partial.data.n_samples, partial.batch_size), (5, 50, 128));
    }

    #[test]
    fn validation_collects_every_field() {
        let c = ExperimentConfig {
            epochs: 0,
            slnir: 0.9,
            learning_rate: -1.0,
            lambda_percent: Some(120),
            ..ExperimentConfig::default()
        };
        let Err(Error::Config(fields)) = c.validate() else { panic!() };
        let names: Vec<&str> = fields.iter().map(|f| f.field.as_str()).collect();
        for n in ["epochs", "slnir", "learning_rate", "lambda_percent"] {
            assert!(names.contains(&n), "{names:?}");
        }
    }

    #[test]
    fn invalid_config_writes_nothing() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("out");
        let c = ExperimentConfig {
            epochs: 0,
            output_dir: Some(dir.clone()),
            ..quick()
        };
        assert!(run_experiment(&c).is_err());
        assert!(!dir.exists());
    }

    #[test]
    fn sub_seeds_are_pure_and_distinct() {
        assert_eq!(sub_seed(7, 2), sub_seed(7, 2));
        let s: std::collections::BTreeSet<u64> = (0..100).map(|i| sub_seed(7, i)).collect();
        assert_eq!(s.len(), 100);
    }

    #[test]
    fn noise_only_touches_train() {
        let d = prepare_data(&quick()).unwrap();
        assert!(d.splits.train.noise_flags().iter().any(|f| *f));
        assert!(d.splits.validation.noise_flags().iter().all(|f| !f));
        assert!(d.splits.test.noise_flags().iter().all(|f| !f));
        assert_eq!(d.noise.flips.len(), NoiseSpec::new(0.3, 0).unwrap().flips_for(d.noise.total_assignments));
    }

    #[test]
    fn run_writes_files_and_plot_data() {
        let tmp = tempfile::tempdir().unwrap();
        let c = ExperimentConfig {
            output_dir: Some(tmp.path().join("run")),
            checkpoint_every_epoch: true,
            ..quick()
        };
        let out = run_experiment(&c).unwrap();
        for f in ["config.toml", "metrics.csv", "summary.json", "params.json", "checkpoint.bin", "checkpoints/epoch_0002.bin"] {
            assert!(tmp.path().join("run").join(f).is_file(), "{f}");
        }
        let back = read_metrics(&tmp.path().join("run/metrics.csv")).unwrap();
        assert_eq!(back, out.records);
        let loaded = GridModel::load(&tmp.path().join("run/checkpoint.bin")).unwrap();
        assert_eq!(loaded, out.model);

        let plots = tmp.path().join("plots");
        let files = emit_plot_data(&tmp.path().join("run"), &plots).unwrap();
        assert_eq!(files.len(), 5);
        assert!(plots.join("run/detection_grid.csv").is_file());
        let empty = tmp.path().join("empty");
        fs::create_dir_all(&empty).unwrap();
        assert!(matches!(emit_plot_data(&empty, &plots), Err(Error::MissingMetrics(_))));
    }

    #[test]
    fn sweep_cells_are_paired() {
        let table = run_sweep(&ExperimentConfig { epochs: 1, ..quick() }, SweepAxis::Mode, &["hybrid".into(), "disc_only".into()], 2).unwrap();
        assert_eq!(table.cells.len(), 4);
        assert_eq!(table.cells[0].seed, table.cells[2].seed);
        assert_ne!(table.cells[0].seed, table.cells[1].seed);
        assert!(run_sweep(&quick(), SweepAxis::Mode, &["joint".into()], 1).is_err());
        assert_eq!(SweepAxis::Lambda.default_values().len(), 10);
        assert_eq!(table.ndcg_by_value().len(), 2);
    }

    #[test]
    fn model_config_matches_data() {
        let c = quick();
        let d = prepare_data(&c).unwrap();
        assert_eq!(c.input_dim(), d.splits.train.input_dim());
        assert_eq!(c.task(), d.splits.train.task());
    }

    #[test]
    fn pixel_run_trains() {
        let c = ExperimentConfig {
            scenario: Scenario::Pixel,
            epochs: 1,
            data: DataConfig {
                n_samples: 60,
                n_classes: 4,
                height: 4,
                width: 4,
                ..DataConfig::default()
            },
            ..quick()
        };
        let out = train(&c).unwrap();
        assert!(out.summary.final_val_ndcg.is_finite());
        assert_eq!(out.summary.lambda_percent, 10);
    }
}
