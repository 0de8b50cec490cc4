//! `grid`: generate data, train, sweep, evaluate and export plot data.
//!
//! Settings resolve in three layers: built-in defaults, then the file given
//! with `--config`, then individual flags.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use grid_core::data::Dataset;
use grid_core::eval::{evaluate_retrieval, evaluate_self_retrieval};
use grid_core::experiment::{
    emit_plot_data, prepare_data, run_experiment, run_sweep, ExperimentConfig, OptimizerKind, Scenario, SweepAxis,
};
use grid_core::{GridModel, Mode, Selector};

#[derive(Parser)]
#[command(name = "grid", version, about = "Label-noise-robust representation learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/validation/test datasets of a configuration.
    GenerateData {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run one experiment and write its run directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run one experiment per axis value and replicate.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values; defaults to the full studied range.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long, default_value_t = 1)]
        replicates: usize,
    },
    /// Mean NDCG@k of a checkpoint's descriptors on a dataset file.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        /// Archive dataset; without it, leave-one-out retrieval within the queries.
        #[arg(long)]
        archive: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        k: usize,
    },
    /// Write per-figure CSV files for every run under a directory.
    EmitPlotData {
        #[arg(long)]
        metrics_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print trainable parameter counts per group and mode.
    CountParams {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Args, Default)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    mode: Option<String>,
    /// Detected-noisy percentage per batch.
    #[arg(long)]
    lambda: Option<u32>,
    #[arg(long)]
    slnir: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// `adam` or `sgd`.
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    n_classes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_k: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Also save a checkpoint after every epoch.
    #[arg(long)]
    checkpoint_every_epoch: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = &self.scenario {
            c.scenario = s.parse::<Scenario>()?;
        }
        if let Some(m) = &self.mode {
            c.mode = m.parse::<Mode>()?;
        }
        if let Some(o) = &self.optimizer {
            c.optimizer = match o.as_str() {
                "adam" => OptimizerKind::Adam,
                "sgd" => OptimizerKind::Sgd,
                _ => bail!("unknown optimizer `{o}`"),
            };
        }
        macro_rules! set {
            ($($flag:ident => $($path:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { c.$($path).+ = v; })*
            };
        }
        set!(
            slnir => slnir,
            epochs => epochs,
            batch_size => batch_size,
            learning_rate => learning_rate,
            latent_dim => model.latent_dim,
            n_samples => data.n_samples,
            n_classes => data.n_classes,
            seed => seed,
            eval_k => eval_k,
        );
        if self.lambda.is_some() {
            c.lambda_percent = self.lambda;
        }
        if self.output_dir.is_some() {
            c.output_dir = self.output_dir.clone();
        }
        c.checkpoint_every_epoch |= self.checkpoint_every_epoch;
        c.validate()?;
        Ok(c)
    }
}

fn require_output(c: &ExperimentConfig) -> Result<&Path> {
    c.output_dir
        .as_deref()
        .context("an output directory is required (--output-dir or output_dir in the config)")
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData { config } => {
            let c = config.resolve()?;
            let dir = require_output(&c)?;
            let data = prepare_data(&c)?;
            for (name, d) in [
                ("train", &data.splits.train),
                ("validation", &data.splits.validation),
                ("test", &data.splits.test),
            ] {
                let path = dir.join(format!("{name}.json"));
                d.save(&path)?;
                println!("wrote {} ({} samples)", path.display(), d.len());
            }
            println!(
                "noise: {} of {} assignments flipped ({} skipped)",
                data.noise.flips.len(),
                data.noise.total_assignments,
                data.noise.skipped
            );
        }
        Command::Train { config } => {
            let c = config.resolve()?;
            let dir = require_output(&c)?.to_path_buf();
            let out = run_experiment(&c)?;
            let s = &out.summary;
            println!("final val_ndcg@{}: {}", s.eval_k, s.final_val_ndcg);
            for sel in Selector::ALL {
                if let Some(p) = s.detection_tail_precision[&sel] {
                    println!("detection precision ({sel}, last epochs): {p}");
                }
            }
            println!("wrote {}", dir.display());
        }
        Command::Sweep {
            config,
            axis,
            values,
            replicates,
        } => {
            let c = config.resolve()?;
            let axis: SweepAxis = axis.parse()?;
            let values = if values.is_empty() { axis.default_values() } else { values };
            let table = run_sweep(&c, axis, &values, replicates)?;
            println!("{},mean_ndcg,std_ndcg,replicates", axis.name());
            for (v, m, sd, n) in table.ndcg_by_value() {
                println!("{v},{m},{sd},{n}");
            }
        }
        Command::Evaluate {
            checkpoint,
            queries,
            archive,
            k,
        } => {
            let model = GridModel::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let q = Dataset::load(&queries).with_context(|| format!("loading {}", queries.display()))?;
            let ndcg = match archive {
                Some(a) => {
                    let a = Dataset::load(&a).with_context(|| format!("loading {}", a.display()))?;
                    evaluate_retrieval(&model, &q, &a, k)?
                }
                None => evaluate_self_retrieval(&model, &q, k)?,
            };
            println!("ndcg@{k}: {ndcg}");
        }
        Command::EmitPlotData { metrics_dir, out } => {
            let files = emit_plot_data(&metrics_dir, &out)?;
            for f in &files {
                println!("{}", f.display());
            }
        }
        Command::CountParams { config } => {
            let c = config.resolve()?;
            let model = GridModel::seeded(c.model_config(), 0)?;
            let p = model.count_parameters();
            for (g, n) in &p.per_group {
                println!("{g}: {n}");
            }
            println!("disc_only_total: {}", p.disc_only);
            println!("gen_only_total: {}", p.gen_only);
            println!("hybrid_total: {}", p.hybrid);
            println!("beta_total: {}", p.beta);
            println!("backbone_share_percent: {:.4}", p.backbone_share_percent);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
