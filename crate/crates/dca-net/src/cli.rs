//! Command-line entry point: dataset synthesis, training (single run or
//! the full leave-one-domain-out loop), checkpoint evaluation, and plot
//! rendering, all driven by one experiment config file.
//!
//! Exit codes: 0 success, 1 config error, 2 data error, 3 numeric
//! failure.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Axis;

use crate::checkpoint;
use crate::config::{echo_config, DataSource, ExperimentConfig};
use crate::data::split::{leave_one_domain_out_split, SplitSpec};
use crate::data::{storage, DomainRegistry};
use crate::error::{Error, Result};
use crate::metrics;
use crate::plot;
use crate::trainer::{self, TrainMode};

#[derive(Debug, Parser)]
#[command(
    name = "dca",
    version,
    about = "Domain-composition-and-attention segmentation experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-domain dataset on disk.
    Synth(SynthArgs),
    /// Train a model, or the whole leave-one-domain-out experiment.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write per-volume/per-domain tables.
    Eval(EvalArgs),
    /// Render slice overlays and training curves from a finished run.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Experiment config file (.toml or .json).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides the config's `output`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Root seed override (propagates to data generation and training).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Allow writing into an existing non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Train once per domain (full experiment) instead of a single run.
    #[arg(long)]
    pub lodo: bool,
    /// Held-out domain for a single run (default: the last domain).
    #[arg(long)]
    pub held_out: Option<String>,
    /// Override the training mode from the config.
    #[arg(long, value_enum)]
    pub mode: Option<CliMode>,
    /// Override the calibration bank size (the N ablation axis).
    #[arg(long)]
    pub bank_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Held-out domain whose unseen volumes are evaluated.
    #[arg(long)]
    pub held_out: Option<String>,
    /// Which unseen split to score.
    #[arg(long, value_enum, default_value = "test")]
    pub split: CliSplit,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Finished training run directory (train.jsonl, best.ckpt).
    #[arg(long)]
    pub run: PathBuf,
    /// Number of overlay slices to render (0: curves only).
    #[arg(long, default_value_t = 8)]
    pub slices: usize,
    /// Held-out domain providing the overlay volumes.
    #[arg(long)]
    pub held_out: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
#[clap(rename_all = "snake_case")]
pub enum CliMode {
    Dca,
    DcaNoDiv,
    Deepall,
    DeepallComp,
}

impl From<CliMode> for TrainMode {
    fn from(m: CliMode) -> TrainMode {
        match m {
            CliMode::Dca => TrainMode::Dca,
            CliMode::DcaNoDiv => TrainMode::DcaNoDiv,
            CliMode::Deepall => TrainMode::Deepall,
            CliMode::DeepallComp => TrainMode::DeepallComp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum CliSplit {
    Val,
    Test,
}

/// Top-level sections actually present in the config document (serde
/// defaults hide absences, but some commands require explicit sections).
fn present_sections(path: &Path) -> Result<BTreeSet<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => {
            let v: toml::Value =
                toml::from_str(&text).map_err(|e| Error::Config(format!("TOML config: {e}")))?;
            Ok(v.as_table()
                .map(|t| t.keys().cloned().collect())
                .unwrap_or_default())
        }
        Some("json") => {
            let v: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("JSON config: {e}")))?;
            Ok(v.as_object()
                .map(|o| o.keys().cloned().collect())
                .unwrap_or_default())
        }
        _ => Ok(BTreeSet::new()),
    }
}

/// Resolve the output directory and enforce the `--force` contract.
fn prepare_out_dir(common: &CommonArgs, cfg: &ExperimentConfig) -> Result<PathBuf> {
    let out = common
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .ok_or_else(|| Error::Config("no output directory (set --out or `output`)".into()))?;
    if out.exists() {
        let occupied = std::fs::read_dir(&out)
            .map_err(|e| Error::io(&out, e))?
            .next()
            .is_some();
        if occupied && !common.force {
            return Err(Error::Config(format!(
                "output directory {} is not empty (pass --force to reuse it)",
                out.display()
            )));
        }
    } else {
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    }
    Ok(out)
}

fn load_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = Some(s);
    }
    cfg.apply_root_seed();
    Ok(cfg)
}

fn resolve_held_out(registry: &DomainRegistry, requested: Option<&str>) -> Result<String> {
    match requested {
        Some(id) => {
            if registry.domains.iter().any(|d| d.domain_id == id) {
                Ok(id.to_string())
            } else {
                Err(Error::Data(format!(
                    "held-out domain {id:?} not in registry (have: {})",
                    registry
                        .domains
                        .iter()
                        .map(|d| d.domain_id.as_str())
                        .collect::<Vec<_>>()
                        .join(", ")
                )))
            }
        }
        None => Ok(registry.domains.last().expect("validated registry").domain_id.clone()),
    }
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let sections = present_sections(&args.common.config)?;
    if !sections.contains("data") {
        return Err(Error::Config(format!(
            "{}: config has no [data] section, nothing to synthesize",
            args.common.config.display()
        )));
    }
    if cfg.data.source != DataSource::Synthetic {
        return Err(Error::Config(format!(
            "[data] source is {:?}; synth only generates synthetic datasets",
            cfg.data.source
        )));
    }
    let out = prepare_out_dir(&args.common, &cfg)?;
    let registry = cfg.data.load()?;
    storage::save_registry(&out.join("data"), &registry, Some(cfg.data.seed))?;
    echo_config(&cfg, Some(&args.common.config), &out)?;
    println!(
        "wrote {} domains x {} volumes to {}",
        registry.m(),
        cfg.data.synthetic.volumes_per_domain,
        out.join("data").display()
    );
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(mode) = args.mode {
        cfg.train.mode = mode.into();
    }
    if let Some(n) = args.bank_size {
        cfg.train.bank_size = n;
    }
    cfg.validate()?;
    let out = prepare_out_dir(&args.common, &cfg)?;
    echo_config(&cfg, Some(&args.common.config), &out)?;
    let registry = cfg.data.load()?;

    if args.lodo {
        let rows = trainer::run_lodo_experiment::<f32>(
            &registry,
            &cfg.network,
            &cfg.loss,
            &cfg.train,
            &cfg.eval,
            &out,
        )?;
        println!("held_out        mode          dice_mean  dice_std   asd_mean");
        for r in &rows {
            println!(
                "{:<15} {:<13} {:>8.2}  {:>8.2}   {}",
                r.held_out,
                r.mode,
                r.dice_mean,
                r.dice_std,
                r.asd_mean.map(|v| format!("{v:>7.2}")).unwrap_or_else(|| "      -".into())
            );
        }
        return Ok(());
    }

    let held_out = resolve_held_out(&registry, args.held_out.as_deref())?;
    let split =
        leave_one_domain_out_split(&registry, &SplitSpec::new(held_out.clone(), cfg.train.seed))?;
    let report = trainer::train::<f32>(&split, &cfg.network, &cfg.loss, &cfg.train, &cfg.eval, &out)?;
    let results =
        trainer::evaluate_checkpoint::<f32>(&report.best_checkpoint, &split.test, &cfg.eval)?;
    metrics::write_volume_csv(&out.join("test_volumes.csv"), &results)?;
    let agg = metrics::aggregate(&results);
    metrics::write_domain_csv(&out.join("test_domains.csv"), &agg)?;
    let mut stdout = std::io::stdout();
    metrics::print_summary(&mut stdout, &agg).map_err(|e| Error::io("stdout", e))?;
    println!(
        "best checkpoint: iteration {} (val dice {})",
        report.best_iteration,
        report.best_val_dice.map(|v| format!("{v:.2}")).unwrap_or_else(|| "n/a".into())
    );
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let out = prepare_out_dir(&args.common, &cfg)?;
    let registry = cfg.data.load()?;
    let held_out = resolve_held_out(&registry, args.held_out.as_deref())?;
    let split =
        leave_one_domain_out_split(&registry, &SplitSpec::new(held_out, cfg.train.seed))?;

    let loaded = checkpoint::load_model::<f32>(&args.ckpt)?;
    if loaded.config.in_channels != cfg.network.in_channels
        || loaded.config.num_classes != cfg.network.num_classes
        || loaded.config.encoder_widths != cfg.network.encoder_widths
    {
        return Err(Error::Checkpoint(format!(
            "checkpoint architecture (in {}, classes {}, widths {:?}) does not match the \
             config's [network] (in {}, classes {}, widths {:?})",
            loaded.config.in_channels,
            loaded.config.num_classes,
            loaded.config.encoder_widths,
            cfg.network.in_channels,
            cfg.network.num_classes,
            cfg.network.encoder_widths,
        )));
    }

    let volumes = match args.split {
        CliSplit::Val => &split.val,
        CliSplit::Test => &split.test,
    };
    let results = metrics::evaluate_volumes(&loaded.model, &loaded.store, volumes, &cfg.eval)?;
    metrics::write_volume_csv(&out.join("eval_volumes.csv"), &results)?;
    let agg = metrics::aggregate(&results);
    metrics::write_domain_csv(&out.join("eval_domains.csv"), &agg)?;
    let mut stdout = std::io::stdout();
    metrics::print_summary(&mut stdout, &agg).map_err(|e| Error::io("stdout", e))?;
    Ok(())
}

pub fn cmd_plot(args: &PlotArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let out = prepare_out_dir(&args.common, &cfg)?;
    let log_path = args.run.join("train.jsonl");
    if !log_path.is_file() {
        return Err(Error::Data(format!(
            "{} holds no train.jsonl; point --run at a finished training directory",
            args.run.display()
        )));
    }
    let events = trainer::read_log(&log_path)?;
    plot::curves_png(&out.join("curves.png"), &events)?;
    let mut written = 1usize;

    if args.slices > 0 {
        let registry = cfg.data.load()?;
        let held_out = resolve_held_out(&registry, args.held_out.as_deref())?;
        let split =
            leave_one_domain_out_split(&registry, &SplitSpec::new(held_out, cfg.train.seed))?;
        let loaded = checkpoint::load_model::<f32>(&args.run.join("best.ckpt"))?;
        // Flatten every unseen test slice, then spread the requested count
        // evenly over that list.
        let mut all: Vec<(usize, usize)> = Vec::new();
        for (vi, v) in split.test.iter().enumerate() {
            for z in 0..v.volume.image.dim().0 {
                all.push((vi, z));
            }
        }
        if all.is_empty() {
            return Err(Error::Data("no unseen test slices to plot".into()));
        }
        let count = args.slices.min(all.len());
        let mut preds: Vec<Option<Array3Pred>> = vec![None; split.test.len()];
        for j in 0..count {
            let (vi, z) = all[j * all.len() / count];
            let v = &split.test[vi];
            if preds[vi].is_none() {
                preds[vi] =
                    Some(metrics::predict_volume(&loaded.model, &loaded.store, &v.volume, &cfg.eval)?);
            }
            let pred = preds[vi].as_ref().unwrap();
            let name = format!("overlay_{}_{}_z{:03}.png", v.domain_id, v.volume.patient_id, z);
            plot::overlay_png(
                &out.join(name),
                v.volume.image.index_axis(Axis(0), z),
                v.volume.label.index_axis(Axis(0), z),
                pred.index_axis(Axis(0), z),
            )?;
            written += 1;
        }
    }
    println!("wrote {written} image(s) to {}", out.display());
    Ok(())
}

type Array3Pred = ndarray::Array3<u8>;

/// Parse `args` and run; returns the process exit code.
pub fn run_from<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are successes; usage mistakes are
            // config errors.
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Plot(a) => cmd_plot(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
