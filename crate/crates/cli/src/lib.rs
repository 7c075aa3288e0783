//! `frostmil` command-line driver: argument parsing, config merging and
//! the per-stage commands.

pub mod colormap;
pub mod commands;
pub mod config;
pub mod error;
pub mod heatmap;

use clap::{Args, Parser, Subcommand, ValueEnum};
use commands::*;
use config::RunConfig;
pub use error::CliError;
use frostmil_core::mil::TaskLevel;
use serde_json::Value;
use std::path::{Path, PathBuf};

/// Crate version followed by the config schema version.
pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (config schema 1)");

#[derive(Debug, Parser)]
#[command(name = "frostmil", version = VERSION, about = "Synthetic frozen-section slide pipeline")]
pub struct Cli {
    /// Run configuration (JSON); flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Base directory for paths not given explicitly.
    #[arg(long, global = true)]
    pub workdir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort with rendered slides.
    Gen(GenArgs),
    /// Segment tissue and tile every slide.
    Tile(TileArgs),
    /// Self-distillation pretraining of the encoder adapters.
    Pretrain(PretrainArgs),
    /// Per-patch features from the encoder.
    Extract(ExtractArgs),
    /// Train the attention aggregator and predict held-out splits.
    Train(TrainArgs),
    /// Metrics with bootstrap intervals from a predictions file.
    Eval(EvalArgs),
    /// Score-threshold triage of case predictions.
    Triage(TriageArgs),
    /// Attention overlays as PNG.
    Heatmap(HeatmapArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Gen(_) => "gen",
            Command::Tile(_) => "tile",
            Command::Pretrain(_) => "pretrain",
            Command::Extract(_) => "extract",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Triage(_) => "triage",
            Command::Heatmap(_) => "heatmap",
        }
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub cases: Option<usize>,
    /// Output directory (cohort.json and slides/).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TileArgs {
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub patch: Option<u32>,
    #[arg(long)]
    pub mpp: Option<f64>,
    #[arg(long)]
    pub min_tissue: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    #[arg(long)]
    pub patches: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    #[arg(long)]
    pub patches: Option<PathBuf>,
    /// Encoder checkpoint directory.
    #[arg(long, conflicts_with = "base_only")]
    pub checkpoint: Option<PathBuf>,
    /// Use the seeded encoder with untrained adapters.
    #[arg(long)]
    pub base_only: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum LevelArg {
    Slide,
    Case,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    #[arg(long)]
    pub patches: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Aggregator checkpoint and prediction directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub level: Option<LevelArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predictions CSV (default: slide-level test predictions).
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    /// Report directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long, default_value = "abmil")]
    pub model: String,
}

#[derive(Debug, Args)]
pub struct TriageArgs {
    /// Case-level predictions CSV (default: prospective case predictions).
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    #[arg(long)]
    pub theta_hi: Option<f64>,
    #[arg(long)]
    pub theta_lo: Option<f64>,
    /// Output JSON; waterfall.csv is written beside it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    #[arg(long)]
    pub patches: Option<PathBuf>,
    /// Attention JSONL (default: test-split attention from training).
    #[arg(long)]
    pub attention: Option<PathBuf>,
    /// Output directory for PNGs.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Restrict to these slides (repeatable).
    #[arg(long = "slide")]
    pub slides: Vec<String>,
    #[arg(long)]
    pub level: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
}

fn abs(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Flag path if given (recorded in the effective config), else the config path.
fn pick(flag: &Option<PathBuf>, resolved: PathBuf, slot: &mut PathBuf) -> PathBuf {
    match flag {
        Some(p) => {
            *slot = abs(p);
            slot.clone()
        }
        None => resolved,
    }
}

/// Loads the config, applies global and command flags, validates.
pub fn effective_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = &cli.workdir {
        cfg.paths.workdir = w.clone();
    }
    match &cli.command {
        Command::Gen(a) => {
            if let Some(n) = a.cases {
                cfg.cohort.n_cases = n;
            }
        }
        Command::Tile(a) => {
            let t = &mut cfg.tile.tile;
            t.patch_px = a.patch.unwrap_or(t.patch_px);
            t.target_mpp = a.mpp.unwrap_or(t.target_mpp);
            t.min_tissue = a.min_tissue.unwrap_or(t.min_tissue);
        }
        Command::Pretrain(a) => {
            let p = &mut cfg.pretrain.run;
            p.steps = a.steps.unwrap_or(p.steps);
            p.batch = a.batch.unwrap_or(p.batch);
        }
        Command::Train(a) => {
            if let Some(l) = a.level {
                cfg.train.level = match l {
                    LevelArg::Slide => TaskLevel::Slide,
                    LevelArg::Case => TaskLevel::Case,
                };
            }
            let r = &mut cfg.train.run;
            r.max_epochs = a.epochs.unwrap_or(r.max_epochs);
            r.patience = a.patience.unwrap_or(r.patience);
        }
        Command::Eval(a) => {
            cfg.eval.run.iters = a.iters.unwrap_or(cfg.eval.run.iters);
        }
        Command::Triage(a) => {
            let p = &mut cfg.triage.policy;
            p.theta_hi = a.theta_hi.unwrap_or(p.theta_hi);
            p.theta_lo = a.theta_lo.unwrap_or(p.theta_lo);
        }
        Command::Heatmap(a) => {
            cfg.heatmap.level = a.level.unwrap_or(cfg.heatmap.level);
            cfg.heatmap.alpha = a.alpha.unwrap_or(cfg.heatmap.alpha);
        }
        Command::Extract(_) => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one parsed invocation and returns its summary.
pub fn run(cli: &Cli) -> Result<Value, CliError> {
    let mut cfg = effective_config(cli)?;
    let summary = match &cli.command {
        Command::Gen(a) => {
            let out = match &a.out {
                Some(o) => o.clone(),
                None => commands_parent(&cfg.paths.cohort()),
            };
            gen(&cfg, &GenOptions { out })?
        }
        Command::Tile(a) => {
            let cohort = pick(&a.cohort, cfg.paths.cohort(), &mut cfg.paths.cohort);
            let out = pick(&a.out, cfg.paths.patches(), &mut cfg.paths.patches);
            tile(&cfg, &TileOptions { cohort, out })?
        }
        Command::Pretrain(a) => {
            let cohort = pick(&a.cohort, cfg.paths.cohort(), &mut cfg.paths.cohort);
            let patches = pick(&a.patches, cfg.paths.patches(), &mut cfg.paths.patches);
            let out = a.out.clone().unwrap_or_else(|| cfg.paths.encoder());
            pretrain_cmd(&cfg, &PretrainOptions { cohort, patches, out })?
        }
        Command::Extract(a) => {
            let cohort = pick(&a.cohort, cfg.paths.cohort(), &mut cfg.paths.cohort);
            let patches = pick(&a.patches, cfg.paths.patches(), &mut cfg.paths.patches);
            let out = pick(&a.out, cfg.paths.features(), &mut cfg.paths.features);
            let checkpoint = if a.base_only {
                None
            } else {
                Some(a.checkpoint.clone().unwrap_or_else(|| cfg.paths.encoder()))
            };
            extract(
                &cfg,
                &ExtractOptions {
                    cohort,
                    patches,
                    checkpoint,
                    out,
                },
            )?
        }
        Command::Train(a) => {
            let cohort = pick(&a.cohort, cfg.paths.cohort(), &mut cfg.paths.cohort);
            let patches = pick(&a.patches, cfg.paths.patches(), &mut cfg.paths.patches);
            let features = pick(&a.features, cfg.paths.features(), &mut cfg.paths.features);
            let out = a.out.clone().unwrap_or_else(|| cfg.paths.aggregator());
            train(
                &cfg,
                &TrainOptions {
                    cohort,
                    patches,
                    features,
                    out,
                },
            )?
        }
        Command::Eval(a) => {
            let cohort = pick(&a.cohort, cfg.paths.cohort(), &mut cfg.paths.cohort);
            let pred = a.pred.clone().unwrap_or_else(|| cfg.paths.aggregator().join("test_slides.csv"));
            let out = pick(&a.out, cfg.paths.reports(), &mut cfg.paths.reports);
            eval(
                &cfg,
                &EvalOptions {
                    pred,
                    cohort,
                    out,
                    model: a.model.clone(),
                },
            )?
        }
        Command::Triage(a) => {
            let cohort = pick(&a.cohort, cfg.paths.cohort(), &mut cfg.paths.cohort);
            let pred = a.pred.clone().unwrap_or_else(|| cfg.paths.aggregator().join("prospective_cases.csv"));
            let out = a.out.clone().unwrap_or_else(|| cfg.paths.reports().join("triage.json"));
            triage(&cfg, &TriageOptions { pred, cohort, out })?
        }
        Command::Heatmap(a) => {
            let cohort = pick(&a.cohort, cfg.paths.cohort(), &mut cfg.paths.cohort);
            let patches = pick(&a.patches, cfg.paths.patches(), &mut cfg.paths.patches);
            let attention = a
                .attention
                .clone()
                .unwrap_or_else(|| cfg.paths.aggregator().join("test_attention.jsonl"));
            let out = a.out.clone().unwrap_or_else(|| cfg.paths.reports().join("heatmaps"));
            heatmap(
                &cfg,
                &HeatmapOptions {
                    cohort,
                    patches,
                    attention,
                    out,
                    slides: a.slides.clone(),
                },
            )?
        }
    };
    Ok(summary)
}

fn commands_parent(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn version_names_the_schema() {
        assert!(VERSION.ends_with(&format!("(config schema {})", config::CONFIG_SCHEMA_VERSION)));
    }

    #[test]
    fn flags_override_config() {
        let cli = Cli::parse_from(["frostmil", "--seed", "7", "triage", "--theta-hi", "0.99", "--theta-lo", "0.01"]);
        let cfg = effective_config(&cli).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.triage.policy.theta_hi, 0.99);
        let bad = Cli::parse_from(["frostmil", "triage", "--theta-hi", "0.2", "--theta-lo", "0.3"]);
        assert_eq!(effective_config(&bad).unwrap_err().exit_code(), 3);
    }
}
