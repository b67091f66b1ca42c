use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use curriculum_core::harness::{
    cmd_report, cmd_score, cmd_split, cmd_train_cl, cmd_train_vanilla, evaluate_checkpoint, prepare_data,
    read_corruption_flags, run_all, write_config, ExperimentConfig, Layout,
};
use curriculum_core::{Criterion, Result, ScheduleMode};
use log::info;

#[derive(Parser)]
#[command(name = "curriculum", version, about = "Self-guided curriculum learning experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config; defaults to OUT/config.toml when it exists, else built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for every artifact.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    #[arg(long, global = true)]
    mode: Option<ScheduleMode>,
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    criterion: Option<Criterion>,
    #[arg(long, global = true)]
    seed_data: Option<u64>,
    #[arg(long, global = true)]
    seed_vanilla: Option<u64>,
    #[arg(long, global = true)]
    seed_cl: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the vanilla model on the full training set.
    TrainVanilla,
    /// Score every training pair under the configured criterion.
    Score {
        /// Vanilla checkpoint; defaults to OUT/vanilla/model.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Split a score file into K subsets.
    Split {
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Retrain through the curriculum and, unless disabled, the baseline.
    TrainCl {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        vanilla: Option<PathBuf>,
        /// Score file; needed for competence mode.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Write the recovery histogram, subset statistics and merged curves.
    Report {
        /// Recovery score file; defaults to OUT/scores/recovery.tsv.
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Extra learning curves as NAME=PATH.
        #[arg(long = "curve", value_parser = parse_curve)]
        curves: Vec<(String, PathBuf)>,
    },
    /// Every step from vanilla training to the report.
    RunAll,
    /// Dev BLEU of a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn parse_curve(s: &str) -> std::result::Result<(String, PathBuf), String> {
    let (name, path) = s.split_once('=').ok_or_else(|| format!("expected NAME=PATH, got '{s}'"))?;
    Ok((name.to_string(), PathBuf::from(path)))
}

fn load_config(common: &Common, layout: &Layout) -> Result<ExperimentConfig> {
    let stored = layout.config();
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None if stored.is_file() => ExperimentConfig::load(&stored)?,
        None => ExperimentConfig::default(),
    };
    if let Some(m) = common.mode {
        cfg.schedule.mode = m;
    }
    if let Some(k) = common.k {
        cfg.schedule.k = k;
        cfg.schedule.fixed_phase_steps = None;
    }
    if let Some(c) = common.criterion {
        cfg.criterion = c;
    }
    if let Some(s) = common.seed_data {
        cfg.seeds.data = s;
    }
    if let Some(s) = common.seed_vanilla {
        cfg.seeds.vanilla = s;
    }
    if let Some(s) = common.seed_cl {
        cfg.seeds.cl = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn or_default(path: Option<PathBuf>, default: impl FnOnce() -> Result<PathBuf>) -> Result<PathBuf> {
    path.map_or_else(default, Ok)
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable output"));
}

fn existing(path: PathBuf) -> Option<PathBuf> {
    path.is_file().then_some(path)
}

fn run(cli: Cli) -> Result<()> {
    let layout = Layout::new(&cli.common.out);
    let cfg = load_config(&cli.common, &layout)?;
    write_config(&cfg, &layout)?;
    match cli.command {
        Command::TrainVanilla => {
            let out = cmd_train_vanilla(&cfg, &layout)?;
            info!("vanilla checkpoint at {}", out.checkpoint.display());
            println!("vanilla dev BLEU {:.2}", out.final_dev_bleu);
        }
        Command::Score { checkpoint } => {
            let ckpt = or_default(checkpoint, || layout.vanilla_checkpoint())?;
            let path = cmd_score(&cfg, &layout, cfg.criterion, Some(&ckpt))?;
            println!("{}", path.display());
        }
        Command::Split { scores, manifest } => {
            let scores = or_default(scores, || layout.scores(cfg.criterion))?;
            let manifest = or_default(manifest, || layout.manifest())?;
            let data_hash = prepare_data(&cfg)?.data_hash;
            let partition = cmd_split(&scores, cfg.schedule.k, &manifest, Some(&data_hash))?;
            let sizes: Vec<usize> = partition.subsets().iter().map(Vec::len).collect();
            println!("{} subsets of sizes {sizes:?} in {}", partition.k(), manifest.display());
        }
        Command::TrainCl {
            manifest,
            vanilla,
            scores,
        } => {
            let manifest = or_default(manifest, || layout.manifest())?;
            let vanilla = or_default(vanilla, || layout.vanilla_checkpoint())?;
            let scores = scores.or_else(|| layout.scores(cfg.criterion).ok().and_then(existing));
            print_json(&cmd_train_cl(&cfg, &layout, &manifest, &vanilla, scores.as_deref())?);
        }
        Command::Report {
            scores,
            manifest,
            mut curves,
        } => {
            let scores = or_default(scores, || layout.scores(Criterion::Recovery))?;
            let manifest = or_default(manifest, || layout.manifest())?;
            if curves.is_empty() {
                curves = default_curves(&layout, cfg.schedule.mode);
            }
            let flags = read_corruption_flags(&layout)?;
            let out = cmd_report(
                &layout,
                &scores,
                &manifest,
                &curves,
                flags.as_deref(),
                cfg.report.histogram_bin_width,
            )?;
            print_json(&out);
        }
        Command::RunAll => print_json(&run_all(&cfg, &layout)?),
        Command::Evaluate { checkpoint } => println!("{:.4}", evaluate_checkpoint(&cfg, &checkpoint)?),
    }
    Ok(())
}

/// The CL and baseline curves of `mode`, where they exist.
fn default_curves(layout: &Layout, mode: ScheduleMode) -> Vec<(String, PathBuf)> {
    let candidates = [
        (format!("cl-{mode}"), layout.root.join(format!("cl-{mode}")).join("learning_curve.csv")),
        ("baseline".to_string(), layout.root.join("baseline").join("learning_curve.csv")),
    ];
    candidates.into_iter().filter(|(_, p)| p.is_file()).collect()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
