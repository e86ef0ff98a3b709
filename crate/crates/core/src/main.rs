use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use relation3d::config::RunConfig;
use relation3d::contrastive::feature_contrastive_loss;
use relation3d::decoder::{decoder_forward, load_checkpoint, save_checkpoint};
use relation3d::eval::{
    attention_histograms, evaluate, infer_instances, parse_feature_dump, point_labels,
};
use relation3d::gradsuite::gradient_suite;
use relation3d::scene::{load_dataset, load_scene, save_dataset, synth_dataset, Scene, SceneFormat};
use relation3d::training::train;
use relation3d::{Error, Result};

#[derive(Parser)]
#[command(name = "relation3d", version, about = "Relation-aware instance segmentation decoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key after the file, e.g. `--set epochs=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct EvalFlags {
    #[arg(long)]
    nms_iou: Option<f64>,
    #[arg(long)]
    min_confidence: Option<f64>,
}

impl EvalFlags {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(v) = self.nms_iou {
            cfg.eval.nms_iou = v;
        }
        if let Some(v) = self.min_confidence {
            cfg.eval.min_confidence = v;
        }
        cfg.eval.validate()
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// `json` or `binary`.
        #[arg(long, default_value = "json")]
        format: SceneFormat,
    },
    /// Train a model and write its checkpoint and metrics log.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training scenes; generated from the synth settings when absent.
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        /// Generated scenes held out for validation when `--train` is absent.
        #[arg(long, default_value_t = 5)]
        holdout: usize,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        log: PathBuf,
    },
    /// Score a checkpoint on a directory of scenes.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        flags: EvalFlags,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-point instance and category labels for one scene.
    Infer {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        flags: EvalFlags,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable block.
    GradCheck {
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Contrastive loss of a superpoint feature dump against a scene's instances.
    LCont {
        /// `M × C` matrix: JSON rows or whitespace-separated lines.
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        scene: PathBuf,
    },
    /// Per-layer histograms of relation-aware self-attention weights.
    AttnStats {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 20)]
        bins: usize,
    },
}

/// Pretty JSON on stdout, compact JSON in files.
fn emit(value: &impl Serialize, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, serde_json::to_string(value)? + "\n")?,
        None => {
            let text = serde_json::to_string_pretty(value)?;
            match writeln!(std::io::stdout().lock(), "{text}") {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => return Err(e.into()),
                _ => {}
            }
        }
    }
    Ok(())
}

fn run(command: Command) -> Result<bool> {
    match command {
        Command::Synth { config, out, format } => {
            let cfg = config.load()?;
            let scenes = synth_dataset(&cfg.synth)?;
            let paths = save_dataset(&scenes, &out, format)?;
            emit(&json!({ "scenes": paths.len(), "dir": out }), None)?;
        }
        Command::Train {
            config,
            seed,
            train: train_dir,
            val,
            holdout,
            checkpoint,
            log,
        } => {
            let cfg = config.load()?;
            let (train_set, val_set) = datasets(&cfg, train_dir.as_deref(), val.as_deref(), holdout)?;
            let outcome = train(&train_set, &val_set, &cfg.decoder, &cfg.train, &cfg.eval, seed)?;
            let mut file = std::fs::File::create(&log)?;
            for line in &outcome.log {
                writeln!(file, "{}", line.to_json_line())?;
            }
            save_checkpoint(&outcome.model, &checkpoint)?;
            emit(
                &json!({
                    "train_scenes": train_set.len(),
                    "val_scenes": val_set.len(),
                    "last": outcome.log.last(),
                    "checkpoint": checkpoint,
                    "log": log,
                }),
                None,
            )?;
        }
        Command::Eval {
            config,
            flags,
            checkpoint,
            scenes,
            out,
        } => {
            let mut cfg = config.load()?;
            flags.apply(&mut cfg)?;
            let model = load_checkpoint(&checkpoint, None)?;
            let scenes = load_dataset(&scenes)?;
            emit(&evaluate(&scenes, &model, &cfg.eval)?, out.as_deref())?;
        }
        Command::Infer {
            config,
            flags,
            checkpoint,
            scene,
            out,
        } => {
            let mut cfg = config.load()?;
            flags.apply(&mut cfg)?;
            let model = load_checkpoint(&checkpoint, None)?;
            let scene = load_scene(&scene)?;
            let kept = infer_instances(&scene, &model, &cfg.eval)?;
            emit(&point_labels(scene.len(), &kept), out.as_deref())?;
        }
        Command::GradCheck { seeds } => {
            let report = gradient_suite(seeds)?;
            emit(&report, None)?;
            return Ok(report.passed);
        }
        Command::LCont { features, scene } => {
            let features = parse_feature_dump(&std::fs::read_to_string(&features)?)?;
            let scene = load_scene(&scene)?;
            let (l_cont, zero_norm_rows) = feature_contrastive_loss(&features, &scene)?;
            emit(
                &json!({
                    "l_cont": l_cont,
                    "superpoints": features.rows(),
                    "channels": features.cols(),
                    "zero_norm_rows": zero_norm_rows,
                }),
                None,
            )?;
        }
        Command::AttnStats { checkpoint, scene, bins } => {
            let model = load_checkpoint(&checkpoint, None)?;
            let scene = load_scene(&scene)?;
            let out = decoder_forward(&scene, &model)?;
            emit(&attention_histograms(&out.self_attention, bins), None)?;
        }
    }
    Ok(true)
}

fn datasets(
    cfg: &RunConfig,
    train_dir: Option<&Path>,
    val_dir: Option<&Path>,
    holdout: usize,
) -> Result<(Vec<Scene>, Vec<Scene>)> {
    let val = val_dir.map(load_dataset).transpose()?;
    match (train_dir, val) {
        (Some(dir), val) => Ok((load_dataset(dir)?, val.unwrap_or_default())),
        (None, Some(val)) => Ok((synth_dataset(&cfg.synth)?, val)),
        (None, None) => {
            let mut scenes = synth_dataset(&cfg.synth)?;
            if holdout >= scenes.len() {
                return Err(Error::validation(
                    "holdout",
                    format!("{holdout} held out of {} generated scenes", scenes.len()),
                ));
            }
            let val = scenes.split_off(scenes.len() - holdout);
            Ok((scenes, val))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
