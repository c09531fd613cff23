use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use amieod::config::Config;
use amieod::datakit::{
    load_dataset, load_image, save_yolo, synth_split, DatasetSpec, Sample, Split,
};
use amieod::enhance::EXPERT_NAMES;
use amieod::evalkit::emit_report;
use amieod::pipeline::{
    evaluate_choice, evaluate_routed, infer_sample, load_checkpoint, route_stats, save_checkpoint,
    train_stage1, train_stage2, TrainLog,
};
use amieod::{Detection, Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Args, Clone)]
struct Common {
    /// TOML config file; absent keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set stage1.epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for every stochastic component.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory receiving all outputs.
    #[arg(long, default_value = "out", global = true)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic low-light dataset under --out.
    Synth,
    /// Pretrain the fixed curve expert, then train experts and detector jointly.
    TrainStage1,
    /// Train the expert selector against a stage-1 checkpoint.
    TrainStage2 {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Route, enhance and detect images.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// An image file or a directory of images.
        #[arg(long)]
        input: PathBuf,
    },
    /// mAP, precision and recall on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Enhancement choice; defaults to selector routing when the
        /// checkpoint has a selector and the joint expert otherwise.
        #[arg(long, value_enum)]
        choice: Option<ChoiceArg>,
        /// Training log (JSON lines) whose loss curves are plotted.
        #[arg(long)]
        log: Vec<PathBuf>,
    },
    /// Selection histogram and losses under selector, fixed and random routing.
    RouteStats {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ChoiceArg {
    Routed,
    Original,
    Piem,
    Jiem,
    Iaem,
}

#[derive(Parser)]
#[command(
    name = "amieod",
    version,
    about = "Low-light detection with enhancement experts and a learned selector"
)]
struct Root {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

fn build_config(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn dataset(cfg: &Config, split: Split) -> Result<Vec<Sample>> {
    let samples = load_dataset(&DatasetSpec {
        root: cfg.data.root.clone(),
        split,
        format: cfg.data.format,
        class_names: cfg.data.class_names.clone(),
        missing_labels: cfg.data.missing_labels,
    })?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no {} images under {}",
            split.as_str(),
            cfg.data.root.display()
        )));
    }
    log::info!("loaded {} {} images", samples.len(), split.as_str());
    Ok(samples)
}

#[derive(Serialize)]
struct ImageDetections {
    file: String,
    choice: String,
    probabilities: Vec<f64>,
    detections: Vec<Detection>,
}

fn image_files(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let entries = fs::read_dir(input).map_err(|e| Error::Io {
        path: input.to_path_buf(),
        source: e,
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|x| x.to_str())
                .is_some_and(|x| matches!(x.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn run(root: Root) -> Result<()> {
    let cfg = build_config(&root.common)?;
    let out = &root.common.out;
    create_out(out)?;
    match root.command {
        Command::Synth => {
            let (train, test) = synth_split(&cfg.synth)?;
            save_yolo(out, Split::Train, &train)?;
            save_yolo(out, Split::Test, &test)?;
            write_text(&out.join("config.toml"), &cfg.to_toml_string()?)?;
            log::info!(
                "wrote {} train and {} test images to {}",
                train.len(),
                test.len(),
                out.display()
            );
        }
        Command::TrainStage1 => {
            let samples = dataset(&cfg, Split::Train)?;
            let result = train_stage1(&cfg, &samples)?;
            result.pretrain_log.write(&out.join("pretrain_log.jsonl"))?;
            result.log.write(&out.join("stage1_log.jsonl"))?;
            save_checkpoint(&out.join("stage1.ckpt"), &result.checkpoint)?;
            write_text(&out.join("config.toml"), &cfg.to_toml_string()?)?;
        }
        Command::TrainStage2 { checkpoint } => {
            let stage1 = load_checkpoint(&checkpoint)?;
            let samples = dataset(&cfg, Split::Train)?;
            let (ckpt, log) = train_stage2(&cfg, &samples, &stage1)?;
            log.write(&out.join("stage2_log.jsonl"))?;
            save_checkpoint(&out.join("stage2.ckpt"), &ckpt)?;
        }
        Command::Infer { checkpoint, input } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let mut results = Vec::new();
            for path in image_files(&input)? {
                let image = load_image(&path)?;
                let (decision, detections) = infer_sample(&image, &ckpt)?;
                results.push(ImageDetections {
                    file: path.display().to_string(),
                    choice: EXPERT_NAMES[decision.chosen].to_string(),
                    probabilities: decision.probs,
                    detections,
                });
            }
            write_json(&out.join("detections.json"), &results)?;
        }
        Command::Eval {
            checkpoint,
            split,
            choice,
            log,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let samples = dataset(&cfg, split.into())?;
            let choice = choice.unwrap_or(if ckpt.esm.is_some() {
                ChoiceArg::Routed
            } else {
                ChoiceArg::Jiem
            });
            let mut eval_cfg = ckpt.config.clone();
            eval_cfg.eval = cfg.eval.clone();
            let result = match choice {
                ChoiceArg::Routed => {
                    let mut routed = ckpt.clone();
                    routed.config = eval_cfg;
                    evaluate_routed(&samples, &routed)?.0
                }
                fixed => {
                    let k = match fixed {
                        ChoiceArg::Piem => 1,
                        ChoiceArg::Jiem => 2,
                        ChoiceArg::Iaem => 3,
                        _ => 0,
                    };
                    evaluate_choice(&samples, &ckpt.experts, &ckpt.detector, k, &eval_cfg)?
                }
            };
            let mut curves = std::collections::BTreeMap::new();
            for path in &log {
                let text = fs::read_to_string(path).map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?;
                curves.extend(TrainLog::from_jsonl(&text)?.curves());
            }
            emit_report(&result, out, cfg.eval.plots, &curves)?;
            log::info!("mAP@50 {:.4}", result.map50);
        }
        Command::RouteStats { checkpoint, split } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let samples = dataset(&cfg, split.into())?;
            let stats = route_stats(&ckpt, &samples, cfg.stage2.seed)?;
            write_json(&out.join("route_stats.json"), &stats)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("AMIEOD_LOG", "info")).init();
    // clap exits with status 2 on usage errors
    let root = Root::parse();
    match run(root) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
