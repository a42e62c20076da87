use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ego3rt::harness::checkpoint::load_checkpoint;
use ego3rt::harness::eval::{decode_detections, evaluate};
use ego3rt::harness::model::{infer, Pipeline};
use ego3rt::harness::scene::{gen_scene, load_scene, load_scene_set, save_scene};
use ego3rt::harness::{train, viz, RunConfig};
use ego3rt::{Error, Result};

#[derive(Parser)]
#[command(name = "ego3rt", version, about = "Imaginary-eye BEV perception on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes into DIR/scene_NNNN.
    GenScenes {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Run configuration for rig, grid and scene content.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train from a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on every scene under a directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        /// Override the peak score threshold.
        #[arg(long)]
        threshold: Option<f64>,
        /// Print key=value lines instead of the table.
        #[arg(long)]
        raw: bool,
    },
    /// Print detections for one scene and write visualizations.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        viz: Option<PathBuf>,
    },
    /// Write visualizations for one scene.
    Viz {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value = "viz")]
        out: PathBuf,
    },
}

fn config_or_default(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn write_viz(ckpt: &Path, scene: &Path, dir: &Path) -> Result<()> {
    let (model, manifest) = load_checkpoint(ckpt, None)?;
    let cfg = manifest.config;
    let pipe = Pipeline::new(&cfg)?;
    let s = load_scene(scene)?;
    let out = infer(&model, &pipe, &s.input()?)?;
    let preds = decode_detections(&out.det, &cfg.loss.group_list(), pipe.bev, cfg.eval.score_threshold);
    for d in &preds {
        println!("{d}");
    }
    viz::emit_all(dir, &s, &out, &preds, &pipe, &cfg)?;
    eprintln!("wrote visualizations to {}", dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenScenes { count, seed, out, config } => {
            let cfg = config_or_default(config.as_deref())?;
            for i in 0..count {
                let s = gen_scene(seed.wrapping_add(i as u64), &cfg)?;
                save_scene(&s, out.join(format!("scene_{i:04}")))?;
            }
            eprintln!("wrote {count} scenes to {}", out.display());
        }
        Command::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            let outcome = train(&cfg)?;
            if let Some(last) = outcome.log.last() {
                println!("final loss {:.6}", last.breakdown.total);
            }
            if let Some(p) = outcome.checkpoint {
                println!("checkpoint {}", p.display());
            }
        }
        Command::Eval { ckpt, scenes, threshold, raw } => {
            let (model, manifest) = load_checkpoint(&ckpt, None)?;
            let mut cfg = manifest.config;
            if let Some(t) = threshold {
                cfg.eval.score_threshold = t;
                cfg.validate()?;
            }
            let set = load_scene_set(&scenes)?;
            let ev = evaluate(&model, &set, &cfg)?;
            if raw {
                print!("{}", ev.report.to_key_values());
            } else {
                print!("{}", ev.report.to_text());
                println!("max center error {:.4} m", ev.max_center_error());
            }
        }
        Command::Infer { ckpt, scene, viz } => match viz {
            Some(dir) => write_viz(&ckpt, &scene, &dir)?,
            None => {
                let (model, manifest) = load_checkpoint(&ckpt, None)?;
                let cfg = manifest.config;
                let pipe = Pipeline::new(&cfg)?;
                let out = infer(&model, &pipe, &load_scene(&scene)?.input()?)?;
                for d in decode_detections(&out.det, &cfg.loss.group_list(), pipe.bev, cfg.eval.score_threshold) {
                    println!("{d}");
                }
            }
        },
        Command::Viz { ckpt, scene, out } => write_viz(&ckpt, &scene, &out)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) | Error::Version(_) => 2,
                Error::Numeric(_) => 3,
                _ => 1,
            })
        }
    }
}
