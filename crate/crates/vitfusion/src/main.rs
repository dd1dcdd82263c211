use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vitfusion::harness::{checkpoint, eval, heatmap, HeatmapMethod, RunConfig, Trainer};
use vitfusion::toyenv::EnvMode;
use vitfusion::Result;

#[derive(Parser)]
#[command(name = "vitfusion", about = "RGB-D fusion ViT agent on a toy reach-and-lift task")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint to load.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the training loop, optionally resuming from a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint's policy.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Evaluation variant: standard or color_hard.
        #[arg(long, default_value = "standard")]
        mode: String,
        /// Episode count; defaults to the config's eval_episodes.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Emit per-modality attention heatmaps for a fresh observation.
    Attn {
        #[command(flatten)]
        common: Common,
        /// Heatmap method: grad_cam or attention_rollout.
        #[arg(long, default_value = "grad_cam")]
        mode: String,
    },
    /// Dump replay buffer frames from an exact-resume checkpoint as PNGs.
    ReplayDump {
        #[command(flatten)]
        common: Common,
        /// Maximum number of records to dump.
        #[arg(long, default_value_t = 64)]
        count: usize,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn build_trainer(common: &Common) -> Result<Trainer> {
    match &common.resume {
        Some(ckpt) => checkpoint::load(ckpt, common.out.as_deref()),
        None => {
            let cfg = load_config(common)?;
            Trainer::new(cfg, common.out.as_deref())
        }
    }
}

fn parse_env_mode(s: &str) -> Result<EnvMode> {
    match s {
        "standard" => Ok(EnvMode::Standard),
        "color_hard" | "color-hard" => Ok(EnvMode::ColorHard),
        other => Err(vitfusion::Error::config(format!(
            "unknown eval mode '{other}' (use standard or color_hard)"
        ))),
    }
}

fn run() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Train { common } => {
            let mut tr = build_trainer(&common)?;
            log::info!(
                "training to step {} (currently {}) in {}",
                tr.cfg.steps,
                tr.ts.step,
                tr.out_dir.display()
            );
            tr.train()?;
            log::info!("done; final checkpoint in {}", tr.out_dir.join("checkpoints").display());
        }
        Cmd::Eval { common, mode, episodes } => {
            let ckpt = common.resume.clone().ok_or_else(|| {
                vitfusion::Error::config("eval needs --resume pointing at a checkpoint")
            })?;
            let mode = parse_env_mode(&mode)?;
            let tr = checkpoint::load(&ckpt, common.out.as_deref())?;
            let episodes = episodes.unwrap_or(tr.cfg.eval_episodes);
            let mut rng = ChaCha8Rng::seed_from_u64(common.seed.unwrap_or(tr.cfg.seed));
            let stats = eval::evaluate(&tr.ts, &tr.cfg, mode, episodes, &mut rng)?;
            println!(
                "{}",
                serde_json::json!({
                    "checkpoint": ckpt.display().to_string(),
                    "mode": format!("{mode:?}"),
                    "episodes": episodes,
                    "success_rate": stats.success_rate,
                    "mean_return": stats.mean_return,
                    "mean_length": stats.mean_length,
                })
            );
        }
        Cmd::Attn { common, mode } => {
            let ckpt = common.resume.clone().ok_or_else(|| {
                vitfusion::Error::config("attn needs --resume pointing at a checkpoint")
            })?;
            let method = HeatmapMethod::from_str(&mode)?;
            let mut tr = checkpoint::load(&ckpt, common.out.as_deref())?;
            let dir = tr.out_dir.join("heatmaps");
            let obs = tr.obs.clone();
            let step = tr.ts.step;
            let out = heatmap::emit(&mut tr.ts, &obs, method, step, &dir)?;
            for f in out.files {
                println!("{}", f.display());
            }
        }
        Cmd::ReplayDump { common, count } => {
            let ckpt = common.resume.clone().ok_or_else(|| {
                vitfusion::Error::config("replay-dump needs --resume pointing at a checkpoint")
            })?;
            let tr = checkpoint::load(&ckpt, common.out.as_deref())?;
            if tr.replay.is_empty() {
                return Err(vitfusion::Error::config(
                    "checkpoint has no replay contents (exact_resume was off)",
                ));
            }
            let dir = tr.out_dir.join("replay_dump");
            std::fs::create_dir_all(&dir)?;
            let mut index = Vec::new();
            for (i, rec) in tr.replay.records().take(count).enumerate() {
                let (_, h, w) = rec.rgb.dim();
                let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
                    image::Rgb([
                        rec.rgb[(0, y as usize, x as usize)],
                        rec.rgb[(1, y as usize, x as usize)],
                        rec.rgb[(2, y as usize, x as usize)],
                    ])
                });
                let rgb_path = dir.join(format!("{i:06}_rgb.png"));
                img.save(&rgb_path).map_err(vitfusion::Error::from)?;
                let dimg = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
                    image::Luma([rec.depth[(0, y as usize, x as usize)]])
                });
                dimg.save(dir.join(format!("{i:06}_depth.png")))
                    .map_err(vitfusion::Error::from)?;
                index.push(serde_json::json!({
                    "index": i,
                    "episode": rec.episode,
                    "reward": rec.reward,
                    "done": rec.done,
                    "boundary": rec.is_boundary(),
                    "action": rec.action.as_ref().map(|a| a.to_vec()),
                }));
            }
            let index_path = dir.join("index.jsonl");
            let mut text = String::new();
            for line in &index {
                text.push_str(&line.to_string());
                text.push('\n');
            }
            std::fs::write(&index_path, text)?;
            println!("dumped {} records to {}", index.len(), dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
