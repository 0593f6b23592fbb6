//! Command-line front end: configuration, checkpoints, PLY export and the pipeline stages.

pub mod checkpoint;
pub mod config;
pub mod pipeline;
pub mod ply;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use checkpoint::Checkpoint;
pub use config::Config;
use pipeline::SampleRequest;

#[derive(Debug, Parser)]
#[command(name = "trigen", version, about = "Triplane VAE and latent diffusion for textured meshes")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed (overrides the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Override one config key, e.g. `--set vae.triplane_res=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write shape specs, colored surface clouds and ground-truth previews.
    GenData,
    /// VAE stage 1: train encoder and decoder.
    TrainVae,
    /// VAE stage 2: freeze the encoder and finetune the decoder at the finer grid.
    FinetuneDecoder {
        /// Stage-1 checkpoint (default: <out>/checkpoints/vae_stage1.ckpt).
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Train the conditional latent diffusion model on encoded shapes.
    TrainDiffusion {
        #[arg(long)]
        vae: Option<PathBuf>,
    },
    /// Zero the condition pathway and finetune unconditionally.
    FinetuneUncond {
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Generate meshes from condition tags (or unconditionally).
    Sample {
        /// Condition tag; repeatable. Defaults to `sample.tags`, then the training shapes.
        #[arg(long = "tag")]
        tags: Vec<String>,
        /// Samples per tag (overrides `sample.n`).
        #[arg(long)]
        n: Option<usize>,
        /// Use the unconditionally finetuned model.
        #[arg(long)]
        uncond: bool,
        #[arg(long)]
        diffusion: Option<PathBuf>,
        #[arg(long)]
        vae: Option<PathBuf>,
    },
    /// Encode and decode every configured shape.
    Reconstruct {
        #[arg(long)]
        vae: Option<PathBuf>,
    },
    /// Score reconstructions (default) or samples; writes line-delimited metric records.
    Eval {
        #[arg(long)]
        samples: bool,
        #[arg(long)]
        vae: Option<PathBuf>,
    },
    /// Convert an internal `.tmesh` file to PLY, optionally with rendered mask/depth views.
    Export {
        input: PathBuf,
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        views: usize,
        #[arg(long, default_value_t = 256)]
        res: usize,
    },
    /// Print the effective configuration, or the documented reference of all keys.
    PrintConfig {
        #[arg(long)]
        reference: bool,
    },
}

impl Common {
    pub fn resolve(&self) -> crate::Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        for o in &self.overrides {
            cfg.set(o)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        Ok(cfg)
    }
}

fn print_paths(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = cli.common.resolve()?;
    match cli.command {
        Command::GenData => print_paths(&pipeline::gen_data(&cfg)?),
        Command::TrainVae => print_paths(&[pipeline::train_vae_stage1(&cfg)?]),
        Command::FinetuneDecoder { from } => print_paths(&[pipeline::finetune_decoder(&cfg, from.as_deref())?]),
        Command::TrainDiffusion { vae } => print_paths(&[pipeline::train_diffusion_cmd(&cfg, vae.as_deref())?]),
        Command::FinetuneUncond { from } => print_paths(&[pipeline::finetune_uncond_cmd(&cfg, from.as_deref())?]),
        Command::Sample { tags, n, uncond, diffusion, vae } => {
            let tags = if tags.is_empty() { cfg.sample.tags.clone() } else { tags };
            let req = SampleRequest {
                tags,
                n: n.unwrap_or(cfg.sample.n),
                diffusion_ckpt: diffusion,
                vae_ckpt: vae,
                unconditional: uncond,
            };
            for s in pipeline::sample_cmd(&cfg, &req)? {
                print_paths(&s.files);
            }
        }
        Command::Reconstruct { vae } => print_paths(&pipeline::reconstruct(&cfg, vae.as_deref())?),
        Command::Eval { samples, vae } => {
            let records = if samples {
                pipeline::eval_samples(&cfg)?
            } else {
                pipeline::eval_reconstructions(&cfg, vae.as_deref())?
            };
            for r in records {
                println!("{}", serde_json::to_string(&r)?);
            }
        }
        Command::Export { input, output, views, res } => {
            print_paths(&pipeline::export(&input, &output, views, res, cfg.eval.seed)?)
        }
        Command::PrintConfig { reference } => {
            if reference {
                print!("{}", Config::reference());
            } else {
                print!("{}", cfg.to_toml());
            }
        }
    }
    Ok(())
}
