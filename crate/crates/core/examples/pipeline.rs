//! The whole command-line pipeline in-process at smoke scale: data, both VAE stages,
//! reconstruction, diffusion training, unconditional finetune, sampling, evaluation, export.
//!
//! `cargo run --release --example pipeline -- [out_dir]`

use clap::Parser;
use trigen::cli::{run, Cli};

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "runs/example".into());
    let config = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.toml");
    let sample = format!("{out}/samples/torus_000.tmesh");
    let ply = format!("{out}/torus_sample.ply");
    let steps: [&[&str]; 10] = [
        &["gen-data"],
        &["train-vae"],
        &["finetune-decoder"],
        &["reconstruct"],
        &["eval"],
        &["train-diffusion"],
        &["finetune-uncond"],
        &["sample", "--n", "2"],
        &["eval", "--samples"],
        &["export", &sample, &ply, "--views", "1"],
    ];
    for args in steps {
        eprintln!("== trigen {}", args.join(" "));
        let argv = ["trigen", "--config", config, "--out", &out].into_iter().chain(args.iter().copied());
        run(Cli::try_parse_from(argv)?)?;
    }
    Ok(())
}
