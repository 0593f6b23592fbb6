//! Shared helpers: drive the CLI in-process and snapshot output trees.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Parser;
use trigen::cli::{run, Cli};

pub fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn config_path(name: &str) -> PathBuf {
    workspace_root().join("configs").join(format!("{name}.toml"))
}

/// Run one `trigen` invocation with `--config <config> --out <out>` prepended.
pub fn trigen(config: &Path, out: &Path, args: &[&str]) -> anyhow::Result<()> {
    let mut argv: Vec<String> = vec!["trigen".into(), "--config".into(), config.display().to_string()];
    argv.extend(["--out".into(), out.display().to_string()]);
    argv.extend(args.iter().map(|a| a.to_string()));
    run(Cli::try_parse_from(argv)?)
}

/// Every command in pipeline order, ending with an export of one sample.
pub fn pipeline_commands(out: &Path) -> Vec<Vec<String>> {
    let export_in = out.join("samples/box_000.tmesh").display().to_string();
    let export_out = out.join("export/box.ply").display().to_string();
    let cmds: Vec<Vec<&str>> = vec![
        vec!["gen-data"],
        vec!["train-vae"],
        vec!["finetune-decoder"],
        vec!["reconstruct"],
        vec!["eval"],
        vec!["train-diffusion"],
        vec!["finetune-uncond"],
        vec!["sample"],
        vec!["sample", "--uncond"],
        vec!["sample", "--uncond", "--tag", "torus"],
        vec!["eval", "--samples"],
        vec!["export", &export_in, &export_out, "--views", "2", "--res", "48"],
    ];
    cmds.into_iter().map(|c| c.into_iter().map(String::from).collect()).collect()
}

pub fn run_pipeline(config: &Path, out: &Path) -> anyhow::Result<()> {
    for cmd in pipeline_commands(out) {
        let args: Vec<&str> = cmd.iter().map(String::as_str).collect();
        trigen(config, out, &args).map_err(|e| e.context(format!("trigen {}", cmd.join(" "))))?;
    }
    Ok(())
}

/// Relative path → bytes for every file under `root`, skipping the timing logs.
pub fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                if p.file_name().is_some_and(|n| n != "logs") {
                    walk(&p, root, out);
                }
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Paths whose contents differ between two snapshots, plus paths present in only one.
pub fn differing(a: &BTreeMap<PathBuf, Vec<u8>>, b: &BTreeMap<PathBuf, Vec<u8>>) -> Vec<PathBuf> {
    let mut keys: Vec<&PathBuf> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter().filter(|k| a.get(*k) != b.get(*k)).cloned().collect()
}
