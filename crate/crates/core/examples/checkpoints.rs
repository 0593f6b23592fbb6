//! Checkpoint files and run configuration: save a parameter store with metadata, detect
//! corruption, and apply `section.key=value` overrides.

use trigen::cli::checkpoint::Checkpoint;
use trigen::cli::Config;
use trigen::numerics::{ParamStore, Tensor};

fn main() -> anyhow::Result<()> {
    let mut store = ParamStore::new();
    store.add("enc.w", Tensor::full(&[2, 3], 0.5));
    store.add("dec.b", Tensor::from_vec(vec![1.0, -2.0]));
    store.set_frozen("enc.", true);

    let dir = tempfile_dir()?;
    let path = dir.join("demo.ckpt");
    Checkpoint::from_store(serde_json::json!({"kind": "demo", "step": 10}), &store).save(&path)?;
    let back = Checkpoint::load(&path)?;
    println!("{} tensors, meta {}", back.tensors.len(), back.meta);
    let mut restored = store.clone();
    for p in restored.iter_mut() {
        p.value = Tensor::zeros(p.value.shape());
    }
    back.load_into(&mut restored)?;
    println!("restored values match: {}", restored.iter().zip(store.iter()).all(|(a, b)| a.1.value == b.1.value));

    let mut bytes = std::fs::read(&path)?;
    let k = bytes.len() - 40;
    bytes[k] ^= 1;
    println!("flipped one byte: {}", Checkpoint::from_bytes(&bytes).unwrap_err());

    let mut cfg = Config::default();
    cfg.set("vae.triplane_res=32")?;
    cfg.set("diffusion.guidance_scale=3.5")?;
    println!("overrides: vae.triplane_res = {}, diffusion.guidance_scale = {}", cfg.vae.triplane_res, cfg.diffusion.guidance_scale);
    println!("rejected: {}", cfg.set("vae.bogus=1").unwrap_err());
    Ok(())
}

fn tempfile_dir() -> std::io::Result<std::path::PathBuf> {
    let d = std::env::temp_dir().join("trigen-checkpoints");
    std::fs::create_dir_all(&d)?;
    Ok(d)
}
