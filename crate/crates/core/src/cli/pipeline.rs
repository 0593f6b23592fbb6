//! The end-to-end stages behind each subcommand, as library functions.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use super::checkpoint::{mesh_from_checkpoint, mesh_to_checkpoint, Checkpoint};
use super::config::Config;
use super::ply::{export_ply, export_points_ply};
use crate::data::{desk4, desk4_shape, normalize_shape, sample_colored_pointcloud, sphere_trace_render, ShapeSpec};
use crate::diffusion::{
    condition_encoder, finetune_unconditional, sample, train_diffusion, DiffusionModel, SamplerOpts,
};
use crate::error::{Error, Result};
use crate::metrics::{chamfer_to_points, evaluate_mesh, EvalProtocol, MetricRecord};
use crate::numerics::rng::derive_seed;
use crate::render::{rasterize_hard, sample_camera, write_pfm, write_pgm, CameraDist};
use crate::tetmesh::TriMesh;
use crate::triplane::Triplane;
use crate::vae::{train_vae, Stage, Vae, ENCODER_PREFIX};

pub const VAE_STAGE1: &str = "vae_stage1.ckpt";
pub const VAE_STAGE2: &str = "vae_stage2.ckpt";
pub const DIFFUSION: &str = "diffusion.ckpt";
pub const DIFFUSION_UNCOND: &str = "diffusion_uncond.ckpt";
pub const LATENTS: &str = "latents.ckpt";

/// Output directory layout.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    pub fn log(&self, cmd: &str) -> PathBuf {
        self.root.join("logs").join(format!("{cmd}.jsonl"))
    }

    pub fn recon(&self) -> PathBuf {
        self.root.join("recon")
    }

    pub fn samples(&self) -> PathBuf {
        self.root.join("samples")
    }

    pub fn metrics(&self, name: &str) -> PathBuf {
        self.root.join("metrics").join(format!("{name}.jsonl"))
    }

    /// Stage-2 VAE checkpoint when present, else stage 1.
    pub fn latest_vae(&self) -> Result<PathBuf> {
        [VAE_STAGE2, VAE_STAGE1]
            .iter()
            .map(|n| self.checkpoint(n))
            .find(|p| p.exists())
            .ok_or_else(|| {
                Error::Checkpoint(format!(
                    "no VAE checkpoint under {}; run `trigen train-vae` first",
                    self.root.join("checkpoints").display()
                ))
            })
    }
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Checkpoint(format!("{} not found; {hint}", path.display())))
    }
}

/// Expand `data.shapes`: `desk4`, a desk4 member name, or a JSON file (normalized to the domain).
pub fn resolve_shapes(cfg: &Config) -> Result<Vec<ShapeSpec>> {
    let mut out = Vec::new();
    for entry in &cfg.data.shapes {
        if entry == "desk4" {
            out.extend(desk4());
        } else if entry.ends_with(".json") {
            let text = std::fs::read_to_string(entry)
                .map_err(|e| Error::Config(format!("cannot read shape file {entry}: {e}")))?;
            let spec: ShapeSpec =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("shape file {entry}: {e}")))?;
            spec.validate()?;
            out.push(normalize_shape(&spec, 4096, derive_seed(cfg.seed, &format!("data.normalize.{}", spec.name)))?);
        } else {
            out.push(desk4_shape(entry).map_err(|e| Error::Config(e.to_string()))?);
        }
    }
    let mut names: Vec<&str> = out.iter().map(|s| s.name.as_str()).collect();
    names.sort();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("data.shapes contains duplicate shape names".into()));
    }
    Ok(out)
}

pub fn eval_protocol(cfg: &Config) -> EvalProtocol {
    EvalProtocol {
        surface_samples: cfg.eval.surface_samples,
        views: cfg.eval.views,
        cameras: CameraDist::default(),
        seed: cfg.eval.seed,
    }
}

/// Line-delimited JSON writer.
pub struct JsonLines(BufWriter<File>);

impl JsonLines {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(d) = path.parent() {
            std::fs::create_dir_all(d)?;
        }
        Ok(Self(BufWriter::new(File::create(path)?)))
    }

    pub fn write<T: Serialize>(&mut self, v: &T) -> Result<()> {
        serde_json::to_writer(&mut self.0, v).map_err(|e| Error::Io(e.into()))?;
        self.0.write_all(b"\n")?;
        self.0.flush()?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.0.flush()?;
        Ok(())
    }
}

fn progress(cfg: &Config, step: usize, total: usize, msg: impl FnOnce() -> String) {
    if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == total) {
        eprintln!("{}", msg());
    }
}

// ---------------------------------------------------------------------------
// data

/// Write each shape's spec JSON, a colored surface cloud and a ground-truth mask/depth preview.
pub fn gen_data(cfg: &Config) -> Result<Vec<PathBuf>> {
    let layout = Layout::new(&cfg.out_dir);
    let dir = layout.data();
    std::fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    let cam_dist = CameraDist { resolution: cfg.data.preview_res, ..CameraDist::default() };
    let cam = sample_camera(derive_seed(cfg.seed, "data.preview.camera"), &cam_dist)?;
    for spec in resolve_shapes(cfg)? {
        let json_path = dir.join(format!("{}.json", spec.name));
        let text = serde_json::to_string_pretty(&spec).expect("shape serializes") + "\n";
        std::fs::write(&json_path, text)?;
        let cloud = sample_colored_pointcloud(
            &spec,
            cfg.data.preview_points,
            derive_seed(cfg.seed, &format!("data.cloud.{}", spec.name)),
        )?;
        let cloud_path = dir.join(format!("{}.cloud.ply", spec.name));
        export_points_ply(&cloud.points, Some(&cloud.colors), &cloud_path)?;
        let gt = sphere_trace_render(&spec, &cam);
        let mask_path = dir.join(format!("{}.mask.pgm", spec.name));
        let depth_path = dir.join(format!("{}.depth.pfm", spec.name));
        write_pgm(&mask_path, gt.width, gt.height, &gt.mask)?;
        write_pfm(&depth_path, gt.width, gt.height, &gt.depth)?;
        written.extend([json_path, cloud_path, mask_path, depth_path]);
    }
    Ok(written)
}

// ---------------------------------------------------------------------------
// vae

fn vae_meta(cfg: &Config, stage: Stage, steps: usize, shapes: &[ShapeSpec]) -> Value {
    json!({
        "kind": "vae",
        "stage": stage.number(),
        "steps": steps,
        "seed": cfg.seed,
        "shapes": shapes.iter().map(|s| s.name.clone()).collect::<Vec<_>>(),
        "config": cfg,
    })
}

pub fn save_vae(vae: &Vae, meta: Value, path: &Path) -> Result<()> {
    Checkpoint::from_store(meta, &vae.store).save(path)
}

/// Rebuild a VAE from a checkpoint's embedded config and load its tensors.
pub fn load_vae(path: &Path) -> Result<(Vae, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    if ck.meta["kind"] != "vae" {
        return Err(Error::Checkpoint(format!("{} is not a VAE checkpoint", path.display())));
    }
    let cfg: Config = serde_json::from_value(ck.meta["config"].clone())
        .map_err(|e| Error::Checkpoint(format!("{}: bad config snapshot: {e}", path.display())))?;
    let mut vae = Vae::new(cfg.vae, cfg.seed)?;
    ck.load_into(&mut vae.store)?;
    Ok((vae, ck))
}

/// Stage 1: train encoder and decoder from scratch.
pub fn train_vae_stage1(cfg: &Config) -> Result<PathBuf> {
    let layout = Layout::new(&cfg.out_dir);
    let shapes = resolve_shapes(cfg)?;
    let mut vae = Vae::new(cfg.vae.clone(), cfg.seed)?;
    let mut log = JsonLines::create(&layout.log("train-vae"))?;
    let total = cfg.vae.steps_stage1;
    train_vae(&mut vae, &shapes, Stage::One, cfg.seed, |l| {
        progress(cfg, l.step, total, || {
            format!("vae stage 1 step {}/{total} {} loss {:.5} faces {}", l.step, l.shape, l.loss.total, l.faces)
        });
        log.write(l)
    })?;
    log.finish()?;
    let path = layout.checkpoint(VAE_STAGE1);
    save_vae(&vae, vae_meta(cfg, Stage::One, total, &shapes), &path)?;
    Ok(path)
}

/// Stage 2: load the stage-1 checkpoint, freeze the encoder, finetune the decoder.
pub fn finetune_decoder(cfg: &Config, from: Option<&Path>) -> Result<PathBuf> {
    let layout = Layout::new(&cfg.out_dir);
    let src = from.map(Path::to_path_buf).unwrap_or_else(|| layout.checkpoint(VAE_STAGE1));
    require(&src, "run `trigen train-vae` first")?;
    let shapes = resolve_shapes(cfg)?;
    let mut vae = Vae::new(cfg.vae.clone(), cfg.seed)?;
    Checkpoint::load(&src)?.load_into(&mut vae.store)?;
    vae.store.set_frozen(ENCODER_PREFIX, true);
    let mut log = JsonLines::create(&layout.log("finetune-decoder"))?;
    let total = cfg.vae.steps_stage2;
    train_vae(&mut vae, &shapes, Stage::Two, cfg.seed, |l| {
        progress(cfg, l.step, total, || {
            format!("vae stage 2 step {}/{total} {} loss {:.5} faces {}", l.step, l.shape, l.loss.total, l.faces)
        });
        log.write(l)
    })?;
    log.finish()?;
    let path = layout.checkpoint(VAE_STAGE2);
    save_vae(&vae, vae_meta(cfg, Stage::Two, total, &shapes), &path)?;
    Ok(path)
}

fn cloud_seed(cfg: &Config, purpose: &str, name: &str) -> u64 {
    derive_seed(cfg.seed, &format!("{purpose}.cloud.{name}"))
}

/// Posterior means of the configured shapes, keyed by shape name.
pub fn encode_shapes(vae: &Vae, cfg: &Config, shapes: &[ShapeSpec]) -> Result<Vec<Triplane>> {
    shapes
        .iter()
        .map(|s| {
            let cloud = sample_colored_pointcloud(s, vae.cfg.points, cloud_seed(cfg, "encode", &s.name))?;
            Ok(vae.encode(&cloud)?.mu)
        })
        .collect()
}

fn write_mesh(mesh: &TriMesh, meta: Value, stem: &Path) -> Result<[PathBuf; 2]> {
    let internal = stem.with_extension("tmesh");
    let ply = stem.with_extension("ply");
    mesh_to_checkpoint(mesh, meta).save(&internal)?;
    export_ply(mesh, &ply)?;
    Ok([internal, ply])
}

/// Encode each configured shape with its posterior mean and decode at the stage-2 grid.
pub fn reconstruct(cfg: &Config, vae_ckpt: Option<&Path>) -> Result<Vec<PathBuf>> {
    let layout = Layout::new(&cfg.out_dir);
    let path = match vae_ckpt {
        Some(p) => p.to_path_buf(),
        None => layout.latest_vae()?,
    };
    let (vae, _) = load_vae(&path)?;
    let shapes = resolve_shapes(cfg)?;
    let latents = encode_shapes(&vae, cfg, &shapes)?;
    let mut out = Vec::new();
    for (s, z) in shapes.iter().zip(&latents) {
        let (mesh, _) = vae.decode(z, cfg.vae.grid_res_stage2, true)?;
        let meta = json!({"kind": "mesh", "source": "reconstruct", "shape": s.name});
        out.extend(write_mesh(&mesh, meta, &layout.recon().join(&s.name))?);
    }
    Ok(out)
}

/// Mean over ground-truth surface points of the mean absolute RGB error of the texture field.
pub fn texture_error(vae: &Vae, z: &Triplane, spec: &ShapeSpec, n: usize, seed: u64) -> Result<f64> {
    let field = vae.texture_field(z)?.ok_or_else(|| Error::Invalid("VAE has no color head (vae.textured = false)".into()))?;
    let gt = sample_colored_pointcloud(spec, n, seed)?;
    let pred = field.query(&gt.points)?;
    let err: f64 = pred
        .iter()
        .zip(&gt.colors)
        .map(|(p, g)| (0..3).map(|k| (p[k] - g[k]).abs()).sum::<f64>() / 3.0)
        .sum();
    Ok(err / n as f64)
}

// ---------------------------------------------------------------------------
// diffusion

fn diffusion_meta(cfg: &Config, phase: &str, channels: usize, vae_res: usize, tags: &[String], uncond: bool) -> Value {
    json!({
        "kind": "diffusion",
        "phase": phase,
        "seed": cfg.seed,
        "channels": channels,
        "vae_res": vae_res,
        "tags": tags,
        "unconditional": uncond,
        "config": cfg,
    })
}

pub fn load_diffusion(path: &Path) -> Result<(DiffusionModel, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    if ck.meta["kind"] != "diffusion" {
        return Err(Error::Checkpoint(format!("{} is not a diffusion checkpoint", path.display())));
    }
    let cfg: Config = serde_json::from_value(ck.meta["config"].clone())
        .map_err(|e| Error::Checkpoint(format!("{}: bad config snapshot: {e}", path.display())))?;
    let channels = ck.meta["channels"].as_u64().unwrap_or(0) as usize;
    let mut model = DiffusionModel::new(cfg.diffusion, channels, cfg.seed)?;
    ck.load_into(&mut model.store)?;
    model.unconditional = ck.meta["unconditional"].as_bool().unwrap_or(false);
    Ok((model, ck))
}

/// Latent dataset in diffusion space plus the shape tags, cached as `latents.ckpt`.
pub fn build_latents(cfg: &Config, vae: &Vae) -> Result<(Vec<Triplane>, Vec<String>)> {
    let shapes = resolve_shapes(cfg)?;
    let mus = encode_shapes(vae, cfg, &shapes)?;
    let latents = mus.iter().map(|m| cfg.diffusion.to_diffusion(m)).collect::<Result<Vec<_>>>()?;
    let tags: Vec<String> = shapes.iter().map(|s| s.name.clone()).collect();
    let mut ck = Checkpoint::new(json!({"kind": "latents", "tags": tags, "latent_scale": cfg.diffusion.latent_scale}));
    for (t, z) in tags.iter().zip(&latents) {
        ck.push_f64(t.clone(), z.planes().clone(), false);
    }
    ck.save(&Layout::new(&cfg.out_dir).checkpoint(LATENTS))?;
    Ok((latents, tags))
}

pub fn train_diffusion_cmd(cfg: &Config, vae_ckpt: Option<&Path>) -> Result<PathBuf> {
    let layout = Layout::new(&cfg.out_dir);
    let vae_path = match vae_ckpt {
        Some(p) => p.to_path_buf(),
        None => layout.latest_vae()?,
    };
    let (vae, _) = load_vae(&vae_path)?;
    let (latents, tags) = build_latents(cfg, &vae)?;
    let enc = condition_encoder(&cfg.sample.encoder, cfg.diffusion.cond_dim)?;
    let conds: Vec<_> = tags.iter().map(|t| enc.embed(t)).collect();
    let mut model = DiffusionModel::new(cfg.diffusion.clone(), vae.cfg.channels, cfg.seed)?;
    let mut log = JsonLines::create(&layout.log("train-diffusion"))?;
    let total = cfg.diffusion.steps;
    train_diffusion(&mut model, &latents, &conds, cfg.seed, |l| {
        progress(cfg, l.step, total, || format!("diffusion step {}/{total} loss {:.5}", l.step, l.loss));
        log.write(l)
    })?;
    log.finish()?;
    let path = layout.checkpoint(DIFFUSION);
    let meta = diffusion_meta(cfg, "cond", vae.cfg.channels, vae.cfg.triplane_res, &tags, false);
    Checkpoint::from_store(meta, &model.store).save(&path)?;
    Ok(path)
}

pub fn finetune_uncond_cmd(cfg: &Config, from: Option<&Path>) -> Result<PathBuf> {
    let layout = Layout::new(&cfg.out_dir);
    let src = from.map(Path::to_path_buf).unwrap_or_else(|| layout.checkpoint(DIFFUSION));
    require(&src, "run `trigen train-diffusion` first")?;
    let (mut model, ck) = load_diffusion(&src)?;
    // training hyperparameters from the current config, architecture from the checkpoint
    model.cfg.uncond_steps = cfg.diffusion.uncond_steps;
    model.cfg.lr = cfg.diffusion.lr;
    model.cfg.lr_final_frac = cfg.diffusion.lr_final_frac;
    let vae_path = layout.latest_vae()?;
    let (vae, _) = load_vae(&vae_path)?;
    let (latents, tags) = build_latents(cfg, &vae)?;
    let mut log = JsonLines::create(&layout.log("finetune-uncond"))?;
    let total = model.cfg.uncond_steps;
    finetune_unconditional(&mut model, &latents, cfg.seed, |l| {
        progress(cfg, l.step, total, || format!("uncond finetune step {}/{total} loss {:.5}", l.step, l.loss));
        log.write(l)
    })?;
    log.finish()?;
    let path = layout.checkpoint(DIFFUSION_UNCOND);
    let vae_res = ck.meta["vae_res"].as_u64().unwrap_or(vae.cfg.triplane_res as u64) as usize;
    let mut meta = diffusion_meta(cfg, "uncond", model.channels, vae_res, &tags, true);
    meta["config"]["diffusion"] = serde_json::to_value(&model.cfg).expect("config serializes");
    Checkpoint::from_store(meta, &model.store).save(&path)?;
    Ok(path)
}

/// What `sample` generates.
#[derive(Clone, Debug)]
pub struct SampleRequest {
    /// Condition tags; empty tag strings mean unconditional.
    pub tags: Vec<String>,
    pub n: usize,
    pub diffusion_ckpt: Option<PathBuf>,
    pub vae_ckpt: Option<PathBuf>,
    pub unconditional: bool,
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub tag: String,
    pub index: usize,
    pub mesh: TriMesh,
    pub files: [PathBuf; 2],
}

/// Sample `n` latents per tag and decode them. Noise seeds depend only on the sample index.
pub fn sample_cmd(cfg: &Config, req: &SampleRequest) -> Result<Vec<SampleOutput>> {
    let layout = Layout::new(&cfg.out_dir);
    let dpath = req.diffusion_ckpt.clone().unwrap_or_else(|| {
        layout.checkpoint(if req.unconditional { DIFFUSION_UNCOND } else { DIFFUSION })
    });
    require(&dpath, "train the diffusion model first")?;
    let (model, ck) = load_diffusion(&dpath)?;
    let vae_path = match &req.vae_ckpt {
        Some(p) => p.clone(),
        None => layout.latest_vae()?,
    };
    let (vae, _) = load_vae(&vae_path)?;
    let vae_res = ck.meta["vae_res"].as_u64().map_or(vae.cfg.triplane_res, |r| r as usize);
    let enc = condition_encoder(&cfg.sample.encoder, model.cfg.cond_dim)?;
    let tags: Vec<String> = if !req.tags.is_empty() {
        req.tags.clone()
    } else if req.unconditional {
        vec![String::new()]
    } else {
        ck.meta["tags"]
            .as_array()
            .map(|a| a.iter().filter_map(|t| t.as_str().map(String::from)).collect())
            .unwrap_or_default()
    };
    let mut opts = SamplerOpts::from_config(&model.cfg, cfg.sample.mode);
    opts.steps = cfg.diffusion.sampler_steps;
    opts.guidance = cfg.diffusion.guidance_scale;
    let mut out = Vec::new();
    for tag in &tags {
        let cond = enc.embed(tag);
        let label = match (req.unconditional, tag.is_empty()) {
            (_, true) => "uncond".to_string(),
            (true, false) => format!("uncond-{tag}"),
            (false, false) => tag.clone(),
        };
        for i in 0..req.n {
            let z = sample(&model, &cond, derive_seed(cfg.seed, &format!("sample.{i}")), &opts, vae_res)?;
            let (mesh, _) = vae.decode(&z, cfg.vae.grid_res_stage2, true)?;
            let meta = json!({"kind": "mesh", "source": "sample", "tag": tag, "index": i, "unconditional": req.unconditional});
            let files = write_mesh(&mesh, meta, &layout.samples().join(format!("{label}_{i:03}")))?;
            out.push(SampleOutput { tag: tag.clone(), index: i, mesh, files });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// evaluation

pub fn load_mesh(path: &Path) -> Result<TriMesh> {
    mesh_from_checkpoint(&Checkpoint::load(path)?)
}

fn tmesh_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Checkpoint(format!("cannot list {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "tmesh"))
        .collect();
    files.sort();
    Ok(files)
}

/// Chamfer/IoU of every reconstruction against its shape, plus texture error when textured.
pub fn eval_reconstructions(cfg: &Config, vae_ckpt: Option<&Path>) -> Result<Vec<MetricRecord>> {
    let layout = Layout::new(&cfg.out_dir);
    let proto = eval_protocol(cfg);
    let shapes = resolve_shapes(cfg)?;
    let vae = match vae_ckpt.map(Path::to_path_buf).or_else(|| layout.latest_vae().ok()) {
        Some(p) => Some(load_vae(&p)?.0),
        None => None,
    };
    let mut records = Vec::new();
    for s in &shapes {
        let path = layout.recon().join(format!("{}.tmesh", s.name));
        require(&path, "run `trigen reconstruct` first")?;
        let mesh = load_mesh(&path)?;
        records.extend(evaluate_mesh(&mesh, s, &proto)?.records(&s.name));
        if let Some(v) = vae.as_ref().filter(|v| v.cfg.textured) {
            let z = encode_shapes(v, cfg, std::slice::from_ref(s))?.remove(0);
            let seed = derive_seed(cfg.eval.seed, &format!("eval.color.{}", s.name));
            let value = texture_error(v, &z, s, cfg.eval.color_samples, seed)?;
            records.push(MetricRecord { sample: s.name.clone(), metric: "color_l1".into(), value });
        }
    }
    let mut w = JsonLines::create(&layout.metrics("recon"))?;
    for r in &records {
        w.write(r)?;
    }
    w.finish()?;
    Ok(records)
}

/// Chamfer of one mesh to every shape; `None` for empty meshes.
pub fn chamfer_to_shapes(mesh: &TriMesh, refs: &[(String, Vec<[f64; 3]>)], proto: &EvalProtocol) -> Result<Option<Vec<f64>>> {
    if mesh.faces.is_empty() {
        return Ok(None);
    }
    refs.iter().map(|(_, pts)| chamfer_to_points(mesh, pts, proto)).collect::<Result<Vec<_>>>().map(Some)
}

/// Surface samples of every shape under the evaluation protocol.
pub fn reference_points(shapes: &[ShapeSpec], proto: &EvalProtocol) -> Result<Vec<(String, Vec<[f64; 3]>)>> {
    shapes
        .iter()
        .map(|s| {
            let c = sample_colored_pointcloud(s, proto.surface_samples, derive_seed(proto.seed, "eval.gt"))?;
            Ok((s.name.clone(), c.points))
        })
        .collect()
}

/// For each sample mesh: Chamfer to every shape, whether its own tag is the strict nearest,
/// and watertightness. Per-tag match rates are appended as `match_rate` records.
pub fn eval_samples(cfg: &Config) -> Result<Vec<MetricRecord>> {
    let layout = Layout::new(&cfg.out_dir);
    let proto = eval_protocol(cfg);
    let shapes = resolve_shapes(cfg)?;
    let refs = reference_points(&shapes, &proto)?;
    let mut records = Vec::new();
    let mut rates: Vec<(String, usize, usize)> = Vec::new();
    for path in tmesh_files(&layout.samples())? {
        let ck = Checkpoint::load(&path)?;
        let mesh = mesh_from_checkpoint(&ck)?;
        let tag = match ck.meta["unconditional"].as_bool() {
            Some(true) => String::new(),
            _ => ck.meta["tag"].as_str().unwrap_or("").to_string(),
        };
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("?").to_string();
        let closed = !mesh.faces.is_empty() && crate::tetmesh::watertight_report(&mesh).is_closed;
        records.push(MetricRecord { sample: id.clone(), metric: "watertight".into(), value: closed as u8 as f64 });
        let d = chamfer_to_shapes(&mesh, &refs, &proto)?;
        if let Some(d) = &d {
            for ((name, _), v) in refs.iter().zip(d) {
                records.push(MetricRecord { sample: id.clone(), metric: format!("chamfer_to.{name}"), value: *v });
            }
        }
        if !tag.is_empty() {
            let hit = d.as_ref().is_some_and(|d| strict_nearest(&refs, d, &tag));
            records.push(MetricRecord { sample: id.clone(), metric: "match".into(), value: hit as u8 as f64 });
            match rates.iter_mut().find(|r| r.0 == tag) {
                Some(r) => {
                    r.1 += hit as usize;
                    r.2 += 1;
                }
                None => rates.push((tag, hit as usize, 1)),
            }
        }
    }
    for (tag, hit, n) in rates {
        records.push(MetricRecord { sample: tag, metric: "match_rate".into(), value: hit as f64 / n as f64 });
    }
    let mut w = JsonLines::create(&layout.metrics("samples"))?;
    for r in &records {
        w.write(r)?;
    }
    w.finish()?;
    Ok(records)
}

/// True when the distance to `tag` is strictly smaller than to every other shape.
pub fn strict_nearest(refs: &[(String, Vec<[f64; 3]>)], d: &[f64], tag: &str) -> bool {
    let Some(k) = refs.iter().position(|(n, _)| n == tag) else {
        return false;
    };
    d.iter().enumerate().all(|(j, &v)| j == k || d[k] < v)
}

// ---------------------------------------------------------------------------
// export

/// Convert an internal mesh file to PLY; optionally write hard-rasterized mask/depth views.
pub fn export(input: &Path, output: &Path, views: usize, res: usize, seed: u64) -> Result<Vec<PathBuf>> {
    let mesh = load_mesh(input)?;
    export_ply(&mesh, output)?;
    let mut out = vec![output.to_path_buf()];
    let dist = CameraDist { resolution: res, ..CameraDist::default() };
    for v in 0..views {
        let cam = sample_camera(derive_seed(seed, &format!("eval.view{v}")), &dist)?;
        let r = rasterize_hard(&mesh, &cam);
        let stem = output.with_extension("");
        let mask = PathBuf::from(format!("{}.view{v}.mask.pgm", stem.display()));
        let depth = PathBuf::from(format!("{}.view{v}.depth.pfm", stem.display()));
        write_pgm(&mask, r.width, r.height, &r.mask)?;
        write_pfm(&depth, r.width, r.height, &r.depth)?;
        out.extend([mask, depth]);
    }
    Ok(out)
}
