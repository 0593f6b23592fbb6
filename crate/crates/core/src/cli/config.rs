//! Run configuration: a sectioned TOML file, `--set section.key=value` overrides, and a
//! generated reference listing every key with its default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::diffusion::{DiffusionConfig, SampleMode};
use crate::error::{Error, Result};
use crate::metrics::EvalProtocol;
use crate::vae::VaeConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Print a progress line every this many training steps (0 = silent).
    pub log_every: usize,
    pub data: DataConfig,
    pub vae: VaeConfig,
    pub diffusion: DiffusionConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            log_every: 50,
            data: DataConfig::default(),
            vae: VaeConfig::default(),
            diffusion: DiffusionConfig::default(),
            sample: SampleConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Built-in names (`desk4`, `sphere`, `box`, `torus`, `sphere_box`) or paths to shape JSON.
    pub shapes: Vec<String>,
    pub preview_points: usize,
    pub preview_res: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { shapes: vec!["desk4".into()], preview_points: 4096, preview_res: 128 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub n: usize,
    /// Condition tags; empty means one batch per training shape name.
    pub tags: Vec<String>,
    pub mode: SampleMode,
    pub encoder: String,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { n: 4, tags: Vec::new(), mode: SampleMode::Ode, encoder: "toy".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub surface_samples: usize,
    pub views: usize,
    pub seed: u64,
    /// Surface points used for the texture error.
    pub color_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let p = EvalProtocol::default();
        Self { surface_samples: p.surface_samples, views: p.views, seed: p.seed, color_samples: 4096 }
    }
}

/// One-line description of every key, in reference-file order.
pub const KEY_DOCS: &[(&str, &str)] = &[
    ("seed", "root seed; every random stream derives from it by name"),
    ("out_dir", "directory receiving data, checkpoints, meshes, logs and metrics"),
    ("log_every", "progress line on stderr every N training steps (0 = silent)"),
    ("data.shapes", "built-in shape names (desk4 expands to all four) or paths to shape JSON files"),
    ("data.preview_points", "colored surface points written per shape by gen-data"),
    ("data.preview_res", "resolution of the gen-data ground-truth mask/depth previews"),
    ("vae.triplane_res", "latent plane resolution"),
    ("vae.channels", "latent channels per plane"),
    ("vae.textured", "encode colors and train the color head"),
    ("vae.point_hidden", "PointNet hidden width"),
    ("vae.point_channels", "PointNet output channels scattered to the planes"),
    ("vae.enc_widths", "encoder UNet channel widths per level"),
    ("vae.dec_widths", "decoder UNet channel widths per level"),
    ("vae.dec_channels", "channels of the refined triplane fed to the heads"),
    ("vae.head_width", "MLP head width"),
    ("vae.head_depth", "MLP head residual blocks"),
    ("vae.sdf_prior_radius", "radius of the sphere SDF added to the geometry head (0 = none)"),
    ("vae.lambda_smooth", "Laplacian smoothing weight"),
    ("vae.gamma_kl", "KL weight"),
    ("vae.grid_res_stage1", "tet grid resolution during stage 1"),
    ("vae.grid_res_stage2", "tet grid resolution during decoder finetuning and decoding"),
    ("vae.points", "input points per encoded cloud"),
    ("vae.color_points", "surface points supervising the color head per step"),
    ("vae.views", "rendered views per training step"),
    ("vae.render_res", "training render resolution"),
    ("vae.tau", "soft rasterizer edge sharpness (stage 1)"),
    ("vae.tau_stage2", "soft rasterizer edge sharpness for the decoder finetune"),
    ("vae.depth_gamma", "soft depth aggregation temperature"),
    ("vae.cam_radius_min", "minimum camera distance"),
    ("vae.cam_radius_max", "maximum camera distance"),
    ("vae.cam_elevation_deg", "camera elevation range is [-x, x] degrees"),
    ("vae.resize_min", "smallest latent resize during augmentation"),
    ("vae.resize_max", "largest latent resize during augmentation"),
    ("vae.lr", "initial learning rate (stage 1)"),
    ("vae.lr_stage2", "initial learning rate of the decoder finetune"),
    ("vae.lr_final_frac", "final learning rate as a fraction of the initial one"),
    ("vae.weight_decay", "decoupled weight decay"),
    ("vae.steps_stage1", "stage 1 training steps"),
    ("vae.steps_stage2", "decoder finetuning steps"),
    ("diffusion.latent_scale", "multiplier on VAE latents before diffusion"),
    ("diffusion.res", "diffusion plane resolution"),
    ("diffusion.timesteps", "number of noise levels T"),
    ("diffusion.cond_dim", "conditioning vector size"),
    ("diffusion.cond_dropout", "probability of zeroing the condition during training"),
    ("diffusion.guidance_scale", "classifier-free guidance scale"),
    ("diffusion.sampler_steps", "sampler steps"),
    ("diffusion.second_order", "second-order multistep correction in ode mode"),
    ("diffusion.widths", "UNet channel widths per level"),
    ("diffusion.time_dim", "sinusoidal timestep feature size"),
    ("diffusion.emb_dim", "timestep/condition embedding width"),
    ("diffusion.batch_size", "latents per training step"),
    ("diffusion.lr", "initial learning rate"),
    ("diffusion.lr_final_frac", "final learning rate as a fraction of the initial one"),
    ("diffusion.weight_decay", "decoupled weight decay"),
    ("diffusion.steps", "conditional training steps"),
    ("diffusion.uncond_steps", "unconditional finetuning steps"),
    ("sample.n", "samples per tag"),
    ("sample.tags", "condition tags; empty = the training shape names"),
    ("sample.mode", "ode or ancestral"),
    ("sample.encoder", "condition encoder name"),
    ("eval.surface_samples", "surface samples per mesh for Chamfer-L1"),
    ("eval.views", "fixed cameras for mask IoU"),
    ("eval.seed", "seed of the evaluation cameras and samples"),
    ("eval.color_samples", "ground-truth surface points for the texture error"),
];

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.vae.validate()?;
        self.diffusion.validate()?;
        if self.data.shapes.is_empty() {
            return Err(Error::Config("data.shapes is empty".into()));
        }
        if self.sample.n == 0 || self.eval.views == 0 || self.eval.surface_samples == 0 {
            return Err(Error::Config("sample.n, eval.views and eval.surface_samples must be > 0".into()));
        }
        Ok(())
    }

    /// Apply `section.key=value`. The value is parsed as a TOML value, falling back to a bare
    /// string. Unknown keys are rejected.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let key = key.trim();
        let value = parse_value(raw.trim());
        let mut root = Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_table_mut()
                .and_then(|t| t.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        }
        if slot.is_table() {
            return Err(Error::Config(format!("{key:?} is a section, not a key")));
        }
        *slot = value;
        let next: Config = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{key}: {}", e.message())))?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Every key with its default and a one-line description.
    pub fn reference() -> String {
        let root = Value::try_from(Config::default()).expect("config serializes");
        let mut out = String::from("# trigen configuration reference (generated; every key shown at its default)\n");
        let mut section = "";
        for (key, doc) in KEY_DOCS {
            let (sec, name) = key.rsplit_once('.').unwrap_or(("", key));
            if sec != section {
                out.push_str(&format!("\n[{sec}]\n"));
                section = sec;
            }
            let mut v = &root;
            for part in key.split('.') {
                v = &v[part];
            }
            out.push_str(&format!("# {doc}\n{name} = {v}\n"));
        }
        out
    }
}

fn parse_value(raw: &str) -> Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}
