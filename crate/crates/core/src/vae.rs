//! Triplane VAE: point-cloud encoder to Gaussian triplane latents, UNet decoder with SDF,
//! deformation and color heads, differentiable marching tetrahedra, and staged training.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_colored_pointcloud, sphere_trace_render, ColoredCloud, Rgb, ShapeSpec};
use crate::error::{invalid, shape_err, Error, Result};
use crate::nets::{MlpHead, PointNet, UNet, UNetConfig};
use crate::numerics::optim::linear_decay;
use crate::numerics::rng::{derive_seed, substream};
use crate::numerics::{AdamW, Ctx, ParamStore, Tape, Tensor, Var};
use crate::render::{rasterize_soft, render_losses, sample_camera, CameraDist, RenderOut, SoftParams};
use crate::tetmesh::{
    bound_deform, bound_deform_var, crossing_points, extract_topology, laplacian_loss_var, mesh_from_topology,
    norm, TetGrid, TriMesh, Vec3,
};
use crate::triplane::{rollout_var, resize_var, sample_features, unroll_var, Triplane};

pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;
pub const ENCODER_PREFIX: &str = "enc.";
pub const DECODER_PREFIX: &str = "dec.";
const HEAD_CHUNK: usize = 8192;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    /// Latent plane resolution `H = W`.
    pub triplane_res: usize,
    /// Latent channels `C`.
    pub channels: usize,
    /// Encode colors and train the color head.
    pub textured: bool,
    pub point_hidden: usize,
    pub point_channels: usize,
    pub enc_widths: Vec<usize>,
    pub dec_widths: Vec<usize>,
    /// Channels of the refined triplane `z′`.
    pub dec_channels: usize,
    pub head_width: usize,
    pub head_depth: usize,
    /// Radius of a fixed sphere SDF added to the geometry head output; 0 disables it.
    pub sdf_prior_radius: f64,
    pub lambda_smooth: f64,
    pub gamma_kl: f64,
    pub grid_res_stage1: usize,
    pub grid_res_stage2: usize,
    pub points: usize,
    pub color_points: usize,
    pub views: usize,
    pub render_res: usize,
    /// Soft-rasterizer sharpness in stage 1.
    pub tau: f64,
    /// Sharper edges for the decoder finetune. A wide sigmoid fattens silhouettes and
    /// shrinks the fitted surface by about a pixel.
    pub tau_stage2: f64,
    pub depth_gamma: f64,
    pub cam_radius_min: f64,
    pub cam_radius_max: f64,
    pub cam_elevation_deg: f64,
    /// Resize-augmentation range for `z`; equal bounds at `triplane_res` disable it.
    pub resize_min: usize,
    pub resize_max: usize,
    /// Peak learning rate in stage 1.
    pub lr: f64,
    pub lr_stage2: f64,
    pub lr_final_frac: f64,
    pub weight_decay: f64,
    pub steps_stage1: usize,
    pub steps_stage2: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            triplane_res: 64,
            channels: 8,
            textured: true,
            point_hidden: 64,
            point_channels: 16,
            enc_widths: vec![16, 16, 32],
            dec_widths: vec![16, 32, 32],
            dec_channels: 16,
            head_width: 32,
            head_depth: 2,
            sdf_prior_radius: 0.6,
            lambda_smooth: 0.01,
            gamma_kl: 1e-6,
            grid_res_stage1: 48,
            grid_res_stage2: 64,
            points: 4096,
            color_points: 8192,
            views: 4,
            render_res: 256,
            tau: 1e-4,
            tau_stage2: 1e-5,
            depth_gamma: 0.01,
            cam_radius_min: 2.0,
            cam_radius_max: 3.0,
            cam_elevation_deg: 60.0,
            resize_min: 56,
            resize_max: 72,
            lr: 2e-3,
            lr_stage2: 5e-4,
            lr_final_frac: 0.1,
            weight_decay: 0.0,
            steps_stage1: 1200,
            steps_stage2: 300,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        let m = 1usize << self.dec_widths.len().saturating_sub(1);
        let me = 1usize << self.enc_widths.len().saturating_sub(1);
        let checks = [
            (self.lambda_smooth >= 0.0, "vae.lambda_smooth must be >= 0"),
            (self.gamma_kl >= 0.0, "vae.gamma_kl must be >= 0"),
            (self.channels > 0 && self.dec_channels > 0, "vae channels must be > 0"),
            (!self.enc_widths.is_empty() && !self.dec_widths.is_empty(), "UNet widths must be non-empty"),
            (self.triplane_res >= 2 && self.triplane_res % m == 0 && self.triplane_res % me == 0,
             "vae.triplane_res must be a multiple of 2^(levels-1) for both UNets"),
            (self.resize_min <= self.resize_max && self.resize_min >= m, "bad resize range"),
            (self.resize_min.div_ceil(m) * m <= self.resize_max, "resize range contains no valid resolution"),
            (self.grid_res_stage1 >= 1 && self.grid_res_stage2 >= 1, "grid resolutions must be >= 1"),
            (self.points > 0 && self.views > 0 && self.render_res > 0, "points, views, render_res must be > 0"),
            (!self.textured || self.color_points > 0, "textured mode needs color points"),
            (self.tau > 0.0 && self.tau_stage2 > 0.0 && self.depth_gamma > 0.0, "tau and depth_gamma must be > 0"),
            (self.sdf_prior_radius >= 0.0, "sdf_prior_radius must be >= 0"),
            (self.lr > 0.0 && self.lr_stage2 > 0.0 && (0.0..=1.0).contains(&self.lr_final_frac), "bad learning-rate schedule"),
            (self.cam_radius_min > 0.0 && self.cam_radius_min <= self.cam_radius_max, "bad camera radius range"),
            ((0.0..86.0).contains(&self.cam_elevation_deg), "cam_elevation_deg must be in [0, 86)"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        Ok(())
    }

    pub fn camera_dist(&self) -> CameraDist {
        let e = self.cam_elevation_deg.to_radians();
        CameraDist {
            radius: (self.cam_radius_min, self.cam_radius_max),
            elevation: (-e, e),
            resolution: self.render_res,
            ..CameraDist::default()
        }
    }

    pub fn soft_params(&self, stage: Stage) -> SoftParams {
        let tau = match stage {
            Stage::One => self.tau,
            Stage::Two => self.tau_stage2,
        };
        SoftParams { tau, gamma: self.depth_gamma }
    }

    pub fn lr(&self, stage: Stage) -> f64 {
        match stage {
            Stage::One => self.lr,
            Stage::Two => self.lr_stage2,
        }
    }

    pub fn grid_res(&self, stage: Stage) -> usize {
        match stage {
            Stage::One => self.grid_res_stage1,
            Stage::Two => self.grid_res_stage2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

/// Diagonal Gaussian over triplanes.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDist {
    pub mu: Triplane,
    pub logvar: Triplane,
}

pub struct Vae {
    pub cfg: VaeConfig,
    pub store: ParamStore,
    pub pointnet: PointNet,
    pub enc_unet: UNet,
    pub dec_unet: UNet,
    pub geo_head: MlpHead,
    pub color_head: Option<MlpHead>,
}

impl Vae {
    pub fn new(cfg: VaeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = substream(seed, "vae.init");
        let mut store = ParamStore::new();
        let color_dim = cfg.textured.then_some(8);
        let pointnet = PointNet::new(
            &mut store,
            "enc.points",
            color_dim,
            cfg.point_hidden,
            cfg.point_channels,
            cfg.triplane_res,
            &mut rng,
        );
        let enc_unet = UNet::new(
            &mut store,
            "enc.unet",
            UNetConfig {
                in_ch: cfg.point_channels,
                out_ch: 2 * cfg.channels,
                widths: cfg.enc_widths.clone(),
                blocks_per_level: 1,
                emb_dim: None,
                zero_init_out: false,
            },
            &mut rng,
        );
        let dec_unet = UNet::new(
            &mut store,
            "dec.unet",
            UNetConfig {
                in_ch: cfg.channels,
                out_ch: cfg.dec_channels,
                widths: cfg.dec_widths.clone(),
                blocks_per_level: 1,
                emb_dim: None,
                zero_init_out: false,
            },
            &mut rng,
        );
        let fdim = 3 * cfg.dec_channels;
        let geo_head = MlpHead::new(&mut store, "dec.geo", fdim, cfg.head_width, cfg.head_depth, 4, &mut rng);
        let color_head = cfg
            .textured
            .then(|| MlpHead::new(&mut store, "dec.color", fdim, cfg.head_width, cfg.head_depth, 3, &mut rng));
        if cfg.sdf_prior_radius > 0.0 {
            // start exactly at the prior sphere, undeformed
            for id in [geo_head.output.w, geo_head.output.b] {
                let shape = store.value(id).shape().to_vec();
                store.set_value(id, Tensor::zeros(&shape))?;
            }
        }
        Ok(Self { cfg, store, pointnet, enc_unet, dec_unet, geo_head, color_head })
    }

    pub fn encoder_param_count(&self) -> usize {
        self.store
            .iter()
            .filter(|(_, p)| p.name.starts_with(ENCODER_PREFIX))
            .map(|(_, p)| p.value.len())
            .sum()
    }

    /// `(mu, logvar)` as `[3, C, R, R]` vars; logvar clamped to `[−30, 20]`.
    pub fn encode_var<'t>(&self, ctx: &Ctx<'t, '_>, cloud: &ColoredCloud) -> Result<(Var<'t>, Var<'t>)> {
        if cloud.is_empty() {
            return invalid("cannot encode an empty point cloud");
        }
        let pts = cloud.points_tensor();
        let cols = self.cfg.textured.then(|| cloud.colors_tensor());
        let raw = self.pointnet.forward(ctx, &pts, cols.as_ref())?;
        let h = self.enc_unet.forward(ctx, rollout_var(raw)?, None)?;
        let c = self.cfg.channels;
        let mu = unroll_var(h.narrow(0, 0, c)?)?;
        let lv = unroll_var(h.narrow(0, c, c)?)?.clamp(LOGVAR_MIN, LOGVAR_MAX)?;
        Ok((mu, lv))
    }

    pub fn encode(&self, cloud: &ColoredCloud) -> Result<LatentDist> {
        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, &self.store);
        let (mu, lv) = self.encode_var(&ctx, cloud)?;
        Ok(LatentDist { mu: Triplane::new((*mu.value()).clone())?, logvar: Triplane::new((*lv.value()).clone())? })
    }

    /// Refined triplane `z′ = UNet(z)`, `[3, C′, R, R]`.
    pub fn refine_var<'t>(&self, ctx: &Ctx<'t, '_>, z: Var<'t>) -> Result<Var<'t>> {
        unroll_var(self.dec_unet.forward(ctx, rollout_var(z)?, None)?)
    }

    pub fn refine(&self, z: &Triplane) -> Result<Tensor> {
        if !z.planes().is_finite() {
            return Err(Error::NonFinite("decode input".into()));
        }
        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, &self.store);
        Ok((*self.refine_var(&ctx, tape.constant(z.planes().clone()))?.value()).clone())
    }

    fn prior(&self, p: Vec3) -> f64 {
        if self.cfg.sdf_prior_radius > 0.0 {
            norm(p) - self.cfg.sdf_prior_radius
        } else {
            0.0
        }
    }

    /// SDF `[N]` and raw deformation `[N, 3]` at `points` from refined planes.
    pub fn geometry_var<'t>(&self, ctx: &Ctx<'t, '_>, zp: Var<'t>, points: &[Vec3]) -> Result<(Var<'t>, Var<'t>)> {
        let tape = ctx.tape();
        let n = points.len();
        let pts = Tensor::from_parts(vec![n, 3], points.iter().flatten().copied().collect());
        let out = self.geo_head.forward(ctx, sample_features(zp, tape.constant(pts))?)?;
        let prior = Tensor::from_parts(vec![n], points.iter().map(|&p| self.prior(p)).collect());
        let s = out.narrow(1, 0, 1)?.reshape(&[n])?.add(tape.constant(prior))?;
        Ok((s, out.narrow(1, 1, 3)?))
    }

    /// Non-differentiable SDF and bounded deformation at every vertex of `grid`.
    pub fn grid_field(&self, zp: &Tensor, grid: &TetGrid) -> Result<(Vec<f64>, Vec<Vec3>)> {
        let mut s = Vec::with_capacity(grid.num_vertices());
        let mut d = Vec::with_capacity(grid.num_vertices());
        for chunk in grid.vertices.chunks(HEAD_CHUNK) {
            let tape = Tape::no_grad();
            let ctx = Ctx::new(&tape, &self.store);
            let (sv, dv) = self.geometry_var(&ctx, tape.constant(zp.clone()), chunk)?;
            s.extend_from_slice(sv.value().data());
            let raw = dv.value();
            d.extend(raw.data().chunks(3).map(|c| [0, 1, 2].map(|k| bound_deform(c[k], grid.res))));
        }
        Ok((s, d))
    }

    pub fn colors_var<'t>(&self, ctx: &Ctx<'t, '_>, zp: Var<'t>, points: &Tensor) -> Result<Var<'t>> {
        let head = self.color_head.as_ref().ok_or_else(|| Error::Invalid("geometry-only VAE has no color head".into()))?;
        head.forward(ctx, sample_features(zp, ctx.tape().constant(points.clone()))?)?.sigmoid()
    }

    /// Decode a latent to a mesh at `grid_res`; vertex colors when requested and available.
    pub fn decode(&self, z: &Triplane, grid_res: usize, want_color: bool) -> Result<(TriMesh, Option<TextureField<'_>>)> {
        let zp = self.refine(z)?;
        let grid = TetGrid::build(grid_res)?;
        let (s, d) = self.grid_field(&zp, &grid)?;
        let topo = extract_topology(&grid, &s)?;
        let mut mesh = mesh_from_topology(&grid, &topo, &s, &d);
        let field = self.color_head.as_ref().map(|_| TextureField { vae: self, zp });
        if want_color {
            if let Some(f) = &field {
                if !mesh.vertices.is_empty() {
                    mesh.colors = Some(f.query(&mesh.vertices)?);
                }
            }
        }
        Ok((mesh, field))
    }

    /// Color field of a latent; `None` for geometry-only models.
    pub fn texture_field(&self, z: &Triplane) -> Result<Option<TextureField<'_>>> {
        if self.color_head.is_none() {
            return Ok(None);
        }
        Ok(Some(TextureField { vae: self, zp: self.refine(z)? }))
    }

    /// Encode with the posterior mean and decode.
    pub fn reconstruct(&self, cloud: &ColoredCloud, grid_res: usize) -> Result<(TriMesh, Option<TextureField<'_>>)> {
        let dist = self.encode(cloud)?;
        self.decode(&dist.mu, grid_res, true)
    }
}

/// Surface color query bound to one refined triplane.
pub struct TextureField<'a> {
    vae: &'a Vae,
    zp: Tensor,
}

impl TextureField<'_> {
    pub fn query(&self, points: &[Vec3]) -> Result<Vec<Rgb>> {
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(HEAD_CHUNK) {
            let tape = Tape::no_grad();
            let ctx = Ctx::new(&tape, &self.vae.store);
            let t = Tensor::from_parts(vec![chunk.len(), 3], chunk.iter().flatten().copied().collect());
            let c = self.vae.colors_var(&ctx, tape.constant(self.zp.clone()), &t)?;
            out.extend(c.value().data().chunks(3).map(|c| [c[0], c[1], c[2]]));
        }
        Ok(out)
    }
}

/// `z = mu + exp(logvar / 2) ∘ ε` with `ε ~ N(0, 1)` drawn from `rng`.
pub fn reparam_var<'t, R: Rng + ?Sized>(mu: Var<'t>, logvar: Var<'t>, rng: &mut R) -> Result<Var<'t>> {
    let eps = Tensor::randn(&mu.shape(), rng);
    mu.add(logvar.mul_scalar(0.5)?.exp()?.mul(mu.tape().constant(eps))?)
}

pub fn reparam_sample(dist: &LatentDist, seed: u64) -> Result<Triplane> {
    let tape = Tape::no_grad();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = reparam_var(tape.constant(dist.mu.planes().clone()), tape.constant(dist.logvar.planes().clone()), &mut rng)?;
    Triplane::new((*z.value()).clone())
}

/// `½ Σ (mu² + e^logvar − 1 − logvar)` for a single item.
pub fn kl_var<'t>(mu: Var<'t>, logvar: Var<'t>) -> Result<Var<'t>> {
    mu.square()?.add(logvar.exp()?)?.sub(logvar)?.add_scalar(-1.0)?.sum()?.mul_scalar(0.5)
}

/// KL divergence to the standard normal, averaged over the batch.
pub fn kl_divergence(batch: &[LatentDist]) -> Result<f64> {
    if batch.is_empty() {
        return invalid("kl of an empty batch");
    }
    let mut total = 0.0;
    for d in batch {
        let mut acc = 0.0;
        for (&m, &lv) in d.mu.planes().data().iter().zip(d.logvar.planes().data()) {
            acc += m * m + lv.exp() - 1.0 - lv;
        }
        total += 0.5 * acc;
    }
    Ok(total / batch.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mask: f64,
    pub depth: f64,
    pub smooth: f64,
    pub kl: f64,
    pub color: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Weighted sum in the same order the total is accumulated.
    pub fn weighted_sum(&self) -> f64 {
        self.mask + self.depth + self.smooth * self.lambda + self.kl * self.gamma + self.color
    }
}

/// `mean‖c − c_gt‖₁ + mean‖c − c_gt‖²₂` over points (norms across the rgb channels).
pub fn color_loss<'t>(pred: Var<'t>, gt: &Tensor) -> Result<Var<'t>> {
    if pred.shape() != gt.shape() || gt.rank() != 2 || gt.shape()[1] != 3 {
        return shape_err("color_loss", format!("{:?} vs {:?}", pred.shape(), gt.shape()));
    }
    let n = gt.shape()[0] as f64;
    let d = pred.sub(pred.tape().constant(gt.clone()))?;
    d.abs()?.sum()?.mul_scalar(1.0 / n)?.add(d.square()?.sum()?.mul_scalar(1.0 / n)?)
}

/// Predicted surface for one training step.
pub struct SurfaceVar<'t> {
    pub positions: Option<Var<'t>>,
    pub faces: Vec<[u32; 3]>,
}

/// `L = L_mask + L_depth + λ·L_smooth + γ·KL (+ L_color)`, render terms averaged over views.
/// `preds` are soft renders `[2, H, W]` aligned with `gts`.
#[allow(clippy::too_many_arguments)]
pub fn vae_loss<'t>(
    tape: &'t Tape,
    preds: &[Var<'t>],
    gts: &[RenderOut],
    surface: &SurfaceVar<'t>,
    mu: Var<'t>,
    logvar: Var<'t>,
    colors: Option<(Var<'t>, &Tensor)>,
    lambda: f64,
    gamma: f64,
) -> Result<(Var<'t>, LossBreakdown)> {
    if preds.len() != gts.len() || preds.is_empty() {
        return invalid("vae_loss needs one prediction per ground-truth view");
    }
    let mut lm: Option<Var<'t>> = None;
    let mut ld: Option<Var<'t>> = None;
    for (p, g) in preds.iter().zip(gts) {
        let (m, d) = render_losses(*p, g)?;
        lm = Some(match lm { Some(a) => a.add(m)?, None => m });
        ld = Some(match ld { Some(a) => a.add(d)?, None => d });
    }
    let k = 1.0 / preds.len() as f64;
    let lm = lm.expect("non-empty").mul_scalar(k)?;
    let ld = ld.expect("non-empty").mul_scalar(k)?;
    let smooth = match surface.positions {
        Some(p) if !surface.faces.is_empty() => laplacian_loss_var(p, &surface.faces)?,
        _ => tape.constant(Tensor::scalar(0.0)),
    };
    let kl = kl_var(mu, logvar)?;
    let mut total = lm.add(ld)?.add(smooth.mul_scalar(lambda)?)?.add(kl.mul_scalar(gamma)?)?;
    let mut color = 0.0;
    if let Some((pred, gt)) = colors {
        let lc = color_loss(pred, gt)?;
        color = lc.item();
        total = total.add(lc)?;
    }
    let b = LossBreakdown {
        mask: lm.item(),
        depth: ld.item(),
        smooth: smooth.item(),
        kl: kl.item(),
        color,
        lambda,
        gamma,
        total: total.item(),
    };
    Ok((total, b))
}

/// Ground truth for one optimization step on one shape.
pub struct StepData {
    pub cloud: ColoredCloud,
    pub color_cloud: Option<ColoredCloud>,
    pub cameras: Vec<crate::render::Camera>,
    pub gts: Vec<RenderOut>,
    pub eps_seed: u64,
    pub resize_to: usize,
}

impl Vae {
    pub fn step_data(&self, shape: &ShapeSpec, seed: u64, augment: bool) -> Result<StepData> {
        let cfg = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cloud = sample_colored_pointcloud(shape, cfg.points, rng.gen())?;
        let color_cloud = if cfg.textured {
            Some(sample_colored_pointcloud(shape, cfg.color_points, rng.gen())?)
        } else {
            None
        };
        let dist = cfg.camera_dist();
        let mut cameras = Vec::with_capacity(cfg.views);
        let mut gts = Vec::with_capacity(cfg.views);
        for _ in 0..cfg.views {
            let cam = sample_camera(rng.gen(), &dist)?;
            gts.push(sphere_trace_render(shape, &cam));
            cameras.push(cam);
        }
        let eps_seed = rng.gen();
        let m = self.dec_unet.res_multiple();
        let (lo, hi) = (cfg.resize_min.div_ceil(m), cfg.resize_max / m);
        let pick = rng.gen_range(lo..=hi) * m;
        let resize_to = if augment { pick } else { cfg.triplane_res };
        Ok(StepData { cloud, color_cloud, cameras, gts, eps_seed, resize_to })
    }

    /// Forward pass of the full training objective on `tape`.
    pub fn step_loss<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        data: &StepData,
        grid: &TetGrid,
        soft: SoftParams,
    ) -> Result<(Var<'t>, LossBreakdown, usize)> {
        let tape = ctx.tape();
        let (mu, lv) = self.encode_var(ctx, &data.cloud)?;
        let mut rng = ChaCha8Rng::seed_from_u64(data.eps_seed);
        let mut z = reparam_var(mu, lv, &mut rng)?;
        if data.resize_to != self.cfg.triplane_res {
            z = resize_var(z, data.resize_to)?;
        }
        let zp = self.refine_var(ctx, z)?;
        let (s_all, _) = self.grid_field(&zp.value(), grid)?;
        let topo = extract_topology(grid, &s_all)?;
        let surface = if topo.faces.is_empty() {
            SurfaceVar { positions: None, faces: Vec::new() }
        } else {
            let used: Vec<Vec3> = topo.used.iter().map(|&g| grid.vertices[g as usize]).collect();
            let (s, raw) = self.geometry_var(ctx, zp, &used)?;
            let d = bound_deform_var(raw, grid.res)?;
            SurfaceVar { positions: Some(crossing_points(grid, &topo, s, d)?), faces: topo.faces.clone() }
        };
        let mut preds = Vec::with_capacity(data.cameras.len());
        for cam in &data.cameras {
            preds.push(match surface.positions {
                Some(p) => rasterize_soft(p, &surface.faces, cam, soft)?,
                None => {
                    let bg = RenderOut::background(cam);
                    tape.constant(Tensor::from_parts(vec![2, cam.height, cam.width], [bg.mask, bg.depth].concat()))
                }
            });
        }
        let colors = match &data.color_cloud {
            Some(cc) => Some((self.colors_var(ctx, zp, &cc.points_tensor())?, cc.colors_tensor())),
            None => None,
        };
        let (total, b) = vae_loss(
            tape,
            &preds,
            &data.gts,
            &surface,
            mu,
            lv,
            colors.as_ref().map(|(p, g)| (*p, g)),
            self.cfg.lambda_smooth,
            self.cfg.gamma_kl,
        )?;
        Ok((total, b, surface.faces.len()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeLogLine {
    pub stage: u8,
    pub step: usize,
    pub shape: String,
    pub lr: f64,
    pub faces: usize,
    pub loss: LossBreakdown,
    pub wall_s: f64,
}

/// One stage of training. Stage 2 freezes the encoder. Shapes are visited round-robin and
/// every step draws its data from its own seeded sub-stream.
pub fn train_vae(
    vae: &mut Vae,
    shapes: &[ShapeSpec],
    stage: Stage,
    seed: u64,
    mut on_step: impl FnMut(&VaeLogLine) -> Result<()>,
) -> Result<Vec<VaeLogLine>> {
    if shapes.is_empty() {
        return invalid("train_vae needs at least one shape");
    }
    let steps = match stage {
        Stage::One => vae.cfg.steps_stage1,
        Stage::Two => vae.cfg.steps_stage2,
    };
    vae.store.set_frozen(ENCODER_PREFIX, stage == Stage::Two);
    let grid = TetGrid::build(vae.cfg.grid_res(stage))?;
    let mut opt = AdamW::new(&vae.store, vae.cfg.weight_decay);
    let soft = vae.cfg.soft_params(stage);
    let augment = vae.cfg.resize_min != vae.cfg.triplane_res || vae.cfg.resize_max != vae.cfg.triplane_res;
    let start = Instant::now();
    let mut log = Vec::with_capacity(steps);
    for step in 0..steps {
        let shape = &shapes[step % shapes.len()];
        let data = vae.step_data(shape, derive_seed(seed, &format!("vae.stage{}.step{step}", stage.number())), augment)?;
        let lr = linear_decay(vae.cfg.lr(stage), step, steps, vae.cfg.lr_final_frac);
        let (b, faces) = {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &vae.store);
            let (total, b, faces) = vae.step_loss(&ctx, &data, &grid, soft)?;
            if !b.total.is_finite() {
                return Err(Error::NonFinite(format!("vae loss at stage {} step {step}: {b:?}", stage.number())));
            }
            let bindings = ctx.bindings();
            let grads = tape.backward(total)?;
            drop(ctx);
            vae.store.accumulate(&bindings, &grads)?;
            (b, faces)
        };
        opt.step(&mut vae.store, lr);
        let line = VaeLogLine {
            stage: stage.number(),
            step,
            shape: shape.name.clone(),
            lr,
            faces,
            loss: b,
            wall_s: start.elapsed().as_secs_f64(),
        };
        on_step(&line)?;
        log.push(line);
    }
    Ok(log)
}
