//! Latent diffusion over rolled-out triplanes: cosine schedule, v-prediction, classifier-free
//! guidance, and deterministic exponential-integrator sampling.

use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::nets::{CondInject, TimeEmbed, UNet, UNetConfig};
use crate::numerics::optim::cosine_decay;
use crate::numerics::rng::{derive_seed, substream};
use crate::numerics::{AdamW, Ctx, ParamStore, Tape, Tensor, Var};
use crate::triplane::Triplane;

/// Offset of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub alpha: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return invalid(format!("timestep {t} outside [0, {})", self.steps()));
        }
        Ok(())
    }
}

/// `α(u) = cos(½π (u + s)/(1 + s))` for continuous `u = t/T ∈ [0, 1]`.
pub fn cosine_alpha(u: f64) -> f64 {
    (0.5 * std::f64::consts::PI * (u + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)).cos()
}

pub fn cosine_schedule(steps: usize) -> Result<NoiseSchedule> {
    if steps < 2 {
        return invalid(format!("noise schedule needs T >= 2, got {steps}"));
    }
    let alpha: Vec<f64> = (0..steps).map(|t| cosine_alpha(t as f64 / steps as f64)).collect();
    let sigma = alpha.iter().map(|a| (1.0 - a * a).sqrt()).collect();
    Ok(NoiseSchedule { alpha, sigma })
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn axpby(a: f64, x: &Tensor, b: f64, y: &Tensor) -> Tensor {
    x.zip_map(y, |x, y| a * x + b * y).expect("shapes checked by caller")
}

/// `z_t = α_t z0 + σ_t ε`.
pub fn q_sample(z0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check(t)?;
    same_shape("q_sample", z0, eps)?;
    Ok(axpby(sched.alpha[t], z0, sched.sigma[t], eps))
}

/// `v = α_t ε − σ_t z0`.
pub fn v_target(z0: &Tensor, eps: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check(t)?;
    same_shape("v_target", z0, eps)?;
    Ok(axpby(sched.alpha[t], eps, -sched.sigma[t], z0))
}

/// `(ẑ0, ε̂) = (α z_t − σ v, σ z_t + α v)`.
pub fn invert_v(z_t: &Tensor, v: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<(Tensor, Tensor)> {
    sched.check(t)?;
    same_shape("invert_v", z_t, v)?;
    let (a, s) = (sched.alpha[t], sched.sigma[t]);
    Ok((axpby(a, z_t, -s, v), axpby(s, z_t, a, v)))
}

/// Sampling time grid `round(linspace(T−1, 0, n))`, strictly decreasing after deduplication.
pub fn time_grid(total: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return invalid("sampler needs at least one step");
    }
    if n == 1 {
        return Ok(vec![total - 1]);
    }
    let last = (total - 1) as f64;
    let mut g: Vec<usize> = (0..n)
        .map(|i| (last * (1.0 - i as f64 / (n - 1) as f64)).round() as usize)
        .collect();
    g.dedup();
    Ok(g)
}

// ---------------------------------------------------------------------------
// conditioning

/// Maps a tag to a conditioning vector; the empty tag is the unconditional zero vector.
pub trait ConditionEncoder {
    fn dim(&self) -> usize;
    fn embed(&self, tag: &str) -> Tensor;
}

/// Seeded-hash stand-in for a learned text/image encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ToyEncoder {
    pub dim: usize,
}

impl ConditionEncoder for ToyEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, tag: &str) -> Tensor {
        toy_condition_embed(tag, self.dim)
    }
}

/// Look up an encoder by name. Only `"toy"` ships.
pub fn condition_encoder(name: &str, dim: usize) -> Result<Box<dyn ConditionEncoder>> {
    match name {
        "toy" => Ok(Box::new(ToyEncoder { dim })),
        other => Err(Error::Config(format!("unknown condition encoder {other:?} (available: toy)"))),
    }
}

/// Unit-norm Gaussian vector seeded by the tag.
pub fn toy_condition_embed(tag: &str, dim: usize) -> Tensor {
    if tag.is_empty() {
        return Tensor::zeros(&[dim]);
    }
    let mut rng = substream(0, &format!("cond.tag:{tag}"));
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    Tensor::from_vec(v.into_iter().map(|x| x / n).collect())
}

// ---------------------------------------------------------------------------
// model

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    /// Multiplier applied to VAE latents before diffusion.
    pub latent_scale: f64,
    /// Plane resolution the diffusion model works at.
    pub res: usize,
    pub timesteps: usize,
    pub cond_dim: usize,
    pub cond_dropout: f64,
    pub guidance_scale: f64,
    pub sampler_steps: usize,
    /// Use the second-order multistep correction in ODE mode.
    pub second_order: bool,
    pub widths: Vec<usize>,
    pub time_dim: usize,
    pub emb_dim: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_final_frac: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub uncond_steps: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            latent_scale: 0.1,
            res: 32,
            timesteps: 1000,
            cond_dim: 64,
            cond_dropout: 0.2,
            guidance_scale: 5.0,
            sampler_steps: 50,
            second_order: false,
            widths: vec![32, 64, 128],
            time_dim: 64,
            emb_dim: 128,
            batch_size: 4,
            lr: 1e-3,
            lr_final_frac: 0.05,
            weight_decay: 0.0,
            steps: 3000,
            uncond_steps: 300,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        let m = 1usize << self.widths.len().saturating_sub(1);
        let checks = [
            (self.latent_scale > 0.0 && self.latent_scale.is_finite(), "diffusion.latent_scale must be > 0"),
            ((0.0..=1.0).contains(&self.cond_dropout), "diffusion.cond_dropout must be in [0, 1]"),
            (self.timesteps >= 2, "diffusion.timesteps must be >= 2"),
            (self.sampler_steps >= 1, "diffusion.sampler_steps must be >= 1"),
            (!self.widths.is_empty(), "diffusion.widths must be non-empty"),
            (self.res >= 2 && self.res % m == 0, "diffusion.res must be a multiple of 2^(levels-1)"),
            (self.time_dim >= 4 && self.time_dim % 2 == 0, "diffusion.time_dim must be even and >= 4"),
            (self.cond_dim > 0 && self.emb_dim > 0 && self.batch_size > 0, "dims and batch size must be > 0"),
            (self.lr > 0.0 && (0.0..=1.0).contains(&self.lr_final_frac), "bad learning-rate schedule"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        Ok(())
    }

    /// VAE posterior mean → diffusion space: scale first, then resize.
    pub fn to_diffusion(&self, mu: &Triplane) -> Result<Triplane> {
        let z = mu.scale(self.latent_scale);
        if z.res() == self.res {
            Ok(z)
        } else {
            z.resize(self.res)
        }
    }

    /// Diffusion sample → VAE latent at `vae_res`.
    pub fn to_vae(&self, z: &Triplane, vae_res: usize) -> Result<Triplane> {
        let z = z.scale(1.0 / self.latent_scale);
        if z.res() == vae_res {
            Ok(z)
        } else {
            z.resize(vae_res)
        }
    }
}

/// Anything that predicts `v` from a rolled-out `z_t` `[C, R, 3R]`, a timestep and a condition.
pub trait VModel {
    fn predict_v(&self, z_t: &Tensor, t: usize, cond: &Tensor) -> Result<Tensor>;

    /// True when the condition pathway is zeroed out.
    fn unconditional(&self) -> bool {
        false
    }
}

impl<F: Fn(&Tensor, usize, &Tensor) -> Result<Tensor>> VModel for F {
    fn predict_v(&self, z_t: &Tensor, t: usize, cond: &Tensor) -> Result<Tensor> {
        self(z_t, t, cond)
    }
}

pub struct DiffusionModel {
    pub cfg: DiffusionConfig,
    pub channels: usize,
    pub store: ParamStore,
    pub time: TimeEmbed,
    pub cond: CondInject,
    pub unet: UNet,
    pub unconditional: bool,
}

impl DiffusionModel {
    pub fn new(cfg: DiffusionConfig, channels: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if channels == 0 {
            return invalid("diffusion model needs at least one latent channel");
        }
        let mut rng = substream(seed, "diffusion.init");
        let mut store = ParamStore::new();
        let time = TimeEmbed::new(&mut store, "diff.time", cfg.time_dim, cfg.emb_dim, cfg.timesteps, &mut rng);
        let cond = CondInject::new(&mut store, "diff.cond", cfg.cond_dim, cfg.emb_dim, &mut rng);
        let unet = UNet::new(
            &mut store,
            "diff.unet",
            UNetConfig {
                in_ch: channels,
                out_ch: channels,
                widths: cfg.widths.clone(),
                blocks_per_level: 1,
                emb_dim: Some(cfg.emb_dim),
                zero_init_out: true,
            },
            &mut rng,
        );
        Ok(Self { cfg, channels, store, time, cond, unet, unconditional: false })
    }

    pub fn schedule(&self) -> NoiseSchedule {
        cosine_schedule(self.cfg.timesteps).expect("validated config")
    }

    /// `[C, R, 3R]` → predicted `v` of the same shape.
    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, z_t: Var<'t>, t: usize, cond: &Tensor) -> Result<Var<'t>> {
        let te = self.time.forward(ctx, t)?;
        let emb = self.cond.forward(ctx, cond, te)?;
        self.unet.forward(ctx, z_t, Some(emb))
    }

    /// Zero the condition columns of the fusion layer. Training with `cond = 0` leaves them
    /// at zero (their gradient is `dout · LN(0) = 0`), so the embedding no longer sees `c`.
    pub fn zero_condition_pathway(&mut self) -> Result<()> {
        let id = self.cond.fuse.w;
        let mut w = self.store.value(id).clone();
        let cols = w.shape()[1];
        for row in w.data_mut().chunks_mut(cols) {
            row[..self.cfg.cond_dim].fill(0.0);
        }
        self.store.set_value(id, w)?;
        self.unconditional = true;
        Ok(())
    }

    pub fn zero_cond(&self) -> Tensor {
        Tensor::zeros(&[self.cfg.cond_dim])
    }
}

impl VModel for DiffusionModel {
    fn predict_v(&self, z_t: &Tensor, t: usize, cond: &Tensor) -> Result<Tensor> {
        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, &self.store);
        let v = self.forward(&ctx, tape.constant(z_t.clone()), t, cond)?;
        Ok((*v.value()).clone())
    }

    fn unconditional(&self) -> bool {
        self.unconditional
    }
}

/// `v_u + s (v_c − v_u)` with `v_u` under the zero condition. `s = 0` and `s = 1` return the
/// unconditional and conditional predictions unchanged.
pub fn cfg_predict<M: VModel + ?Sized>(model: &M, z_t: &Tensor, t: usize, cond: &Tensor, scale: f64) -> Result<Tensor> {
    let zero = Tensor::zeros(cond.shape());
    let cond_is_zero = cond.data().iter().all(|&c| c == 0.0);
    if scale == 0.0 || cond_is_zero || model.unconditional() {
        return model.predict_v(z_t, t, &zero);
    }
    let vc = model.predict_v(z_t, t, cond)?;
    if scale == 1.0 {
        return Ok(vc);
    }
    let vu = model.predict_v(z_t, t, &zero)?;
    vu.zip_map(&vc, |u, c| u + scale * (c - u))
}

// ---------------------------------------------------------------------------
// training loss

/// One training example after noising.
#[derive(Clone, Debug)]
pub struct NoisedItem {
    pub t: usize,
    pub z_t: Tensor,
    pub v: Tensor,
    pub cond: Tensor,
    pub dropped: bool,
}

/// Draw `t`, `ε` and the dropout coin for every item from one seeded stream.
pub fn noise_batch(
    z0: &[Triplane],
    conds: &[Tensor],
    seed: u64,
    dropout: f64,
    sched: &NoiseSchedule,
) -> Result<Vec<NoisedItem>> {
    if z0.is_empty() || z0.len() != conds.len() {
        return invalid(format!("batch of {} latents with {} conditions", z0.len(), conds.len()));
    }
    let mut rng = substream(seed, "diffusion.noise");
    z0.iter()
        .zip(conds)
        .map(|(z, c)| {
            let x = z.rollout();
            let t = rng.gen_range(0..sched.steps());
            let eps = Tensor::randn(x.shape(), &mut rng);
            let dropped = rng.gen::<f64>() < dropout;
            Ok(NoisedItem {
                t,
                z_t: q_sample(&x, t, &eps, sched)?,
                v: v_target(&x, &eps, t, sched)?,
                cond: if dropped { Tensor::zeros(c.shape()) } else { c.clone() },
                dropped,
            })
        })
        .collect()
}

/// Mean over items of the per-element mean squared `v` error. `model(i, z_t, t, cond)`.
pub fn v_loss<'t, F>(tape: &'t Tape, items: &[NoisedItem], mut model: F) -> Result<Var<'t>>
where
    F: FnMut(usize, Var<'t>, usize, &Tensor) -> Result<Var<'t>>,
{
    let mut total: Option<Var<'t>> = None;
    for (i, it) in items.iter().enumerate() {
        let pred = model(i, tape.constant(it.z_t.clone()), it.t, &it.cond)?;
        let l = pred.sub(tape.constant(it.v.clone()))?.square()?.mean()?;
        total = Some(match total {
            Some(s) => s.add(l)?,
            None => l,
        });
    }
    let loss = total.expect("non-empty batch").mul_scalar(1.0 / items.len() as f64)?;
    if !loss.value().is_finite() {
        return Err(Error::NonFinite("diffusion loss".into()));
    }
    Ok(loss)
}

pub fn diffusion_step_loss<'t>(
    model: &DiffusionModel,
    ctx: &Ctx<'t, '_>,
    z0: &[Triplane],
    conds: &[Tensor],
    seed: u64,
    sched: &NoiseSchedule,
) -> Result<Var<'t>> {
    let items = noise_batch(z0, conds, seed, model.cfg.cond_dropout, sched)?;
    v_loss(ctx.tape(), &items, |_, z, t, c| model.forward(ctx, z, t, c))
}

// ---------------------------------------------------------------------------
// sampling

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Ode,
    Ancestral,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerOpts {
    pub steps: usize,
    pub guidance: f64,
    pub mode: SampleMode,
    pub second_order: bool,
}

impl SamplerOpts {
    pub fn from_config(cfg: &DiffusionConfig, mode: SampleMode) -> Self {
        Self { steps: cfg.sampler_steps, guidance: cfg.guidance_scale, mode, second_order: cfg.second_order }
    }
}

/// Integrate from `z_T ~ N(0, I)` down to `ẑ0` in the rolled-out `[C, R, 3R]` layout.
///
/// ODE mode takes the deterministic step `z_{t′} = α_{t′} ẑ0 + σ_{t′} ε̂`, optionally with the
/// second-order multistep correction on `ẑ0` in log-SNR time. Ancestral mode samples the
/// Gaussian posterior `q(z_{t′} | z_t, ẑ0)`. The last step returns `ẑ0`.
pub fn sample_rolled<M: VModel + ?Sized>(
    model: &M,
    shape: &[usize],
    cond: &Tensor,
    seed: u64,
    opts: &SamplerOpts,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let grid = time_grid(sched.steps(), opts.steps)?;
    let mut rng = substream(seed, "diffusion.sample");
    let mut z = Tensor::randn(shape, &mut rng);
    let lambda = |t: usize| (sched.alpha[t] / sched.sigma[t]).ln();
    let mut prev: Option<(Tensor, f64)> = None;
    for (i, &t) in grid.iter().enumerate() {
        let v = cfg_predict(model, &z, t, cond, opts.guidance)?;
        let (x0, eps) = invert_v(&z, &v, t, sched)?;
        if !x0.is_finite() {
            return Err(Error::NonFinite(format!("sampler state at t={t}")));
        }
        let Some(&tn) = grid.get(i + 1) else {
            return Ok(x0);
        };
        let (an, sn) = (sched.alpha[tn], sched.sigma[tn]);
        z = match opts.mode {
            SampleMode::Ode if opts.second_order && prev.is_some() => {
                let (x_prev, h_prev) = prev.take().expect("checked");
                let h = lambda(tn) - lambda(t);
                let r = h_prev / h;
                let d = axpby(1.0 + 0.5 / r, &x0, -0.5 / r, &x_prev);
                // σ′/σ z_t + α′ (1 − e^{−h}) D
                axpby(sn / sched.sigma[t], &z, an * (-(-h).exp_m1()), &d)
            }
            SampleMode::Ode => axpby(an, &x0, sn, &eps),
            SampleMode::Ancestral => {
                let (a, s) = (sched.alpha[t], sched.sigma[t]);
                let a_ts = a / an;
                let var_ts = s * s - a_ts * a_ts * sn * sn;
                let mean = axpby(a_ts * sn * sn / (s * s), &z, an * var_ts / (s * s), &x0);
                let std = (var_ts * sn * sn / (s * s)).max(0.0).sqrt();
                let noise = Tensor::randn(shape, &mut rng);
                axpby(1.0, &mean, std, &noise)
            }
        };
        prev = Some((x0, lambda(tn) - lambda(t)));
    }
    unreachable!("time grid is non-empty")
}

/// Sample one triplane and map it back to the VAE latent space at `vae_res`.
pub fn sample(
    model: &DiffusionModel,
    cond: &Tensor,
    seed: u64,
    opts: &SamplerOpts,
    vae_res: usize,
) -> Result<Triplane> {
    let r = model.cfg.res;
    let x = sample_rolled(model, &[model.channels, r, 3 * r], cond, seed, opts, &model.schedule())?;
    model.cfg.to_vae(&Triplane::unroll(&x)?, vae_res)
}

// ---------------------------------------------------------------------------
// training

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionLogLine {
    pub phase: String,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub wall_s: f64,
}

fn run_training(
    model: &mut DiffusionModel,
    latents: &[Triplane],
    conds: &[Tensor],
    steps: usize,
    phase: &str,
    seed: u64,
    on_step: &mut dyn FnMut(&DiffusionLogLine) -> Result<()>,
) -> Result<Vec<DiffusionLogLine>> {
    if latents.is_empty() || latents.len() != conds.len() {
        return invalid(format!("{} latents with {} conditions", latents.len(), conds.len()));
    }
    for z in latents {
        if z.res() != model.cfg.res || z.channels() != model.channels {
            return shape_err(
                "train_diffusion",
                format!("latent {}×{} but model expects {}×{}", z.channels(), z.res(), model.channels, model.cfg.res),
            );
        }
    }
    let sched = model.schedule();
    let mut opt = AdamW::new(&model.store, model.cfg.weight_decay);
    let b = model.cfg.batch_size;
    let start = Instant::now();
    let mut log = Vec::with_capacity(steps);
    for step in 0..steps {
        let idx: Vec<usize> = (0..b).map(|k| (step * b + k) % latents.len()).collect();
        let zs: Vec<Triplane> = idx.iter().map(|&i| latents[i].clone()).collect();
        let cs: Vec<Tensor> = idx.iter().map(|&i| conds[i].clone()).collect();
        let lr = cosine_decay(model.cfg.lr, step, steps, model.cfg.lr_final_frac);
        let loss = {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &model.store);
            let step_seed = derive_seed(seed, &format!("diffusion.{phase}.step{step}"));
            let loss = diffusion_step_loss(model, &ctx, &zs, &cs, step_seed, &sched)
                .map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("{m} at {phase} step {step}")),
                    e => e,
                })?;
            let bindings = ctx.bindings();
            let grads = tape.backward(loss)?;
            drop(ctx);
            model.store.accumulate(&bindings, &grads)?;
            loss.item()
        };
        opt.step(&mut model.store, lr);
        let line = DiffusionLogLine { phase: phase.into(), step, lr, loss, wall_s: start.elapsed().as_secs_f64() };
        on_step(&line)?;
        log.push(line);
    }
    Ok(log)
}

/// Conditional training with condition dropout; `latents` are already in diffusion space.
pub fn train_diffusion(
    model: &mut DiffusionModel,
    latents: &[Triplane],
    conds: &[Tensor],
    seed: u64,
    mut on_step: impl FnMut(&DiffusionLogLine) -> Result<()>,
) -> Result<Vec<DiffusionLogLine>> {
    let steps = model.cfg.steps;
    run_training(model, latents, conds, steps, "cond", seed, &mut on_step)
}

/// Zero the condition pathway and keep training with `cond = 0` for every sample.
pub fn finetune_unconditional(
    model: &mut DiffusionModel,
    latents: &[Triplane],
    seed: u64,
    mut on_step: impl FnMut(&DiffusionLogLine) -> Result<()>,
) -> Result<Vec<DiffusionLogLine>> {
    model.zero_condition_pathway()?;
    let zeros = vec![model.zero_cond(); latents.len()];
    let steps = model.cfg.uncond_steps;
    run_training(model, latents, &zeros, steps, "uncond", seed, &mut on_step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Random small values everywhere, so every pathway (AdaGN, output conv) is live.
    fn perturb(m: &mut DiffusionModel, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in m.store.iter_mut() {
            let n = Tensor::randn(p.value.shape(), &mut rng).scale(0.1);
            p.value.add_assign(&n).unwrap();
        }
    }

    fn sched() -> NoiseSchedule {
        cosine_schedule(1000).unwrap()
    }

    fn tiny_cfg() -> DiffusionConfig {
        DiffusionConfig {
            res: 4,
            widths: vec![4, 8],
            cond_dim: 8,
            time_dim: 8,
            emb_dim: 8,
            timesteps: 100,
            sampler_steps: 5,
            batch_size: 2,
            steps: 3,
            uncond_steps: 3,
            ..DiffusionConfig::default()
        }
    }

    /// Returns the exact `v` for a fixed clean target.
    fn oracle(z0: Tensor, sched: NoiseSchedule) -> impl Fn(&Tensor, usize, &Tensor) -> Result<Tensor> {
        move |z, t, _| {
            let (a, s) = (sched.alpha[t], sched.sigma[t]);
            let eps = z.zip_map(&z0, |z, x| (z - a * x) / s)?;
            v_target(&z0, &eps, t, &sched)
        }
    }

    #[test]
    fn schedule_endpoints_and_invariants() {
        let s = sched();
        assert_eq!(s.steps(), 1000);
        let a0 = (0.5 * std::f64::consts::PI * 0.008 / 1.008).cos();
        assert_eq!(s.alpha[0], a0);
        assert!((a0 - 0.99992).abs() < 5e-6);
        assert!(cosine_alpha(1.0).abs() < 1e-15);
        let amax = s.alpha.iter().cloned().fold(f64::MIN, f64::max);
        assert!(s.alpha[0] > 0.999 * amax);
        assert!(s.sigma[999] > 0.99);
        for t in 0..1000 {
            assert!((s.alpha[t].powi(2) + s.sigma[t].powi(2) - 1.0).abs() < 1e-12);
            if t + 1 < 1000 {
                assert!(s.alpha[t] > s.alpha[t + 1]);
            }
        }
        assert!(cosine_schedule(1).is_err());
    }

    #[test]
    fn v_hand_values() {
        let s = NoiseSchedule { alpha: vec![0.6], sigma: vec![0.8] };
        let (z0, eps) = (Tensor::from_vec(vec![1.0]), Tensor::from_vec(vec![2.0]));
        let v = v_target(&z0, &eps, 0, &s).unwrap();
        assert!((v.item() - 0.4).abs() < 1e-15);
        let zt = q_sample(&z0, 0, &eps, &s).unwrap();
        assert!((zt.item() - 2.2).abs() < 1e-15);
        let (x0, e) = invert_v(&zt, &v, 0, &s).unwrap();
        assert!((x0.item() - 1.0).abs() < 1e-15);
        assert!((e.item() - 2.0).abs() < 1e-15);
        // σ = 0 → v = ε
        let clean = NoiseSchedule { alpha: vec![1.0], sigma: vec![0.0] };
        assert_eq!(v_target(&z0, &eps, 0, &clean).unwrap().item(), 2.0);
        assert!(q_sample(&z0, 1, &eps, &s).is_err());
        assert!(v_target(&z0, &Tensor::zeros(&[2]), 0, &s).is_err());
    }

    #[test]
    fn q_sample_examples() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z0 = Tensor::randn(&[64], &mut rng);
        let eps = Tensor::randn(&[64], &mut rng);
        let zt = q_sample(&z0, 500, &Tensor::zeros(&[64]), &s).unwrap();
        assert_eq!(zt, z0.scale(s.alpha[500]));
        let n = |x: &Tensor| x.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let d = q_sample(&z0, 0, &eps, &s).unwrap().zip_map(&z0, |a, b| a - b).unwrap();
        assert!(n(&d) <= (1.0 - s.alpha[0]) * n(&z0) + s.sigma[0] * n(&eps) + 1e-12);
    }

    #[test]
    fn q_sample_preserves_unit_variance() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for t in [0, 250, 999] {
            let z0 = Tensor::randn(&[1_000_000], &mut rng);
            let eps = Tensor::randn(&[1_000_000], &mut rng);
            let zt = q_sample(&z0, t, &eps, &s).unwrap();
            let m = zt.mean();
            let var = zt.data().iter().map(|x| (x - m).powi(2)).sum::<f64>() / zt.len() as f64;
            assert!((var - 1.0).abs() < 0.01, "t={t} var={var}");
        }
    }

    #[test]
    fn time_grid_cases() {
        assert_eq!(time_grid(1000, 1).unwrap(), vec![999]);
        assert_eq!(time_grid(1000, 2).unwrap(), vec![999, 0]);
        let g = time_grid(1000, 50).unwrap();
        assert_eq!((g.len(), g[0], g[49]), (50, 999, 0));
        assert_eq!(time_grid(1000, 1000).unwrap(), (0..1000).rev().collect::<Vec<_>>());
        assert!(time_grid(1000, 0).is_err());
    }

    #[test]
    fn oracle_recovers_target() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z0 = Tensor::randn(&[2, 4, 12], &mut rng);
        let m = oracle(z0.clone(), s.clone());
        for (steps, tol) in [(50, 1e-2), (1000, 1e-4)] {
            for mode in [SampleMode::Ode, SampleMode::Ancestral] {
                for second_order in [false, true] {
                    let opts = SamplerOpts { steps, guidance: 5.0, mode, second_order };
                    let cond = Tensor::from_vec(vec![1.0]);
                    let x = sample_rolled(&m, z0.shape(), &cond, 9, &opts, &s).unwrap();
                    assert!(x.max_abs_diff(&z0) < tol, "{steps} {mode:?} {second_order}");
                }
            }
        }
    }

    /// Gaussian data `N(0, k²)`: the exact denoiser is linear, the probability-flow ODE scales
    /// `z` by `√(d_t / d_T)` with `d_t = α_t² k² + σ_t²`, and the sampler ends with the
    /// denoised `α_0 k² / d_0 · z_0`.
    #[test]
    fn gaussian_flow_converges() {
        let s = sched();
        let k = 0.5f64;
        let model = |z: &Tensor, t: usize, _: &Tensor| -> Result<Tensor> {
            let (a, sg) = (s.alpha[t], s.sigma[t]);
            let d = a * a * k * k + sg * sg;
            let x0 = z.scale(a * k * k / d);
            let eps = z.scale(sg / d);
            Ok(axpby(a, &eps, -sg, &x0))
        };
        let shape = [1, 2, 6];
        let zt = Tensor::randn(&shape, &mut substream(11, "diffusion.sample"));
        let d = |t: usize| s.alpha[t].powi(2) * k * k + s.sigma[t].powi(2);
        let exact = zt.scale(s.alpha[0] * k * k / (d(0) * d(999)).sqrt());
        let err = |steps, second_order| {
            let opts = SamplerOpts { steps, guidance: 1.0, mode: SampleMode::Ode, second_order };
            sample_rolled(&model, &shape, &Tensor::zeros(&[1]), 11, &opts, &s).unwrap().max_abs_diff(&exact)
        };
        let (e10, e50, e1000) = (err(10, false), err(50, false), err(1000, false));
        assert!(e1000 < e50 && e50 < e10, "{e10} {e50} {e1000}");
        // first order loses O(Δθ²) per step along the (αk, σ) arc; second order is O(Δθ³)
        assert!(e1000 < 5e-3, "{e1000}");
        let (f50, f1000) = (err(50, true), err(1000, true));
        assert!(f50 < e50 && f1000 < 1e-4, "{f50} {f1000}");
    }

    #[test]
    fn single_step_is_inversion_at_last_t() {
        let s = sched();
        let m = |z: &Tensor, t: usize, _: &Tensor| Ok(z.scale(0.3 + t as f64 * 1e-4));
        let shape = [1, 2, 6];
        let opts = SamplerOpts { steps: 1, guidance: 1.0, mode: SampleMode::Ode, second_order: false };
        let cond = Tensor::zeros(&[1]);
        let x = sample_rolled(&m, &shape, &cond, 2, &opts, &s).unwrap();
        let zt = Tensor::randn(&shape, &mut substream(2, "diffusion.sample"));
        let v = m(&zt, 999, &cond).unwrap();
        assert_eq!(x, invert_v(&zt, &v, 999, &s).unwrap().0);
    }

    #[test]
    fn sampling_deterministic_and_seed_sensitive() {
        let mut model = DiffusionModel::new(tiny_cfg(), 2, 1).unwrap();
        perturb(&mut model, 2);
        let c = toy_condition_embed("box", 8);
        for mode in [SampleMode::Ode, SampleMode::Ancestral] {
            let opts = SamplerOpts { steps: 4, guidance: 5.0, mode, second_order: true };
            let a = sample(&model, &c, 7, &opts, 8).unwrap();
            let b = sample(&model, &c, 7, &opts, 8).unwrap();
            assert_eq!(a.planes().data(), b.planes().data());
            assert_eq!(a.res(), 8);
            assert_ne!(a.planes().data(), sample(&model, &c, 8, &opts, 8).unwrap().planes().data());
        }
    }

    #[test]
    fn cfg_identities() {
        let mut model = DiffusionModel::new(tiny_cfg(), 2, 3).unwrap();
        perturb(&mut model, 4);
        let z = Tensor::randn(&[2, 4, 12], &mut ChaCha8Rng::seed_from_u64(5));
        let c = toy_condition_embed("torus", 8);
        let vc = model.predict_v(&z, 40, &c).unwrap();
        let vu = model.predict_v(&z, 40, &model.zero_cond()).unwrap();
        assert_ne!(vc, vu);
        assert_eq!(cfg_predict(&model, &z, 40, &c, 1.0).unwrap(), vc);
        assert_eq!(cfg_predict(&model, &z, 40, &c, 0.0).unwrap(), vu);
        let g2 = cfg_predict(&model, &z, 40, &c, 2.0).unwrap();
        let g1 = cfg_predict(&model, &z, 40, &c, 1.0).unwrap();
        let lhs = g2.zip_map(&g1, |a, b| a - b).unwrap();
        let rhs = vc.zip_map(&vu, |a, b| a - b).unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn loss_oracle_zero_and_null_model() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z0: Vec<Triplane> = (0..8).map(|_| Triplane::new(Tensor::randn(&[3, 2, 8, 8], &mut rng)).unwrap()).collect();
        let conds = vec![Tensor::zeros(&[4]); 8];
        let items = noise_batch(&z0, &conds, 1, 0.2, &s).unwrap();
        let tape = Tape::no_grad();
        let exact = v_loss(&tape, &items, |i, _, _, _| Ok(tape.constant(items[i].v.clone()))).unwrap();
        assert_eq!(exact.item(), 0.0);
        // null model: mean ‖v‖² ≈ E[α² + σ²] = 1
        let mut acc = 0.0;
        for seed in 0..20 {
            let items = noise_batch(&z0, &conds, seed, 0.2, &s).unwrap();
            let l = v_loss(&tape, &items, |_, z, _, _| Ok(tape.constant(Tensor::zeros(z.shape().as_slice())))).unwrap();
            acc += l.item();
        }
        assert!((acc / 20.0 - 1.0).abs() < 0.05, "{}", acc / 20.0);
    }

    #[test]
    fn full_dropout_ignores_condition() {
        let mut cfg = tiny_cfg();
        cfg.cond_dropout = 1.0;
        let model = DiffusionModel::new(cfg, 2, 1).unwrap();
        let s = model.schedule();
        let z0 = vec![Triplane::new(Tensor::randn(&[3, 2, 4, 4], &mut ChaCha8Rng::seed_from_u64(1))).unwrap(); 2];
        let loss = |tag: &str| {
            let tape = Tape::no_grad();
            let ctx = Ctx::new(&tape, &model.store);
            let c = vec![toy_condition_embed(tag, 8); 2];
            diffusion_step_loss(&model, &ctx, &z0, &c, 5, &s).unwrap().item()
        };
        assert_eq!(loss("a").to_bits(), loss("b").to_bits());
        let items = noise_batch(&z0, &[Tensor::full(&[8], 1.0), Tensor::full(&[8], 1.0)], 5, 1.0, &s).unwrap();
        assert!(items.iter().all(|i| i.dropped && i.cond.data().iter().all(|&c| c == 0.0)));
    }

    #[test]
    fn condition_embeddings() {
        assert_eq!(toy_condition_embed("sphere", 64), toy_condition_embed("sphere", 64));
        assert_eq!(toy_condition_embed("", 64), Tensor::zeros(&[64]));
        let tags = ["sphere", "box", "torus", "sphere_box"];
        let e: Vec<Tensor> = tags.iter().map(|t| toy_condition_embed(t, 64)).collect();
        for (i, a) in e.iter().enumerate() {
            let n: f64 = a.data().iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-12);
            for b in &e[i + 1..] {
                let cos: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
                assert!(cos.abs() < 0.5, "{cos}");
            }
        }
        assert_eq!(condition_encoder("toy", 16).unwrap().embed("x"), toy_condition_embed("x", 16));
        assert!(condition_encoder("clip", 16).is_err());
    }

    #[test]
    fn first_step_loss_deterministic_and_training_runs() {
        let z0: Vec<Triplane> = (0..2)
            .map(|i| Triplane::new(Tensor::randn(&[3, 2, 4, 4], &mut ChaCha8Rng::seed_from_u64(i))).unwrap().scale(0.5))
            .collect();
        let conds = vec![toy_condition_embed("a", 8), toy_condition_embed("b", 8)];
        let run = || {
            let mut m = DiffusionModel::new(tiny_cfg(), 2, 1).unwrap();
            let log = train_diffusion(&mut m, &z0, &conds, 3, |_| Ok(())).unwrap();
            (log.iter().map(|l| l.loss).collect::<Vec<_>>(), m)
        };
        let (l1, m1) = run();
        let (l2, _) = run();
        assert_eq!(l1, l2);
        assert_eq!(l1.len(), 3);
        assert!(l1.iter().all(|l| l.is_finite()));
        let mut m = m1;
        let before = m.store.value(m.unet.conv_out.w).clone();
        finetune_unconditional(&mut m, &z0, 4, |_| Ok(())).unwrap();
        assert_ne!(&before, m.store.value(m.unet.conv_out.w));
        let w = m.store.value(m.cond.fuse.w);
        for row in w.data().chunks(w.shape()[1]) {
            assert!(row[..8].iter().all(|&x| x == 0.0));
        }
        // tag-independent sampling after the finetune
        let opts = SamplerOpts { steps: 3, guidance: 5.0, mode: SampleMode::Ode, second_order: false };
        let a = sample(&m, &toy_condition_embed("a", 8), 1, &opts, 4).unwrap();
        let b = sample(&m, &toy_condition_embed("b", 8), 1, &opts, 4).unwrap();
        let z = sample(&m, &m.zero_cond(), 1, &opts, 4).unwrap();
        assert_eq!(a.planes().data(), b.planes().data());
        assert_eq!(a.planes().data(), z.planes().data());
    }

    #[test]
    fn zeroed_pathway_ignores_condition_without_flag() {
        // the network itself, not just the flag, is blind to the condition
        let mut m = DiffusionModel::new(tiny_cfg(), 2, 1).unwrap();
        perturb(&mut m, 3);
        m.zero_condition_pathway().unwrap();
        m.unconditional = false;
        let z = Tensor::randn(&[2, 4, 12], &mut ChaCha8Rng::seed_from_u64(1));
        let a = m.predict_v(&z, 10, &toy_condition_embed("a", 8)).unwrap();
        let b = m.predict_v(&z, 10, &m.zero_cond()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn latent_plumbing_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mu = Triplane::new(Tensor::randn(&[3, 2, 8, 8], &mut rng)).unwrap();
        // power-of-two scale: exact
        let cfg = DiffusionConfig { res: 8, latent_scale: 0.125, ..DiffusionConfig::default() };
        let back = cfg.to_vae(&cfg.to_diffusion(&mu).unwrap(), 8).unwrap();
        assert_eq!(back.planes().data(), mu.planes().data());
        let cfg = DiffusionConfig { res: 8, ..DiffusionConfig::default() };
        let back = cfg.to_vae(&cfg.to_diffusion(&mu).unwrap(), 8).unwrap();
        assert!(back.planes().max_abs_diff(mu.planes()) < 1e-14);
        // oracle sampler in between
        let s = cosine_schedule(1000).unwrap();
        let z0 = cfg.to_diffusion(&mu).unwrap().rollout();
        let opts = SamplerOpts { steps: 50, guidance: 5.0, mode: SampleMode::Ode, second_order: false };
        let x = sample_rolled(&oracle(z0.clone(), s.clone()), z0.shape(), &Tensor::zeros(&[1]), 3, &opts, &s).unwrap();
        let back = cfg.to_vae(&Triplane::unroll(&x).unwrap(), 8).unwrap();
        assert!(back.planes().max_abs_diff(mu.planes()) < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(DiffusionConfig::default().validate().is_ok());
        for bad in [
            DiffusionConfig { cond_dropout: 1.5, ..DiffusionConfig::default() },
            DiffusionConfig { latent_scale: 0.0, ..DiffusionConfig::default() },
            DiffusionConfig { res: 30, ..DiffusionConfig::default() },
            DiffusionConfig { sampler_steps: 0, ..DiffusionConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    proptest::proptest! {
        #[test]
        fn v_round_trip(seed in 0u64..10_000, t in 0usize..1000) {
            let s = sched();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z0 = Tensor::randn(&[16], &mut rng);
            let eps = Tensor::randn(&[16], &mut rng);
            let zt = q_sample(&z0, t, &eps, &s).unwrap();
            let v = v_target(&z0, &eps, t, &s).unwrap();
            let (x, e) = invert_v(&zt, &v, t, &s).unwrap();
            proptest::prop_assert!(x.max_abs_diff(&z0) < 1e-12);
            proptest::prop_assert!(e.max_abs_diff(&eps) < 1e-12);
        }
    }
}
