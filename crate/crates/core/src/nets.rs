//! Network building blocks: dense layers, point encoders, MLP heads, normalization,
//! embeddings and the triplane UNet.
//!
//! Every block owns [`ParamId`]s into a shared [`ParamStore`] and runs on a [`Ctx`].
//! Dense layers take row-major batches `[N, D]`; image blocks take single `[C, H, W]` maps.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, shape_err, Error, Result};
use crate::numerics::{concat, Ctx, ParamId, ParamStore, Tensor, Var};
use crate::triplane::{conv3d_aware, PLANE_AXES};

pub const POSENC_FREQS: usize = 6;
/// xyz followed by sin and cos of `π·2^k·xyz` for `k < POSENC_FREQS`.
pub const POSENC_DIM: usize = 3 + 6 * POSENC_FREQS;
pub const NORM_EPS: f64 = 1e-6;

fn normal_tensor<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect::<Vec<f64>>();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Largest group count `<= 8` dividing `channels`.
pub fn default_groups(channels: usize) -> usize {
    (1..=channels.min(8)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// LeCun-normal weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let w = normal_tensor(&[out_dim, in_dim], 1.0 / (in_dim as f64).sqrt(), rng);
        Self::with_weights(store, name, w)
    }

    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self::with_weights(store, name, Tensor::zeros(&[out_dim, in_dim]))
    }

    fn with_weights(store: &mut ParamStore, name: &str, w: Tensor) -> Self {
        let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
        Self {
            w: store.add(format!("{name}.w"), w),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[out_dim])),
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        x.linear(ctx.p(self.w), ctx.p(self.b))
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut R,
    ) -> Self {
        let w = normal_tensor(&[cout, cin, k, k], 1.0 / ((cin * k * k) as f64).sqrt(), rng);
        Self {
            w: store.add(format!("{name}.w"), w),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[cout])),
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        Self {
            w: store.add(format!("{name}.w"), Tensor::zeros(&[cout, cin, k, k])),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[cout])),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv2d(ctx.p(self.w), ctx.p(self.b))
    }

    /// Same weights applied as a 3D-aware convolution on a rolled-out triplane image.
    pub fn forward_aware<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        conv3d_aware(x, ctx.p(self.w), ctx.p(self.b))
    }
}

/// Positional encoding of `[N, 3]` points into `[N, POSENC_DIM]`.
pub fn posenc_tensor(points: &Tensor) -> Tensor {
    let n = points.shape()[0];
    let mut out = Vec::with_capacity(n * POSENC_DIM);
    for p in points.data().chunks(3) {
        out.extend_from_slice(p);
        for k in 0..POSENC_FREQS {
            let f = PI * (1u64 << k) as f64;
            out.extend(p.iter().map(|&c| (f * c).sin()));
            out.extend(p.iter().map(|&c| (f * c).cos()));
        }
    }
    Tensor::from_parts(vec![n, POSENC_DIM], out)
}

/// Differentiable positional encoding of `[N, 3]` points.
pub fn posenc<'t>(points: Var<'t>) -> Result<Var<'t>> {
    let x = points.value();
    let s = x.shape().to_vec();
    if s.len() != 2 || s[1] != 3 {
        return shape_err("posenc", format!("expected [N, 3], got {s:?}"));
    }
    let n = s[0];
    points
        .tape()
        .custom("posenc", posenc_tensor(&x), &[points], move |g, _| {
            let mut gx = vec![0.0; n * 3];
            for (i, (p, gr)) in x.data().chunks(3).zip(g.data().chunks(POSENC_DIM)).enumerate() {
                for a in 0..3 {
                    let mut acc = gr[a];
                    for k in 0..POSENC_FREQS {
                        let f = PI * (1u64 << k) as f64;
                        let base = 3 + 6 * k;
                        acc += gr[base + a] * f * (f * p[a]).cos();
                        acc -= gr[base + 3 + a] * f * (f * p[a]).sin();
                    }
                    gx[i * 3 + a] = acc;
                }
            }
            vec![Some(Tensor::from_parts(vec![n, 3], gx))]
        })
}

/// Affine embedding of normalized RGB values.
#[derive(Clone, Debug)]
pub struct ColorEmbed {
    pub lin: Linear,
}

impl ColorEmbed {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, m: usize, rng: &mut R) -> Self {
        Self {
            lin: Linear::new(store, name, 3, m, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.lin.out_dim
    }

    /// `[N, 3]` colors in `[0, 1]` to `[N, m]`. Out-of-range colors are rejected.
    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, rgb: Var<'t>) -> Result<Var<'t>> {
        let v = rgb.value();
        if v.shape().len() != 2 || v.shape()[1] != 3 {
            return shape_err("color_embed", format!("expected [N, 3], got {:?}", v.shape()));
        }
        if let Some(bad) = v.data().iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return invalid(format!("color value {bad} outside [0, 1]"));
        }
        self.lin.forward(ctx, rgb)
    }
}

/// Residual MLP: `h = Lin_in(x)`, then `h ← h + ReLU(LN(Lin(h)))` per block, then `Lin_out(h)`.
#[derive(Clone, Debug)]
pub struct MlpHead {
    pub input: Linear,
    pub blocks: Vec<Linear>,
    pub output: Linear,
}

impl MlpHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        width: usize,
        depth: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            input: Linear::new(store, &format!("{name}.in"), in_dim, width, rng),
            blocks: (0..depth)
                .map(|i| Linear::new(store, &format!("{name}.block{i}"), width, width, rng))
                .collect(),
            output: Linear::new(store, &format!("{name}.out"), width, out_dim, rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.output.out_dim
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let mut h = self.input.forward(ctx, x)?;
        for b in &self.blocks {
            h = h.add(b.forward(ctx, h)?.layer_norm(NORM_EPS)?.relu()?)?;
        }
        self.output.forward(ctx, h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(&self.input)
            .chain(&self.blocks)
            .chain(std::iter::once(&self.output))
            .flat_map(|l| [l.w, l.b])
            .collect()
    }
}

/// Nearest grid node of coordinate `c` on an align-corners grid of `res` nodes.
#[inline]
pub fn nearest_node(c: f64, res: usize) -> usize {
    let u = (c.clamp(-1.0, 1.0) + 1.0) * 0.5 * (res - 1) as f64;
    (u.round() as usize).min(res - 1)
}

fn check_points(points: &Tensor) -> Result<usize> {
    let s = points.shape();
    if s.len() != 2 || s[1] != 3 {
        return shape_err("pointnet", format!("points must be [N, 3], got {s:?}"));
    }
    if s[0] == 0 {
        return invalid("empty point cloud");
    }
    if !points.is_finite() {
        return Err(Error::NonFinite("point cloud".into()));
    }
    if let Some(c) = points.data().iter().find(|c| c.abs() > 1.0) {
        return invalid(format!("point coordinate {c} outside [-1, 1]"));
    }
    Ok(s[0])
}

/// Mean-aggregate per-point features `[N, C]` into the nearest node of each plane, giving
/// `[3, C, res, res]`. Empty cells are zero. Summation runs in a canonical point order, so
/// any permutation of the input rows yields bit-identical planes.
pub fn scatter_mean<'t>(points: &Tensor, feats: Var<'t>, res: usize) -> Result<Var<'t>> {
    let n = check_points(points)?;
    let fv = feats.value();
    let fs = fv.shape();
    if fs.len() != 2 || fs[0] != n {
        return shape_err("scatter_mean", format!("features {fs:?} for {n} points"));
    }
    if res < 2 {
        return invalid(format!("plane resolution must be >= 2, got {res}"));
    }
    let c = fs[1];
    let pd = points.data();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (&pd[a * 3..a * 3 + 3], &pd[b * 3..b * 3 + 3]);
        pa.iter()
            .zip(pb)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    // cell[p][i]: flat node index of point i on plane p
    let cells: Vec<Vec<usize>> = PLANE_AXES
        .iter()
        .map(|&(ca, ra)| {
            pd.chunks(3)
                .map(|p| nearest_node(p[ra], res) * res + nearest_node(p[ca], res))
                .collect()
        })
        .collect();
    let rr = res * res;
    let mut counts = vec![0usize; 3 * rr];
    let mut out = vec![0.0; 3 * c * rr];
    let fd = fv.data();
    for (p, cell) in cells.iter().enumerate() {
        for &i in &order {
            counts[p * rr + cell[i]] += 1;
            for k in 0..c {
                out[(p * c + k) * rr + cell[i]] += fd[i * c + k];
            }
        }
    }
    for p in 0..3 {
        for k in 0..c {
            for j in 0..rr {
                let cnt = counts[p * rr + j];
                if cnt > 0 {
                    out[(p * c + k) * rr + j] /= cnt as f64;
                }
            }
        }
    }
    feats.tape().custom(
        "scatter_mean",
        Tensor::from_parts(vec![3, c, res, res], out),
        &[feats],
        move |g, _| {
            let gd = g.data();
            let mut gf = vec![0.0; n * c];
            for (p, cell) in cells.iter().enumerate() {
                for (i, &j) in cell.iter().enumerate() {
                    let inv = 1.0 / counts[p * rr + j] as f64;
                    for k in 0..c {
                        gf[i * c + k] += gd[(p * c + k) * rr + j] * inv;
                    }
                }
            }
            vec![Some(Tensor::from_parts(vec![n, c], gf))]
        },
    )
}

/// Per-point MLP over `[xyz, posenc, color embedding]` followed by mean scatter onto planes.
#[derive(Clone, Debug)]
pub struct PointNet {
    pub color: Option<ColorEmbed>,
    pub l1: Linear,
    pub l2: Linear,
    pub l3: Linear,
    pub res: usize,
}

impl PointNet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        color_dim: Option<usize>,
        hidden: usize,
        channels: usize,
        res: usize,
        rng: &mut R,
    ) -> Self {
        let color = color_dim.map(|m| ColorEmbed::new(store, &format!("{name}.color"), m, rng));
        let in_dim = POSENC_DIM + color_dim.unwrap_or(0);
        Self {
            color,
            l1: Linear::new(store, &format!("{name}.l1"), in_dim, hidden, rng),
            l2: Linear::new(store, &format!("{name}.l2"), hidden, hidden, rng),
            l3: Linear::new(store, &format!("{name}.l3"), hidden, channels, rng),
            res,
        }
    }

    pub fn channels(&self) -> usize {
        self.l3.out_dim
    }

    /// `points` `[N, 3]`, optional `colors` `[N, 3]` → raw triplane `[3, C, R, R]`.
    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        points: &Tensor,
        colors: Option<&Tensor>,
    ) -> Result<Var<'t>> {
        let n = check_points(points)?;
        let tape = ctx.tape();
        let mut x = tape.constant(posenc_tensor(points));
        match (&self.color, colors) {
            (Some(embed), Some(rgb)) => {
                if rgb.shape() != [n, 3] {
                    return shape_err("pointnet", format!("colors {:?} for {n} points", rgb.shape()));
                }
                let e = embed.forward(ctx, tape.constant(rgb.clone()))?;
                x = concat(&[x, e], 1)?;
            }
            (None, None) => {}
            (Some(_), None) => return invalid("textured encoder needs point colors"),
            (None, Some(_)) => return invalid("geometry-only encoder given point colors"),
        }
        let h = self.l1.forward(ctx, x)?.relu()?;
        let h = self.l2.forward(ctx, h)?.relu()?;
        let f = self.l3.forward(ctx, h)?;
        scatter_mean(points, f, self.res)
    }
}

/// GroupNorm with per-channel affine on `[C, H, W]`.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub channels: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            groups: default_groups(channels),
            channels,
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let c = self.channels;
        let g = ctx.p(self.gamma).reshape(&[c, 1, 1])?;
        let b = ctx.p(self.beta).reshape(&[c, 1, 1])?;
        x.group_norm(self.groups, NORM_EPS)?.mul(g)?.add(b)
    }
}

/// Adaptive GroupNorm: `GN(h)·(1 + scale) + shift` with `[scale, shift]` a linear map of `emb`.
#[derive(Clone, Debug)]
pub struct AdaGn {
    pub proj: Linear,
    pub groups: usize,
    pub channels: usize,
}

impl AdaGn {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        emb_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            proj: Linear::new(store, &format!("{name}.proj"), emb_dim, 2 * channels, rng),
            groups: default_groups(channels),
            channels,
        }
    }

    /// `x` `[C, H, W]`, `emb` `[1, E]`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>, emb: Var<'t>) -> Result<Var<'t>> {
        let c = self.channels;
        if x.shape().first() != Some(&c) {
            return shape_err("adagn", format!("{:?} for {c} channels", x.shape()));
        }
        let ss = self.proj.forward(ctx, emb)?;
        let scale = ss.narrow(1, 0, c)?.reshape(&[c, 1, 1])?;
        let shift = ss.narrow(1, c, c)?.reshape(&[c, 1, 1])?;
        let h = x.group_norm(self.groups, NORM_EPS)?;
        h.mul(scale.add_scalar(1.0)?)?.add(shift)
    }
}

/// Sinusoidal timestep features: `[sin(t·f_0..), cos(t·f_0..)]` with
/// `f_i = 10000^(−i/(half−1))`.
pub fn sinusoid(t: usize, dim: usize) -> Result<Tensor> {
    if dim < 4 || dim % 2 != 0 {
        return invalid(format!("timestep embedding dim must be even and >= 4, got {dim}"));
    }
    let half = dim / 2;
    let mut v = vec![0.0; dim];
    for i in 0..half {
        let f = 10000f64.powf(-(i as f64) / (half - 1) as f64);
        v[i] = (t as f64 * f).sin();
        v[half + i] = (t as f64 * f).cos();
    }
    Tensor::new(&[1, dim], v)
}

#[derive(Clone, Debug)]
pub struct TimeEmbed {
    pub dim: usize,
    pub steps: usize,
    pub l1: Linear,
    pub l2: Linear,
}

impl TimeEmbed {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        emb_dim: usize,
        steps: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            dim,
            steps,
            l1: Linear::new(store, &format!("{name}.l1"), dim, emb_dim, rng),
            l2: Linear::new(store, &format!("{name}.l2"), emb_dim, emb_dim, rng),
        }
    }

    /// `[1, E]` embedding of timestep `t`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, t: usize) -> Result<Var<'t>> {
        if t >= self.steps {
            return invalid(format!("timestep {t} outside [0, {})", self.steps));
        }
        let s = ctx.tape().constant(sinusoid(t, self.dim)?);
        let h = self.l1.forward(ctx, s)?.silu()?;
        self.l2.forward(ctx, h)
    }
}

/// `Linear([LN(c), t_emb])`: fuses a conditioning vector with the timestep embedding.
#[derive(Clone, Debug)]
pub struct CondInject {
    pub cond_dim: usize,
    pub fuse: Linear,
}

impl CondInject {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cond_dim: usize,
        emb_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            cond_dim,
            fuse: Linear::new(store, &format!("{name}.fuse"), cond_dim + emb_dim, emb_dim, rng),
        }
    }

    /// `cond` `[D_cond]`, `t_emb` `[1, E]` → `[1, E]`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, cond: &Tensor, t_emb: Var<'t>) -> Result<Var<'t>> {
        if cond.shape() != [self.cond_dim] {
            return shape_err(
                "inject_condition",
                format!("condition {:?}, expected [{}]", cond.shape(), self.cond_dim),
            );
        }
        let c = ctx
            .tape()
            .constant(cond.reshape(&[1, self.cond_dim])?)
            .layer_norm(NORM_EPS)?;
        self.fuse.forward(ctx, concat(&[c, t_emb], 1)?)
    }
}

/// GN → SiLU → aware conv → AdaGN/GN → SiLU → aware conv (zero init), plus skip.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub norm1: GroupNorm,
    pub conv1: Conv2d,
    pub norm2: Norm2,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
}

#[derive(Clone, Debug)]
pub enum Norm2 {
    Ada(AdaGn),
    Plain(GroupNorm),
}

impl ResBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        emb_dim: Option<usize>,
        rng: &mut R,
    ) -> Self {
        let norm1 = GroupNorm::new(store, &format!("{name}.norm1"), cin);
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), 3 * cin, cout, 3, rng);
        let norm2 = match emb_dim {
            Some(e) => Norm2::Ada(AdaGn::new(store, &format!("{name}.norm2"), cout, e, rng)),
            None => Norm2::Plain(GroupNorm::new(store, &format!("{name}.norm2"), cout)),
        };
        let conv2 = Conv2d::zeros(store, &format!("{name}.conv2"), 3 * cout, cout, 3);
        let skip = (cin != cout).then(|| Conv2d::new(store, &format!("{name}.skip"), cin, cout, 1, rng));
        Self {
            norm1,
            conv1,
            norm2,
            conv2,
            skip,
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>, emb: Option<Var<'t>>) -> Result<Var<'t>> {
        let h = self.norm1.forward(ctx, x)?.silu()?;
        let h = self.conv1.forward_aware(ctx, h)?;
        let h = match (&self.norm2, emb) {
            (Norm2::Ada(a), Some(e)) => a.forward(ctx, h, e)?,
            (Norm2::Plain(g), None) => g.forward(ctx, h)?,
            (Norm2::Ada(_), None) => return invalid("conditioned block needs an embedding"),
            (Norm2::Plain(_), Some(_)) => return invalid("unconditioned block given an embedding"),
        };
        let h = self.conv2.forward_aware(ctx, h.silu()?)?;
        let s = match &self.skip {
            Some(c) => c.forward(ctx, x)?,
            None => x,
        };
        s.add(h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    pub in_ch: usize,
    pub out_ch: usize,
    pub widths: Vec<usize>,
    pub blocks_per_level: usize,
    pub emb_dim: Option<usize>,
    pub zero_init_out: bool,
}

/// Encoder-decoder over rolled-out triplane images `[C, R, 3R]` with skip connections.
/// Plain convolutions at the stem and head, 3D-aware ones inside residual blocks.
#[derive(Clone, Debug)]
pub struct UNet {
    pub cfg: UNetConfig,
    pub conv_in: Conv2d,
    pub down: Vec<Vec<ResBlock>>,
    pub mid: ResBlock,
    pub up: Vec<Vec<ResBlock>>,
    pub norm_out: GroupNorm,
    pub conv_out: Conv2d,
}

impl UNet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: UNetConfig, rng: &mut R) -> Self {
        assert!(!cfg.widths.is_empty() && cfg.blocks_per_level > 0);
        let e = cfg.emb_dim;
        let w0 = cfg.widths[0];
        let conv_in = Conv2d::new(store, &format!("{name}.conv_in"), cfg.in_ch, w0, 3, rng);
        let mut ch = w0;
        let mut skips = Vec::new();
        let mut down = Vec::new();
        for (l, &w) in cfg.widths.iter().enumerate() {
            let mut level = Vec::new();
            for b in 0..cfg.blocks_per_level {
                level.push(ResBlock::new(store, &format!("{name}.down{l}.{b}"), ch, w, e, rng));
                ch = w;
                skips.push(ch);
            }
            down.push(level);
        }
        let mid = ResBlock::new(store, &format!("{name}.mid"), ch, ch, e, rng);
        let mut up = Vec::new();
        for (l, &w) in cfg.widths.iter().enumerate().rev() {
            let mut level = Vec::new();
            for b in 0..cfg.blocks_per_level {
                let s = skips.pop().expect("skip count matches");
                level.push(ResBlock::new(store, &format!("{name}.up{l}.{b}"), ch + s, w, e, rng));
                ch = w;
            }
            up.push(level);
        }
        let norm_out = GroupNorm::new(store, &format!("{name}.norm_out"), ch);
        let conv_out = if cfg.zero_init_out {
            Conv2d::zeros(store, &format!("{name}.conv_out"), ch, cfg.out_ch, 3)
        } else {
            Conv2d::new(store, &format!("{name}.conv_out"), ch, cfg.out_ch, 3, rng)
        };
        Self {
            cfg,
            conv_in,
            down,
            mid,
            up,
            norm_out,
            conv_out,
        }
    }

    /// Smallest plane resolution unit: `R` must be a multiple of this.
    pub fn res_multiple(&self) -> usize {
        1 << (self.cfg.widths.len() - 1)
    }

    /// `x` `[in_ch, R, 3R]`, `emb` `[1, E]` when the net is conditioned.
    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>, emb: Option<Var<'t>>) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 3 || s[0] != self.cfg.in_ch || s[2] != 3 * s[1] {
            return shape_err(
                "unet",
                format!("expected [{}, R, 3R], got {s:?}", self.cfg.in_ch),
            );
        }
        if s[1] % self.res_multiple() != 0 {
            return invalid(format!(
                "resolution {} not divisible by {}",
                s[1],
                self.res_multiple()
            ));
        }
        let emb = emb.map(|e| e.silu()).transpose()?;
        let levels = self.cfg.widths.len();
        let mut h = self.conv_in.forward(ctx, x)?;
        let mut skips = Vec::new();
        for (l, level) in self.down.iter().enumerate() {
            for b in level {
                h = b.forward(ctx, h, emb)?;
                skips.push(h);
            }
            if l + 1 < levels {
                h = h.avg_pool2()?;
            }
        }
        h = self.mid.forward(ctx, h, emb)?;
        for (i, level) in self.up.iter().enumerate() {
            if i > 0 {
                h = h.upsample2()?;
            }
            for b in level {
                let s = skips.pop().expect("skip count matches");
                h = b.forward(ctx, concat(&[h, s], 0)?, emb)?;
            }
        }
        let h = self.norm_out.forward(ctx, h)?.silu()?;
        self.conv_out.forward(ctx, h)
    }
}
