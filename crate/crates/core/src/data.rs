//! Analytic CSG shapes with procedural colors: the ground-truth source for training.
//!
//! Signed distances are negative inside. Primitive distances are exact; CSG combinations
//! (`min`, `max`, `max(a, −b)`) are lower bounds of the true distance, which keeps sphere
//! tracing conservative.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::Tensor;
use crate::render::{Camera, RenderOut};
use crate::tetmesh::{dot, norm, sub, Vec3};

pub type Rgb = [f64; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Sphere { center: Vec3, radius: f64 },
    Box { center: Vec3, half: Vec3 },
    /// Ring in the xy plane.
    Torus { center: Vec3, major: f64, minor: f64 },
    /// Capped, axis along z.
    Cylinder { center: Vec3, radius: f64, half_height: f64 },
    Capsule { a: Vec3, b: Vec3, radius: f64 },
}

impl Primitive {
    pub fn sdf(&self, p: Vec3) -> f64 {
        match *self {
            Primitive::Sphere { center, radius } => norm(sub(p, center)) - radius,
            Primitive::Box { center, half } => {
                let d = sub(p, center);
                let q: Vec3 = std::array::from_fn(|k| d[k].abs() - half[k]);
                norm(q.map(|x| x.max(0.0))) + q[0].max(q[1]).max(q[2]).min(0.0)
            }
            Primitive::Torus { center, major, minor } => {
                let d = sub(p, center);
                let qx = (d[0] * d[0] + d[1] * d[1]).sqrt() - major;
                (qx * qx + d[2] * d[2]).sqrt() - minor
            }
            Primitive::Cylinder { center, radius, half_height } => {
                let d = sub(p, center);
                let a = (d[0] * d[0] + d[1] * d[1]).sqrt() - radius;
                let b = d[2].abs() - half_height;
                a.max(b).min(0.0) + (a.max(0.0).powi(2) + b.max(0.0).powi(2)).sqrt()
            }
            Primitive::Capsule { a, b, radius } => {
                let pa = sub(p, a);
                let ba = sub(b, a);
                let bb = dot(ba, ba);
                let h = if bb > 0.0 { (dot(pa, ba) / bb).clamp(0.0, 1.0) } else { 0.0 };
                norm(std::array::from_fn(|k| pa[k] - ba[k] * h)) - radius
            }
        }
    }

    /// Point-membership test written independently of [`Primitive::sdf`].
    pub fn contains(&self, p: Vec3) -> bool {
        match *self {
            Primitive::Sphere { center, radius } => dot(sub(p, center), sub(p, center)) < radius * radius,
            Primitive::Box { center, half } => (0..3).all(|k| (p[k] - center[k]).abs() < half[k]),
            Primitive::Torus { center, major, minor } => {
                let d = sub(p, center);
                let rho = d[0].hypot(d[1]);
                (rho - major).powi(2) + d[2] * d[2] < minor * minor
            }
            Primitive::Cylinder { center, radius, half_height } => {
                let d = sub(p, center);
                d[0] * d[0] + d[1] * d[1] < radius * radius && d[2].abs() < half_height
            }
            Primitive::Capsule { a, b, radius } => {
                // inside either end ball or the finite slab of the cylinder
                let ba = sub(b, a);
                let t = dot(sub(p, a), ba) / dot(ba, ba).max(1e-300);
                let r2 = radius * radius;
                if dot(sub(p, a), sub(p, a)) < r2 || dot(sub(p, b), sub(p, b)) < r2 {
                    return true;
                }
                (0.0..=1.0).contains(&t) && {
                    let c: Vec3 = std::array::from_fn(|k| a[k] + t * ba[k]);
                    dot(sub(p, c), sub(p, c)) < r2
                }
            }
        }
    }

    fn transformed(&self, scale: f64, offset: Vec3) -> Self {
        let m = |v: Vec3| -> Vec3 { std::array::from_fn(|k| v[k] * scale + offset[k]) };
        match *self {
            Primitive::Sphere { center, radius } => Primitive::Sphere { center: m(center), radius: radius * scale },
            Primitive::Box { center, half } => Primitive::Box { center: m(center), half: half.map(|h| h * scale) },
            Primitive::Torus { center, major, minor } => Primitive::Torus {
                center: m(center),
                major: major * scale,
                minor: minor * scale,
            },
            Primitive::Cylinder { center, radius, half_height } => Primitive::Cylinder {
                center: m(center),
                radius: radius * scale,
                half_height: half_height * scale,
            },
            Primitive::Capsule { a, b, radius } => Primitive::Capsule { a: m(a), b: m(b), radius: radius * scale },
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Primitive::Sphere { radius, .. } => radius > 0.0,
            Primitive::Box { half, .. } => half.iter().all(|&h| h > 0.0),
            Primitive::Torus { major, minor, .. } => minor > 0.0 && major > minor,
            Primitive::Cylinder { radius, half_height, .. } => radius > 0.0 && half_height > 0.0,
            Primitive::Capsule { radius, .. } => radius > 0.0,
        };
        if ok {
            Ok(())
        } else {
            invalid(format!("degenerate primitive {self:?}"))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Csg {
    Leaf { shape: Primitive },
    Union { a: Box<Csg>, b: Box<Csg> },
    Intersection { a: Box<Csg>, b: Box<Csg> },
    Subtraction { a: Box<Csg>, b: Box<Csg> },
}

impl Csg {
    pub fn leaf(p: Primitive) -> Self {
        Csg::Leaf { shape: p }
    }

    pub fn union(a: Csg, b: Csg) -> Self {
        Csg::Union { a: Box::new(a), b: Box::new(b) }
    }

    pub fn intersection(a: Csg, b: Csg) -> Self {
        Csg::Intersection { a: Box::new(a), b: Box::new(b) }
    }

    pub fn subtraction(a: Csg, b: Csg) -> Self {
        Csg::Subtraction { a: Box::new(a), b: Box::new(b) }
    }

    pub fn sdf(&self, p: Vec3) -> f64 {
        match self {
            Csg::Leaf { shape } => shape.sdf(p),
            Csg::Union { a, b } => a.sdf(p).min(b.sdf(p)),
            Csg::Intersection { a, b } => a.sdf(p).max(b.sdf(p)),
            Csg::Subtraction { a, b } => a.sdf(p).max(-b.sdf(p)),
        }
    }

    pub fn contains(&self, p: Vec3) -> bool {
        match self {
            Csg::Leaf { shape } => shape.contains(p),
            Csg::Union { a, b } => a.contains(p) || b.contains(p),
            Csg::Intersection { a, b } => a.contains(p) && b.contains(p),
            Csg::Subtraction { a, b } => a.contains(p) && !b.contains(p),
        }
    }

    /// Leaves in depth-first order.
    pub fn leaves(&self) -> Vec<&Primitive> {
        let mut out = Vec::new();
        fn walk<'a>(c: &'a Csg, out: &mut Vec<&'a Primitive>) {
            match c {
                Csg::Leaf { shape } => out.push(shape),
                Csg::Union { a, b } | Csg::Intersection { a, b } | Csg::Subtraction { a, b } => {
                    walk(a, out);
                    walk(b, out);
                }
            }
        }
        walk(self, &mut out);
        out
    }

    fn map_leaves(&self, f: &impl Fn(&Primitive) -> Primitive) -> Csg {
        match self {
            Csg::Leaf { shape } => Csg::leaf(f(shape)),
            Csg::Union { a, b } => Csg::union(a.map_leaves(f), b.map_leaves(f)),
            Csg::Intersection { a, b } => Csg::intersection(a.map_leaves(f), b.map_leaves(f)),
            Csg::Subtraction { a, b } => Csg::subtraction(a.map_leaves(f), b.map_leaves(f)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum ColorRule {
    Constant { color: Rgb },
    /// Alternates between the two colors every `period` along `axis` (floor parity).
    Stripes { axis: usize, period: f64, colors: [Rgb; 2] },
    Checker { period: f64, colors: [Rgb; 2] },
    /// Color of the leaf whose surface is nearest, leaves in depth-first order.
    PerPrimitive { colors: Vec<Rgb> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub name: String,
    pub tree: Csg,
    pub color: ColorRule,
}

fn parity(x: f64) -> usize {
    (x.floor() as i64).rem_euclid(2) as usize
}

impl ShapeSpec {
    pub fn new(name: impl Into<String>, tree: Csg, color: ColorRule) -> Result<Self> {
        let s = Self { name: name.into(), tree, color };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for l in self.tree.leaves() {
            l.validate()?;
        }
        let in_unit = |c: &Rgb| c.iter().all(|v| (0.0..=1.0).contains(v));
        let ok = match &self.color {
            ColorRule::Constant { color } => in_unit(color),
            ColorRule::Stripes { axis, period, colors } => *axis < 3 && *period > 0.0 && colors.iter().all(in_unit),
            ColorRule::Checker { period, colors } => *period > 0.0 && colors.iter().all(in_unit),
            ColorRule::PerPrimitive { colors } => colors.len() == self.tree.leaves().len() && colors.iter().all(in_unit),
        };
        if ok {
            Ok(())
        } else {
            invalid(format!("bad color rule for shape {:?}", self.name))
        }
    }

    pub fn sdf(&self, p: Vec3) -> f64 {
        self.tree.sdf(p)
    }

    pub fn color(&self, p: Vec3) -> Rgb {
        match &self.color {
            ColorRule::Constant { color } => *color,
            ColorRule::Stripes { axis, period, colors } => colors[parity(p[*axis] / period)],
            ColorRule::Checker { period, colors } => {
                colors[(parity(p[0] / period) + parity(p[1] / period) + parity(p[2] / period)) % 2]
            }
            ColorRule::PerPrimitive { colors } => {
                let leaves = self.tree.leaves();
                let mut best = (f64::INFINITY, 0);
                for (i, l) in leaves.iter().enumerate() {
                    let d = l.sdf(p).abs();
                    if d < best.0 {
                        best = (d, i);
                    }
                }
                colors[best.1]
            }
        }
    }

    /// Same shape under `p ↦ scale·p + offset`.
    pub fn transformed(&self, scale: f64, offset: Vec3) -> Result<Self> {
        if !(scale > 0.0) {
            return invalid("shape scale must be positive");
        }
        let color = match &self.color {
            ColorRule::Stripes { axis, period, colors } => ColorRule::Stripes {
                axis: *axis,
                period: period * scale,
                colors: *colors,
            },
            ColorRule::Checker { period, colors } => ColorRule::Checker { period: period * scale, colors: *colors },
            c => c.clone(),
        };
        Ok(Self {
            name: self.name.clone(),
            tree: self.tree.map_leaves(&|l| l.transformed(scale, offset)),
            color,
        })
    }
}

pub fn sdf_gradient(spec: &ShapeSpec, p: Vec3, h: f64) -> Vec3 {
    std::array::from_fn(|k| {
        let mut a = p;
        let mut b = p;
        a[k] += h;
        b[k] -= h;
        (spec.sdf(a) - spec.sdf(b)) / (2.0 * h)
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ColoredCloud {
    pub points: Vec<Vec3>,
    pub colors: Vec<Rgb>,
}

impl ColoredCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.len(), 3], self.points.iter().flatten().copied().collect())
    }

    pub fn colors_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.len(), 3], self.colors.iter().flatten().copied().collect())
    }
}

pub const SURFACE_TOL: f64 = 1e-4;
const PROJECTION_STEPS: usize = 12;
const ATTEMPTS_PER_POINT: usize = 50;

/// Surface samples: uniform proposals in `[-1, 1]³`, projected with `p ← p − s·∇s`, kept
/// once `|s| < 1e-4` within the domain.
pub fn sample_colored_pointcloud(spec: &ShapeSpec, n: usize, seed: u64) -> Result<ColoredCloud> {
    if n == 0 {
        return invalid("point count must be ≥ 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = ColoredCloud::default();
    let budget = n * ATTEMPTS_PER_POINT;
    let mut attempts = 0;
    while cloud.len() < n {
        if attempts == budget {
            return Err(Error::Invalid(format!(
                "surface sampling for {:?} accepted {} of {n} points in {budget} attempts",
                spec.name,
                cloud.len()
            )));
        }
        attempts += 1;
        let mut p: Vec3 = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        for _ in 0..PROJECTION_STEPS {
            let s = spec.sdf(p);
            if s.abs() < SURFACE_TOL {
                break;
            }
            let g = sdf_gradient(spec, p, 1e-6);
            p = std::array::from_fn(|k| p[k] - s * g[k]);
        }
        if spec.sdf(p).abs() < SURFACE_TOL && p.iter().all(|c| c.abs() <= 1.0) {
            cloud.colors.push(spec.color(p));
            cloud.points.push(p);
        }
    }
    Ok(cloud)
}

const TRACE_MAX_STEPS: usize = 1024;

/// Depth along the view axis of the first surface hit, or `None`.
pub fn trace_ray(spec: &ShapeSpec, cam: &Camera, origin: Vec3, dir: Vec3) -> Option<f64> {
    let fwd = dot(dir, cam.forward_axis());
    let mut t = 0.0;
    for _ in 0..TRACE_MAX_STEPS {
        let p: Vec3 = std::array::from_fn(|k| origin[k] + t * dir[k]);
        let s = spec.sdf(p);
        if s.abs() < SURFACE_TOL {
            let depth = t * fwd;
            return (depth >= cam.near && depth <= cam.far).then_some(depth);
        }
        t += s.abs();
        if t * fwd > cam.far {
            return None;
        }
    }
    None
}

/// Ground-truth mask and depth by sphere tracing the analytic field at pixel centers.
pub fn sphere_trace_render(spec: &ShapeSpec, cam: &Camera) -> RenderOut {
    let mut out = RenderOut::background(cam);
    for row in 0..cam.height {
        for col in 0..cam.width {
            let (o, d) = cam.ray(col, row);
            if let Some(depth) = trace_ray(spec, cam, o, d) {
                let k = row * cam.width + col;
                out.mask[k] = 1.0;
                out.depth[k] = depth;
            }
        }
    }
    out
}

pub const NORMALIZE_BOUND: f64 = 0.95;

/// Scale and offset taking the bounding box of `points` to a centered box whose largest
/// half-extent is 0.95.
pub fn normalization(points: &[Vec3]) -> Result<(f64, Vec3)> {
    if points.is_empty() {
        return invalid("normalize_points: no points");
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let half = (0..3).map(|k| 0.5 * (hi[k] - lo[k])).fold(0.0, f64::max);
    if !(half > 0.0) || !half.is_finite() {
        return invalid("normalize_points: zero-extent input");
    }
    let scale = NORMALIZE_BOUND / half;
    let offset = std::array::from_fn(|k| -0.5 * (lo[k] + hi[k]) * scale);
    Ok((scale, offset))
}

pub fn normalize_points(points: &[Vec3]) -> Result<Vec<Vec3>> {
    let (s, o) = normalization(points)?;
    Ok(points.iter().map(|p| std::array::from_fn(|k| p[k] * s + o[k])).collect())
}

/// Shape rescaled so its sampled surface bounding box fits `[-0.95, 0.95]³`.
pub fn normalize_shape(spec: &ShapeSpec, samples: usize, seed: u64) -> Result<ShapeSpec> {
    let cloud = sample_colored_pointcloud(spec, samples, seed)?;
    let (s, o) = normalization(&cloud.points)?;
    spec.transformed(s, o)
}

/// The four-shape acceptance fixture: sphere, box, torus and a sphere–box union. Box faces
/// sit on multiples of 1/32, so extraction on grids of resolution 64 keeps their edges sharp.
pub fn desk4() -> Vec<ShapeSpec> {
    let red = [0.8, 0.2, 0.2];
    vec![
        ShapeSpec {
            name: "sphere".into(),
            tree: Csg::leaf(Primitive::Sphere { center: [0.0; 3], radius: 0.6 }),
            color: ColorRule::Constant { color: red },
        },
        ShapeSpec {
            name: "box".into(),
            tree: Csg::leaf(Primitive::Box { center: [0.0; 3], half: [0.5, 0.375, 0.3125] }),
            color: ColorRule::Stripes { axis: 2, period: 0.2, colors: [[0.15, 0.3, 0.85], [0.95, 0.9, 0.2]] },
        },
        ShapeSpec {
            name: "torus".into(),
            tree: Csg::leaf(Primitive::Torus { center: [0.0; 3], major: 0.55, minor: 0.22 }),
            color: ColorRule::Checker { period: 0.3, colors: [[0.1, 0.7, 0.3], [0.9, 0.9, 0.9]] },
        },
        ShapeSpec {
            name: "sphere_box".into(),
            tree: Csg::union(
                Csg::leaf(Primitive::Sphere { center: [-0.3, 0.0, 0.1], radius: 0.42 }),
                Csg::leaf(Primitive::Box { center: [0.34375, 0.0, -0.09375], half: [0.3125; 3] }),
            ),
            color: ColorRule::PerPrimitive { colors: vec![[0.95, 0.55, 0.1], [0.5, 0.2, 0.7]] },
        },
    ]
}

pub fn desk4_shape(name: &str) -> Result<ShapeSpec> {
    desk4()
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| Error::Invalid(format!("unknown desk4 shape {name:?}")))
}
