//! Pinhole cameras and software rasterization of silhouettes and depth maps.
//!
//! Screen coordinates are normalized device coordinates in `[-1, 1]²` with `y` up; pixel
//! `(col, row)` has its center at `(−1 + (2·col + 1)/W, 1 − (2·row + 1)/H)`. Depth is the
//! eye-space distance along the viewing axis; background pixels read `far`.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape_err, Result};
use crate::numerics::ops::sigmoid;
use crate::numerics::{Tensor, Var};
use crate::tetmesh::{cross, dot, norm, sub, TriMesh, Vec3};

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub eye: Vec3,
    pub target: Vec3,
    pub up: Vec3,
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
    right: Vec3,
    true_up: Vec3,
    forward: Vec3,
}

/// Screen position, inverse depth and their derivatives with respect to the world point.
#[derive(Clone, Copy, Debug)]
pub struct Projected {
    pub s: [f64; 2],
    pub inv_z: f64,
    pub z: f64,
    pub ds: [Vec3; 2],
    pub dinv_z: Vec3,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        fov_y: f64,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let f = sub(target, eye);
        if norm(f) < 1e-12 {
            return invalid("camera eye coincides with target");
        }
        if !(near > 0.0 && near < far) {
            return invalid(format!("need 0 < near < far, got {near}, {far}"));
        }
        if !(fov_y > 0.0 && fov_y < PI) {
            return invalid(format!("fov_y {fov_y} outside (0, π)"));
        }
        if width == 0 || height == 0 {
            return invalid("empty image");
        }
        let forward = f.map(|c| c / norm(f));
        let r = cross(forward, up);
        if norm(r) < 1e-9 {
            return invalid("camera up vector parallel to viewing direction");
        }
        let right = r.map(|c| c / norm(r));
        let true_up = cross(right, forward);
        Ok(Self {
            eye,
            target,
            up,
            fov_y,
            width,
            height,
            near,
            far,
            right,
            true_up,
            forward,
        })
    }

    fn tan_xy(&self) -> (f64, f64) {
        let ty = (self.fov_y / 2.0).tan();
        (ty * self.width as f64 / self.height as f64, ty)
    }

    pub fn to_eye(&self, p: Vec3) -> Vec3 {
        let d = sub(p, self.eye);
        [dot(d, self.right), dot(d, self.true_up), dot(d, self.forward)]
    }

    /// `None` when the point is not in front of the near plane.
    pub fn project(&self, p: Vec3) -> Option<Projected> {
        let [x, y, z] = self.to_eye(p);
        if z <= self.near {
            return None;
        }
        let (tx, ty) = self.tan_xy();
        let f = self.forward;
        let ds = [
            std::array::from_fn(|k| (self.right[k] / z - x * f[k] / (z * z)) / tx),
            std::array::from_fn(|k| (self.true_up[k] / z - y * f[k] / (z * z)) / ty),
        ];
        Some(Projected {
            s: [x / (z * tx), y / (z * ty)],
            inv_z: 1.0 / z,
            z,
            ds,
            dinv_z: f.map(|c| -c / (z * z)),
        })
    }

    pub fn pixel_center(&self, col: usize, row: usize) -> [f64; 2] {
        [
            -1.0 + (2 * col + 1) as f64 / self.width as f64,
            1.0 - (2 * row + 1) as f64 / self.height as f64,
        ]
    }

    /// World-space ray through a pixel center: origin and unit direction.
    pub fn ray(&self, col: usize, row: usize) -> (Vec3, Vec3) {
        let [sx, sy] = self.pixel_center(col, row);
        let (tx, ty) = self.tan_xy();
        let d: Vec3 = std::array::from_fn(|k| {
            self.forward[k] + sx * tx * self.right[k] + sy * ty * self.true_up[k]
        });
        let n = norm(d);
        (self.eye, d.map(|c| c / n))
    }

    pub fn forward_axis(&self) -> Vec3 {
        self.forward
    }

    /// Continuous pixel coordinates of a screen point.
    fn to_pixel(&self, s: [f64; 2]) -> [f64; 2] {
        [
            (s[0] + 1.0) * 0.5 * self.width as f64 - 0.5,
            (1.0 - s[1]) * 0.5 * self.height as f64 - 0.5,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraDist {
    pub radius: (f64, f64),
    /// Elevation range in radians.
    pub elevation: (f64, f64),
    pub fov_y: f64,
    pub resolution: usize,
    pub near: f64,
    pub far: f64,
}

impl Default for CameraDist {
    fn default() -> Self {
        Self {
            radius: (2.0, 3.0),
            elevation: (-PI / 3.0, PI / 3.0),
            fov_y: PI / 3.0,
            resolution: 256,
            near: 0.1,
            far: 6.0,
        }
    }
}

/// Eye on a spherical shell (z up) looking at the origin.
pub fn sample_camera_rng<R: Rng + ?Sized>(rng: &mut R, dist: &CameraDist) -> Result<Camera> {
    let (r0, r1) = dist.radius;
    let (e0, e1) = dist.elevation;
    if !(0.0 < r0 && r0 <= r1) || !(e0 <= e1) || e0 < -1.5 || e1 > 1.5 {
        return invalid(format!("bad camera ranges {dist:?}"));
    }
    let az = rng.gen::<f64>() * 2.0 * PI;
    let el = if e1 > e0 { rng.gen_range(e0..e1) } else { e0 };
    let r = if r1 > r0 { rng.gen_range(r0..r1) } else { r0 };
    let eye = [r * el.cos() * az.cos(), r * el.cos() * az.sin(), r * el.sin()];
    Camera::look_at(
        eye,
        [0.0; 3],
        [0.0, 0.0, 1.0],
        dist.fov_y,
        dist.resolution,
        dist.resolution,
        dist.near,
        dist.far,
    )
}

pub fn sample_camera(seed: u64, dist: &CameraDist) -> Result<Camera> {
    sample_camera_rng(&mut ChaCha8Rng::seed_from_u64(seed), dist)
}

/// Row-major `H × W` mask and depth images.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOut {
    pub width: usize,
    pub height: usize,
    pub mask: Vec<f64>,
    pub depth: Vec<f64>,
}

impl RenderOut {
    pub fn background(cam: &Camera) -> Self {
        let n = cam.width * cam.height;
        Self {
            width: cam.width,
            height: cam.height,
            mask: vec![0.0; n],
            depth: vec![cam.far; n],
        }
    }

    pub fn coverage(&self) -> f64 {
        self.mask.iter().filter(|&&m| m > 0.5).count() as f64 / self.mask.len() as f64
    }
}

#[inline]
fn edge_fn(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

fn project_faces(mesh: &TriMesh, cam: &Camera) -> (Vec<Option<Projected>>, Vec<Option<[Projected; 3]>>) {
    let proj: Vec<Option<Projected>> = mesh.vertices.iter().map(|&v| cam.project(v)).collect();
    let faces = mesh
        .faces
        .iter()
        .map(|f| {
            let [a, b, c] = f.map(|i| proj[i as usize]);
            Some([a?, b?, c?])
        })
        .collect();
    (proj, faces)
}

/// Pixel index range (inclusive lo, exclusive hi) whose centers may lie within `margin` of
/// the screen-space box `[lo, hi]`.
fn pixel_range(cam: &Camera, lo: [f64; 2], hi: [f64; 2], margin: f64) -> Option<(usize, usize, usize, usize)> {
    let a = cam.to_pixel([lo[0] - margin, hi[1] + margin]);
    let b = cam.to_pixel([hi[0] + margin, lo[1] - margin]);
    let c0 = a[0].ceil().max(0.0);
    let r0 = a[1].ceil().max(0.0);
    let c1 = (b[0].floor() + 1.0).min(cam.width as f64);
    let r1 = (b[1].floor() + 1.0).min(cam.height as f64);
    (c0 < c1 && r0 < r1).then(|| (c0 as usize, c1 as usize, r0 as usize, r1 as usize))
}

/// Z-buffered rasterization at pixel centers with perspective-correct depth. Faces are
/// two-sided; faces reaching behind the near plane are skipped.
pub fn rasterize_hard(mesh: &TriMesh, cam: &Camera) -> RenderOut {
    let mut out = RenderOut::background(cam);
    let (_, faces) = project_faces(mesh, cam);
    for q in faces.iter().flatten() {
        let s = q.map(|p| p.s);
        let area = edge_fn(s[0], s[1], s[2]);
        if area.abs() < 1e-300 {
            continue;
        }
        let lo = [s[0][0].min(s[1][0]).min(s[2][0]), s[0][1].min(s[1][1]).min(s[2][1])];
        let hi = [s[0][0].max(s[1][0]).max(s[2][0]), s[0][1].max(s[1][1]).max(s[2][1])];
        let Some((c0, c1, r0, r1)) = pixel_range(cam, lo, hi, 0.0) else {
            continue;
        };
        for row in r0..r1 {
            for col in c0..c1 {
                let p = cam.pixel_center(col, row);
                let l = [
                    edge_fn(s[1], s[2], p) / area,
                    edge_fn(s[2], s[0], p) / area,
                    edge_fn(s[0], s[1], p) / area,
                ];
                if l.iter().any(|&x| x < 0.0) {
                    continue;
                }
                let z = 1.0 / (l[0] * q[0].inv_z + l[1] * q[1].inv_z + l[2] * q[2].inv_z);
                let k = row * cam.width + col;
                if z < out.depth[k] {
                    out.depth[k] = z.max(cam.near);
                    out.mask[k] = 1.0;
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoftParams {
    /// Sigmoid sharpness in squared screen units.
    pub tau: f64,
    /// Depth softmax temperature in scene units.
    pub gamma: f64,
}

impl Default for SoftParams {
    fn default() -> Self {
        Self {
            tau: 1e-4,
            gamma: 0.01,
        }
    }
}

/// Per-pixel, per-face soft coverage quantities.
struct Pair {
    w: f64,
    sign: f64,
    /// closest boundary edge (local start vertex), its parameter and the closest point
    edge: usize,
    t: f64,
    c: [f64; 2],
    lam: [f64; 3],
    z: f64,
}

#[inline]
fn soft_pair(s: &[[f64; 2]; 3], inv_z: [f64; 3], area: f64, p: [f64; 2], tau: f64) -> Pair {
    let l = [
        edge_fn(s[1], s[2], p) / area,
        edge_fn(s[2], s[0], p) / area,
        edge_fn(s[0], s[1], p) / area,
    ];
    let inside = l.iter().all(|&x| x >= 0.0);
    let mut best = (f64::INFINITY, 0, 0.0, [0.0; 2]);
    for e in 0..3 {
        let (a, b) = (s[e], s[(e + 1) % 3]);
        let ab = [b[0] - a[0], b[1] - a[1]];
        let len2 = ab[0] * ab[0] + ab[1] * ab[1];
        let t = if len2 > 0.0 {
            (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let c = [a[0] + t * ab[0], a[1] + t * ab[1]];
        let d2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
        if d2 < best.0 {
            best = (d2, e, t, c);
        }
    }
    let sign = if inside { 1.0 } else { -1.0 };
    let w = sigmoid(sign * best.0 / tau);
    let mu = l.map(|x| x.max(0.0));
    let sm = mu[0] + mu[1] + mu[2];
    let lam = mu.map(|x| x / sm);
    let z = 1.0 / (lam[0] * inv_z[0] + lam[1] * inv_z[1] + lam[2] * inv_z[2]);
    Pair {
        w,
        sign,
        edge: best.1,
        t: best.2,
        c: best.3,
        lam,
        z,
    }
}

/// Screen-space triangles worth visiting: projected vertices, pixel box and signed area.
struct SoftFace {
    verts: [u32; 3],
    q: [Projected; 3],
    area: f64,
    range: (usize, usize, usize, usize),
}

fn soft_faces(positions: &[f64], faces: &[[u32; 3]], cam: &Camera, margin: f64) -> Vec<SoftFace> {
    let mut out = Vec::new();
    for f in faces {
        let q = f.map(|i| {
            let i = i as usize;
            cam.project([positions[i * 3], positions[i * 3 + 1], positions[i * 3 + 2]])
        });
        let [Some(a), Some(b), Some(c)] = q else {
            continue;
        };
        if a.z >= cam.far || b.z >= cam.far || c.z >= cam.far {
            continue;
        }
        let q = [a, b, c];
        let s = q.map(|p| p.s);
        let area = edge_fn(s[0], s[1], s[2]);
        if area.abs() < 1e-14 {
            continue;
        }
        let lo = [s[0][0].min(s[1][0]).min(s[2][0]), s[0][1].min(s[1][1]).min(s[2][1])];
        let hi = [s[0][0].max(s[1][0]).max(s[2][0]), s[0][1].max(s[1][1]).max(s[2][1])];
        if let Some(range) = pixel_range(cam, lo, hi, margin) {
            out.push(SoftFace {
                verts: *f,
                q,
                area,
                range,
            });
        }
    }
    out
}

/// Differentiable soft rasterization of `[M, 3]` vertex positions. Returns `[2, H, W]` with
/// the soft mask in channel 0 and depth in channel 1.
///
/// Face influence is `w = sigmoid(±d²/τ)` with `d` the screen distance to the face boundary
/// (positive inside); `mask = 1 − Π(1 − w)`. Depth blends clamped perspective-correct face
/// depths with weights `w·exp(−(z − z_min)/γ)` and falls back to `far` as the mask vanishes.
pub fn rasterize_soft<'t>(
    positions: Var<'t>,
    faces: &[[u32; 3]],
    cam: &Camera,
    params: SoftParams,
) -> Result<Var<'t>> {
    let pv = positions.value();
    let ps = pv.shape();
    if ps.len() != 2 || ps[1] != 3 {
        return shape_err("rasterize_soft", format!("positions {ps:?}"));
    }
    if !(params.tau > 0.0 && params.gamma > 0.0) {
        return invalid(format!("soft rasterizer needs tau, gamma > 0, got {params:?}"));
    }
    let m = ps[0];
    if faces.iter().flatten().any(|&i| i as usize >= m) {
        return shape_err("rasterize_soft", "face index out of range");
    }
    let (w, h) = (cam.width, cam.height);
    let n = w * h;
    let SoftParams { tau, gamma } = params;
    let margin = (23.0 * tau).sqrt();
    let sf = Rc::new(soft_faces(pv.data(), faces, cam, margin));

    // running product over unsaturated faces, saturated count, online depth softmax
    let mut prod = vec![1.0; n];
    let mut nsat = vec![0u32; n];
    let mut zmin = vec![f64::INFINITY; n];
    let mut sw = vec![0.0; n];
    let mut swz = vec![0.0; n];
    for f in sf.iter() {
        let s = f.q.map(|p| p.s);
        let iz = f.q.map(|p| p.inv_z);
        let (c0, c1, r0, r1) = f.range;
        for row in r0..r1 {
            for col in c0..c1 {
                let p = cam.pixel_center(col, row);
                let pr = soft_pair(&s, iz, f.area, p, tau);
                if pr.w == 0.0 {
                    continue;
                }
                let k = row * w + col;
                if pr.w >= 1.0 {
                    nsat[k] += 1;
                } else {
                    prod[k] *= 1.0 - pr.w;
                }
                if pr.z < zmin[k] {
                    let scale = if zmin[k].is_finite() { (-(zmin[k] - pr.z) / gamma).exp() } else { 0.0 };
                    sw[k] *= scale;
                    swz[k] *= scale;
                    zmin[k] = pr.z;
                }
                let om = pr.w * (-(pr.z - zmin[k]) / gamma).exp();
                sw[k] += om;
                swz[k] += om * pr.z;
            }
        }
    }
    let far = cam.far;
    let mask: Vec<f64> = (0..n).map(|k| if nsat[k] > 0 { 1.0 } else { 1.0 - prod[k] }).collect();
    let fg: Vec<f64> = (0..n).map(|k| if sw[k] > 0.0 { swz[k] / sw[k] } else { far }).collect();
    let mut out = mask.clone();
    out.extend((0..n).map(|k| mask[k] * fg[k] + (1.0 - mask[k]) * far));
    let cam = cam.clone();
    positions.tape().custom(
        "rasterize_soft",
        Tensor::from_parts(vec![2, h, w], out),
        &[positions],
        move |g, _| {
            let (gmask, gdepth) = g.data().split_at(n);
            let mut gpos = vec![0.0; m * 3];
            for f in sf.iter() {
                let s = f.q.map(|p| p.s);
                let iz = f.q.map(|p| p.inv_z);
                let (c0, c1, r0, r1) = f.range;
                // adjoints of screen positions and inverse depths of this face's vertices
                let mut gs = [[0.0; 2]; 3];
                let mut giz = [0.0; 3];
                for row in r0..r1 {
                    for col in c0..c1 {
                        let k = row * w + col;
                        if gmask[k] == 0.0 && gdepth[k] == 0.0 {
                            continue;
                        }
                        let p = cam.pixel_center(col, row);
                        let pr = soft_pair(&s, iz, f.area, p, tau);
                        if pr.w == 0.0 {
                            continue;
                        }
                        let mk = mask[k];
                        let dm_dw = if nsat[k] == 0 {
                            prod[k] / (1.0 - pr.w)
                        } else if nsat[k] == 1 && pr.w >= 1.0 {
                            prod[k]
                        } else {
                            0.0
                        };
                        let g_m = gmask[k] + gdepth[k] * (fg[k] - far);
                        let g_f = gdepth[k] * mk;
                        let (mut g_w, mut g_z) = (g_m * dm_dw, 0.0);
                        if sw[k] > 0.0 {
                            let e = (-(pr.z - zmin[k]) / gamma).exp();
                            let om = pr.w * e;
                            g_w += g_f * (pr.z - fg[k]) / sw[k] * e;
                            g_z = g_f * om / sw[k] * (1.0 - (pr.z - fg[k]) / gamma);
                        }
                        // coverage path through the closest boundary point
                        let g_d2 = g_w * pr.w * (1.0 - pr.w) * pr.sign / tau;
                        if g_d2 != 0.0 {
                            let (a, b) = (pr.edge, (pr.edge + 1) % 3);
                            let r = [p[0] - pr.c[0], p[1] - pr.c[1]];
                            for k2 in 0..2 {
                                gs[a][k2] += g_d2 * -2.0 * r[k2] * (1.0 - pr.t);
                                gs[b][k2] += g_d2 * -2.0 * r[k2] * pr.t;
                            }
                        }
                        if g_z == 0.0 {
                            continue;
                        }
                        // depth path: z = 1 / Σ λ̃ᵢ ιᵢ with clamped, renormalized barycentrics
                        let z2 = pr.z * pr.z;
                        for i in 0..3 {
                            giz[i] += g_z * -z2 * pr.lam[i];
                        }
                        let g_lt: [f64; 3] = std::array::from_fn(|i| g_z * -z2 * iz[i]);
                        let l = [
                            edge_fn(s[1], s[2], p) / f.area,
                            edge_fn(s[2], s[0], p) / f.area,
                            edge_fn(s[0], s[1], p) / f.area,
                        ];
                        let mu_sum: f64 = l.iter().map(|x| x.max(0.0)).sum();
                        let dot_l: f64 = (0..3).map(|i| g_lt[i] * pr.lam[i]).sum();
                        let g_l: [f64; 3] = std::array::from_fn(|i| {
                            if l[i] > 0.0 { (g_lt[i] - dot_l) / mu_sum } else { 0.0 }
                        });
                        // λᵢ = Eᵢ / A with Eᵢ the edge function opposite vertex i
                        let mut g_area = 0.0;
                        for i in 0..3 {
                            if g_l[i] == 0.0 {
                                continue;
                            }
                            let (ia, ib) = ((i + 1) % 3, (i + 2) % 3);
                            let (a, b) = (s[ia], s[ib]);
                            let ge = g_l[i] / f.area;
                            gs[ia][0] += ge * (b[1] - p[1]);
                            gs[ia][1] += ge * (p[0] - b[0]);
                            gs[ib][0] += ge * (p[1] - a[1]);
                            gs[ib][1] += ge * -(p[0] - a[0]);
                            g_area -= g_l[i] * l[i] / f.area;
                        }
                        if g_area != 0.0 {
                            let (q0, q1, q2) = (s[0], s[1], s[2]);
                            gs[0][0] += g_area * (q1[1] - q2[1]);
                            gs[0][1] += g_area * (q2[0] - q1[0]);
                            gs[1][0] += g_area * (q2[1] - q0[1]);
                            gs[1][1] += g_area * -(q2[0] - q0[0]);
                            gs[2][0] += g_area * -(q1[1] - q0[1]);
                            gs[2][1] += g_area * (q1[0] - q0[0]);
                        }
                    }
                }
                for (i, &v) in f.verts.iter().enumerate() {
                    let q = &f.q[i];
                    for k2 in 0..3 {
                        gpos[v as usize * 3 + k2] +=
                            gs[i][0] * q.ds[0][k2] + gs[i][1] * q.ds[1][k2] + giz[i] * q.dinv_z[k2];
                    }
                }
            }
            vec![Some(Tensor::from_parts(vec![m, 3], gpos))]
        },
    )
}

/// `(L_mask, L_depth)`: mean squared mask error over all pixels, and mean absolute depth
/// error over pixels where either mask exceeds 0.5 (zero when there are none).
pub fn render_losses<'t>(pred: Var<'t>, gt: &RenderOut) -> Result<(Var<'t>, Var<'t>)> {
    let (h, w) = (gt.height, gt.width);
    if pred.shape() != [2, h, w] {
        return shape_err("render_losses", format!("prediction {:?} vs {h}×{w}", pred.shape()));
    }
    let tape = pred.tape();
    let pv = pred.value();
    let n = h * w;
    let pm = pred.narrow(0, 0, 1)?.reshape(&[n])?;
    let pd = pred.narrow(0, 1, 1)?.reshape(&[n])?;
    let l_mask = pm
        .sub(tape.constant(Tensor::from_parts(vec![n], gt.mask.clone())))?
        .square()?
        .mean()?;
    let support: Vec<bool> = (0..n).map(|k| gt.mask[k] > 0.5 || pv.data()[k] > 0.5).collect();
    let count = support.iter().filter(|&&b| b).count();
    let l_depth = if count == 0 {
        pd.mul_scalar(0.0)?.sum()?
    } else {
        let wts: Vec<f64> = support.iter().map(|&b| if b { 1.0 / count as f64 } else { 0.0 }).collect();
        pd.sub(tape.constant(Tensor::from_parts(vec![n], gt.depth.clone())))?
            .abs()?
            .mul(tape.constant(Tensor::from_parts(vec![n], wts)))?
            .sum()?
    };
    Ok((l_mask, l_depth))
}

/// Plain-value version of [`render_losses`].
pub fn render_losses_values(pred: &RenderOut, gt: &RenderOut) -> Result<(f64, f64)> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return shape_err("render_losses", "resolution mismatch");
    }
    let n = gt.mask.len();
    let lm = pred.mask.iter().zip(&gt.mask).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n as f64;
    let (mut sum, mut cnt) = (0.0, 0usize);
    for k in 0..n {
        if gt.mask[k] > 0.5 || pred.mask[k] > 0.5 {
            sum += (pred.depth[k] - gt.depth[k]).abs();
            cnt += 1;
        }
    }
    Ok((lm, if cnt == 0 { 0.0 } else { sum / cnt as f64 }))
}

/// Split a `[2, H, W]` soft render into a [`RenderOut`].
pub fn render_out_from_tensor(t: &Tensor) -> Result<RenderOut> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 2 {
        return shape_err("render_out", format!("{s:?}"));
    }
    let n = s[1] * s[2];
    Ok(RenderOut {
        width: s[2],
        height: s[1],
        mask: t.data()[..n].to_vec(),
        depth: t.data()[n..].to_vec(),
    })
}

/// 8-bit binary PGM (P5) of a mask in `[0, 1]`.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    if values.len() != width * height {
        return shape_err("write_pgm", "size mismatch");
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

/// Little-endian grayscale PFM ("Pf", scale −1.0), rows stored bottom to top.
pub fn write_pfm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    if values.len() != width * height {
        return shape_err("write_pfm", "size mismatch");
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "Pf\n{width} {height}\n-1.0\n")?;
    for row in (0..height).rev() {
        for v in &values[row * width..(row + 1) * width] {
            f.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}
