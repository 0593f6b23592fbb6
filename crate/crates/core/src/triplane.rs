//! Triplane feature grids: rollout, bilinear point sampling, resizing and 3D-aware convolution.
//!
//! A triplane is stored channels-first as one `[3, C, R, R]` tensor holding the planes in the
//! order `xz, xy, yz`. Within a plane the first named axis runs along columns and the second
//! along rows, so a point `(x, y, z)` reads plane `xz` at column `x`, row `z`. Continuous
//! coordinates in `[-1, 1]` map to grid nodes with the align-corners rule
//! `u = (c + 1) / 2 · (R − 1)`.

use std::rc::Rc;

use crate::error::{invalid, shape_err, Error, Result};
use crate::numerics::ops::permute_tensor;
use crate::numerics::{concat, Tensor, Var};

pub const X: usize = 0;
pub const Y: usize = 1;
pub const Z: usize = 2;

/// `(column axis, row axis)` of each plane, in storage order.
pub const PLANE_AXES: [(usize, usize); 3] = [(X, Z), (X, Y), (Y, Z)];

pub const PLANE_NAMES: [&str; 3] = ["xz", "xy", "yz"];

#[derive(Clone, Debug, PartialEq)]
pub struct Triplane {
    planes: Tensor,
}

impl Triplane {
    pub fn new(planes: Tensor) -> Result<Self> {
        check_planes_shape(planes.shape())?;
        if !planes.is_finite() {
            return Err(Error::NonFinite("Triplane::new".into()));
        }
        Ok(Self { planes })
    }

    pub fn zeros(res: usize, channels: usize) -> Self {
        Self {
            planes: Tensor::zeros(&[3, channels, res, res]),
        }
    }

    pub fn res(&self) -> usize {
        self.planes.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.planes.shape()[1]
    }

    pub fn planes(&self) -> &Tensor {
        &self.planes
    }

    pub fn into_tensor(self) -> Tensor {
        self.planes
    }

    /// Plane `p` as a `[C, R, R]` slice.
    pub fn plane(&self, p: usize) -> &[f64] {
        let n = self.channels() * self.res() * self.res();
        &self.planes.data()[p * n..(p + 1) * n]
    }

    pub fn plane_mut(&mut self, p: usize) -> &mut [f64] {
        let n = self.channels() * self.res() * self.res();
        &mut self.planes.data_mut()[p * n..(p + 1) * n]
    }

    /// Concatenate the planes along width into one `[C, R, 3R]` image
    /// (an `H × 3W × C` grid in channels-first storage).
    pub fn rollout(&self) -> Tensor {
        let s = self.planes.shape();
        let t = permute_tensor(&self.planes, &[1, 2, 0, 3]);
        Tensor::from_parts(vec![s[1], s[2], 3 * s[3]], t.into_data())
    }

    /// Inverse of [`Triplane::rollout`].
    pub fn unroll(image: &Tensor) -> Result<Self> {
        let s = image.shape();
        if s.len() != 3 || s[2] != 3 * s[1] {
            return shape_err("unroll", format!("expected [C, R, 3R], got {s:?}"));
        }
        let t = Tensor::from_parts(vec![s[0], s[1], 3, s[1]], image.data().to_vec());
        Self::new(permute_tensor(&t, &[2, 0, 1, 3]))
    }

    pub fn resize(&self, new_res: usize) -> Result<Self> {
        if new_res < 2 {
            return invalid(format!("resize target must be >= 2, got {new_res}"));
        }
        Ok(Self {
            planes: resize_tensor(&self.planes, new_res),
        })
    }

    pub fn scale(&self, k: f64) -> Self {
        Self {
            planes: self.planes.scale(k),
        }
    }
}

fn check_planes_shape(s: &[usize]) -> Result<()> {
    if s.len() != 4 || s[0] != 3 || s[2] != s[3] || s[2] < 2 || s[1] == 0 {
        return shape_err(
            "triplane",
            format!("expected [3, C, R, R] with R >= 2, got {s:?}"),
        );
    }
    Ok(())
}

/// Differentiable rollout `[3, C, R, R] → [C, R, 3R]`.
pub fn rollout_var(planes: Var<'_>) -> Result<Var<'_>> {
    let s = planes.shape();
    check_planes_shape(&s)?;
    planes.permute(&[1, 2, 0, 3])?.reshape(&[s[1], s[2], 3 * s[3]])
}

/// Differentiable unroll `[C, R, 3R] → [3, C, R, R]`.
pub fn unroll_var(image: Var<'_>) -> Result<Var<'_>> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 * s[1] {
        return shape_err("unroll", format!("expected [C, R, 3R], got {s:?}"));
    }
    image.reshape(&[s[0], s[1], 3, s[1]])?.permute(&[2, 0, 1, 3])
}

/// Align-corners cell lookup: lower node index and fractional offset for coordinate `c`.
#[inline]
fn locate(c: f64, res: usize) -> (usize, f64) {
    let u = (c.clamp(-1.0, 1.0) + 1.0) * 0.5 * (res - 1) as f64;
    let i = (u.floor() as usize).min(res - 2);
    (i, u - i as f64)
}

/// Bilinear features of `points` (`[N, 3]`) from `planes` (`[3, C, R, R]`), giving `[N, 3C]`
/// with the three per-plane vectors concatenated in plane order. Points outside the cube are
/// clamped onto it. Differentiable with respect to both planes and points.
pub fn sample_features<'t>(planes: Var<'t>, points: Var<'t>) -> Result<Var<'t>> {
    let pv = planes.value();
    let xv = points.value();
    check_planes_shape(pv.shape())?;
    let ps = xv.shape();
    if ps.len() != 2 || ps[1] != 3 {
        return shape_err("sample_features", format!("points must be [N, 3], got {ps:?}"));
    }
    if !xv.is_finite() {
        return Err(Error::NonFinite("sample_features points".into()));
    }
    let (c, r) = (pv.shape()[1], pv.shape()[2]);
    let n = ps[0];
    // channels-last copy: [3, R, R, C]
    let cl = Rc::new(permute_tensor(&pv, &[0, 2, 3, 1]));
    let mut out = vec![0.0; n * 3 * c];
    {
        let cd = cl.data();
        for (i, p) in xv.data().chunks(3).enumerate() {
            for (pl, &(ca, ra)) in PLANE_AXES.iter().enumerate() {
                let (x0, fx) = locate(p[ca], r);
                let (y0, fy) = locate(p[ra], r);
                let base = pl * r * r;
                let idx = |yy: usize, xx: usize| (base + yy * r + xx) * c;
                let w = [
                    (idx(y0, x0), (1.0 - fx) * (1.0 - fy)),
                    (idx(y0, x0 + 1), fx * (1.0 - fy)),
                    (idx(y0 + 1, x0), (1.0 - fx) * fy),
                    (idx(y0 + 1, x0 + 1), fx * fy),
                ];
                let o = &mut out[(i * 3 + pl) * c..(i * 3 + pl + 1) * c];
                for (off, wt) in w {
                    for (a, v) in o.iter_mut().zip(&cd[off..off + c]) {
                        *a += wt * v;
                    }
                }
            }
        }
    }
    let pshape = pv.shape().to_vec();
    planes.tape().custom(
        "sample_features",
        Tensor::from_parts(vec![n, 3 * c], out),
        &[planes, points],
        move |g, need| {
            let gd = g.data();
            let cd = cl.data();
            let mut gcl = need[0].then(|| vec![0.0; 3 * r * r * c]);
            let mut gp = need[1].then(|| vec![0.0; n * 3]);
            let scale = 0.5 * (r - 1) as f64;
            for (i, p) in xv.data().chunks(3).enumerate() {
                for (pl, &(ca, ra)) in PLANE_AXES.iter().enumerate() {
                    let (x0, fx) = locate(p[ca], r);
                    let (y0, fy) = locate(p[ra], r);
                    let base = pl * r * r;
                    let idx = |yy: usize, xx: usize| (base + yy * r + xx) * c;
                    let (i00, i01, i10, i11) =
                        (idx(y0, x0), idx(y0, x0 + 1), idx(y0 + 1, x0), idx(y0 + 1, x0 + 1));
                    let go = &gd[(i * 3 + pl) * c..(i * 3 + pl + 1) * c];
                    if let Some(gc) = gcl.as_mut() {
                        for (off, wt) in [
                            (i00, (1.0 - fx) * (1.0 - fy)),
                            (i01, fx * (1.0 - fy)),
                            (i10, (1.0 - fx) * fy),
                            (i11, fx * fy),
                        ] {
                            for (a, v) in gc[off..off + c].iter_mut().zip(go) {
                                *a += wt * v;
                            }
                        }
                    }
                    if let Some(gp) = gp.as_mut() {
                        let (mut dx, mut dy) = (0.0, 0.0);
                        for k in 0..c {
                            let (v00, v01, v10, v11) =
                                (cd[i00 + k], cd[i01 + k], cd[i10 + k], cd[i11 + k]);
                            dx += go[k] * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                            dy += go[k] * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                        }
                        if p[ca].abs() <= 1.0 {
                            gp[i * 3 + ca] += dx * scale;
                        }
                        if p[ra].abs() <= 1.0 {
                            gp[i * 3 + ra] += dy * scale;
                        }
                    }
                }
            }
            let gplanes = gcl.map(|v| {
                permute_tensor(&Tensor::from_parts(vec![3, r, r, c], v), &[0, 3, 1, 2])
            });
            debug_assert!(gplanes.as_ref().map_or(true, |t| t.shape() == pshape));
            vec![gplanes, gp.map(|v| Tensor::from_parts(vec![n, 3], v))]
        },
    )
}

/// Interpolation taps along one axis for align-corners resampling `from → to` nodes.
fn resample_taps(from: usize, to: usize) -> Vec<(usize, f64)> {
    (0..to)
        .map(|j| {
            if to == 1 {
                return (0, 0.0);
            }
            let u = j as f64 * (from - 1) as f64 / (to - 1) as f64;
            let i = (u.floor() as usize).min(from - 2);
            (i, u - i as f64)
        })
        .collect()
}

fn resize_tensor(planes: &Tensor, new_res: usize) -> Tensor {
    let s = planes.shape();
    let (c, r) = (s[1], s[2]);
    let taps = resample_taps(r, new_res);
    let mut out = vec![0.0; 3 * c * new_res * new_res];
    for (src, dst) in planes
        .data()
        .chunks(r * r)
        .zip(out.chunks_mut(new_res * new_res))
    {
        for (yy, &(y0, fy)) in taps.iter().enumerate() {
            for (xx, &(x0, fx)) in taps.iter().enumerate() {
                let v00 = src[y0 * r + x0];
                let v01 = src[y0 * r + x0 + 1];
                let v10 = src[(y0 + 1) * r + x0];
                let v11 = src[(y0 + 1) * r + x0 + 1];
                dst[yy * new_res + xx] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                    + fy * ((1.0 - fx) * v10 + fx * v11);
            }
        }
    }
    Tensor::from_parts(vec![3, c, new_res, new_res], out)
}

/// Differentiable bilinear (align-corners) resize of every plane to `new_res × new_res`.
pub fn resize_var(planes: Var<'_>, new_res: usize) -> Result<Var<'_>> {
    if new_res < 2 {
        return invalid(format!("resize target must be >= 2, got {new_res}"));
    }
    let pv = planes.value();
    check_planes_shape(pv.shape())?;
    let (c, r) = (pv.shape()[1], pv.shape()[2]);
    let value = resize_tensor(&pv, new_res);
    planes.tape().custom("resize", value, &[planes], move |g, _| {
        let taps = resample_taps(r, new_res);
        let mut gx = vec![0.0; 3 * c * r * r];
        for (gs, dst) in g
            .data()
            .chunks(new_res * new_res)
            .zip(gx.chunks_mut(r * r))
        {
            for (yy, &(y0, fy)) in taps.iter().enumerate() {
                for (xx, &(x0, fx)) in taps.iter().enumerate() {
                    let v = gs[yy * new_res + xx];
                    dst[y0 * r + x0] += (1.0 - fy) * (1.0 - fx) * v;
                    dst[y0 * r + x0 + 1] += (1.0 - fy) * fx * v;
                    dst[(y0 + 1) * r + x0] += fy * (1.0 - fx) * v;
                    dst[(y0 + 1) * r + x0 + 1] += fy * fx * v;
                }
            }
        }
        vec![Some(Tensor::from_parts(vec![3, c, r, r], gx))]
    })
}

/// Cross-plane feature augmentation for plane `target` of a rolled-out `[C, R, 3R]` image:
/// the target's own channels followed by the mean-pooled, broadcast profiles of the two other
/// planes (in plane order), each pooled along the axis it does not share with the target.
pub fn aware_inputs<'t>(image: Var<'t>, target: usize) -> Result<Var<'t>> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 * s[1] {
        return shape_err("conv3d_aware", format!("expected [C, R, 3R], got {s:?}"));
    }
    let (c, r) = (s[0], s[1]);
    let plane = |p: usize| image.narrow(2, p * r, r);
    let (tcol, trow) = PLANE_AXES[target];
    let mut parts = vec![plane(target)?];
    for other in (0..3).filter(|&p| p != target) {
        let (ocol, orow) = PLANE_AXES[other];
        let shared = if ocol == tcol || ocol == trow { ocol } else { orow };
        // Pooling over rows (axis 1) leaves a profile along columns, and vice versa.
        let profile = if ocol == shared {
            plane(other)?.mean_axis(1)?
        } else {
            plane(other)?.mean_axis(2)?
        };
        let b = if tcol == shared {
            profile.reshape(&[c, 1, r])?
        } else {
            profile.reshape(&[c, r, 1])?
        };
        parts.push(b.broadcast_to(&[c, r, r])?);
    }
    concat(&parts, 0)
}

/// 3D-aware convolution of a rolled-out triplane image `[Cin, R, 3R]` with weights
/// `[Cout, 3·Cin, k, k]`: each plane is convolved after concatenating the pooled profiles of
/// the other two planes. Output is `[Cout, R, 3R]`.
pub fn conv3d_aware<'t>(image: Var<'t>, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    let s = image.shape();
    let ws = weight.shape();
    if s.len() != 3 || ws.len() != 4 || ws[1] != 3 * s[0] {
        return shape_err(
            "conv3d_aware",
            format!("image {s:?} needs weights [Cout, {}, k, k], got {ws:?}", 3 * s.first().unwrap_or(&0)),
        );
    }
    let outs = (0..3)
        .map(|p| aware_inputs(image, p)?.conv2d(weight, bias))
        .collect::<Result<Vec<_>>>()?;
    concat(&outs, 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, Tape};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn affine_triplane(res: usize, c: usize, coef: &[[f64; 3]]) -> Triplane {
        // plane p, channel k: a + b·col_coord + d·row_coord
        let mut t = Triplane::zeros(res, c);
        for p in 0..3 {
            let pl = t.plane_mut(p);
            for k in 0..c {
                let [a, b, d] = coef[(p * c + k) % coef.len()];
                for y in 0..res {
                    for x in 0..res {
                        let cx = -1.0 + 2.0 * x as f64 / (res - 1) as f64;
                        let cy = -1.0 + 2.0 * y as f64 / (res - 1) as f64;
                        pl[(k * res + y) * res + x] = a + b * cx + d * cy;
                    }
                }
            }
        }
        t
    }

    fn sample(t: &Triplane, pts: &[[f64; 3]]) -> Tensor {
        let tape = Tape::no_grad();
        let p = Tensor::new(&[pts.len(), 3], pts.iter().flatten().copied().collect()).unwrap();
        let v = sample_features(tape.constant(t.planes().clone()), tape.constant(p)).unwrap();
        (*v.value()).clone()
    }

    #[test]
    fn rollout_shape_and_order() {
        let mut t = Triplane::zeros(4, 2);
        t.plane_mut(1).fill(7.0);
        let img = t.rollout();
        assert_eq!(img.shape(), &[2, 4, 12]);
        for ch in 0..2 {
            for y in 0..4 {
                for x in 0..12 {
                    let want = if (4..8).contains(&x) { 7.0 } else { 0.0 };
                    assert_eq!(img.data()[(ch * 4 + y) * 12 + x], want);
                }
            }
        }
        assert_eq!(Triplane::unroll(&img).unwrap(), t);
    }

    #[test]
    fn rollout_var_matches_tensor_rollout() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let t = Triplane::new(Tensor::randn(&[3, 2, 4, 4], &mut r)).unwrap();
        let tape = Tape::new();
        let v = rollout_var(tape.constant(t.planes().clone())).unwrap();
        assert_eq!(*v.value(), t.rollout());
        let back = unroll_var(v).unwrap();
        assert_eq!(*back.value(), *t.planes());
    }

    #[test]
    fn constant_planes_sample_constant() {
        let mut t = Triplane::zeros(5, 3);
        for p in 0..3 {
            t.plane_mut(p).fill(2.5);
        }
        let f = sample(&t, &[[0.3, -0.7, 0.11], [1.0, 1.0, -1.0]]);
        assert!(f.data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
        assert_eq!(f.shape(), &[2, 9]);
    }

    #[test]
    fn grid_node_reads_exact_value() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let t = Triplane::new(Tensor::randn(&[3, 2, 5, 5], &mut r)).unwrap();
        // node (col=3, row=1) in each plane: coordinate -1 + 2·i/4
        let node = |i: usize| -1.0 + 0.5 * i as f64;
        let p = [node(3), node(3), node(1)]; // x=0.5, y=0.5, z=-0.5
        let f = sample(&t, &[p]);
        let read = |pl: usize, k: usize, row: usize, col: usize| t.plane(pl)[(k * 5 + row) * 5 + col];
        // xz: col x→3, row z→1 ; xy: col x→3, row y→3 ; yz: col y→3, row z→1
        let want = [
            read(0, 0, 1, 3),
            read(0, 1, 1, 3),
            read(1, 0, 3, 3),
            read(1, 1, 3, 3),
            read(2, 0, 1, 3),
            read(2, 1, 1, 3),
        ];
        assert_eq!(f.data(), &want);
    }

    #[test]
    fn bilinear_fields_are_reproduced_exactly() {
        let coef = [[0.5, 1.0, -2.0], [-1.0, 0.25, 0.75], [2.0, -0.5, 0.1]];
        let t = affine_triplane(7, 2, &coef);
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let p = [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)];
            let f = sample(&t, &[p]);
            for (pl, &(ca, ra)) in PLANE_AXES.iter().enumerate() {
                for k in 0..2 {
                    let [a, b, d] = coef[(pl * 2 + k) % 3];
                    let want = a + b * p[ca] + d * p[ra];
                    assert!((f.data()[pl * 2 + k] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn out_of_range_points_clamp() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let t = Triplane::new(Tensor::randn(&[3, 1, 4, 4], &mut r)).unwrap();
        let a = sample(&t, &[[1.3, -2.0, 0.2]]);
        let b = sample(&t, &[[1.0, -1.0, 0.2]]);
        assert_eq!(a, b);
        let tape = Tape::new();
        let bad = tape.constant(Tensor::new(&[1, 3], vec![f64::NAN, 0.0, 0.0]).unwrap());
        assert!(sample_features(tape.constant(t.planes().clone()), bad).is_err());
    }

    #[test]
    fn sample_features_grad_check() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let planes = Tensor::randn(&[3, 2, 6, 6], &mut r);
        // keep points away from cell boundaries (nodes at multiples of 0.4 - 1)
        let pts: Vec<f64> = (0..15).map(|_| -0.9 + 0.4 * r.gen_range(0..5) as f64 + r.gen_range(0.1..0.3)).collect();
        let pts = Tensor::new(&[5, 3], pts).unwrap();
        let w = Tensor::randn(&[5, 6], &mut r);
        let (p1, w1) = (pts.clone(), w.clone());
        let e = grad_check(
            move |t, v| sample_features(v, t.constant(p1.clone()))?.mul(t.constant(w1.clone()))?.sum(),
            &planes,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-5, "planes {e}");
        let e = grad_check(
            move |t, v| {
                sample_features(t.constant(planes.clone()), v)?
                    .mul(t.constant(w.clone()))?
                    .sum()
            },
            &pts,
            1e-6,
        )
        .unwrap();
        assert!(e < 1e-5, "points {e}");
    }

    #[test]
    fn resize_identity_and_constant() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let t = Triplane::new(Tensor::randn(&[3, 2, 5, 5], &mut r)).unwrap();
        assert_eq!(t.resize(5).unwrap(), t);
        let mut c = Triplane::zeros(9, 1);
        for p in 0..3 {
            c.plane_mut(p).fill(-1.25);
        }
        let d = c.resize(4).unwrap();
        assert!(d.planes().data().iter().all(|&v| (v + 1.25).abs() < 1e-15));
        assert!(t.resize(1).is_err());
    }

    #[test]
    fn bilinear_plane_survives_down_up_resize() {
        let coef = [[0.1, 1.0, -1.0], [0.0, 0.3, 0.7]];
        let t = affine_triplane(256, 2, &coef);
        let back = t.resize(64).unwrap().resize(256).unwrap();
        assert!(back.planes().max_abs_diff(t.planes()) < 1e-12);
    }

    #[test]
    fn resize_grad_check() {
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn(&[3, 2, 5, 5], &mut r);
        let w = Tensor::randn(&[3, 2, 3, 3], &mut r);
        let e = grad_check(
            move |t, v| resize_var(v, 3)?.mul(t.constant(w.clone()))?.sum(),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn conv3d_aware_zero_neighbours_identity_kernel() {
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let (c, res) = (2, 4);
        // Only plane xy is nonzero: augmentation channels of xy come from zero planes.
        let mut t = Triplane::zeros(res, c);
        let vals = Tensor::randn(&[c * res * res], &mut r);
        t.plane_mut(1).copy_from_slice(vals.data());
        let mut w = Tensor::zeros(&[c, 3 * c, 1, 1]);
        for k in 0..c {
            w.data_mut()[k * 3 * c + k] = 1.0;
        }
        let tape = Tape::new();
        let out = conv3d_aware(
            tape.constant(t.rollout()),
            tape.constant(w),
            tape.constant(Tensor::zeros(&[c])),
        )
        .unwrap();
        let out = Triplane::unroll(&out.value()).unwrap();
        assert_eq!(out.plane(1), t.plane(1));
    }

    #[test]
    fn conv3d_aware_constant_in_constant_out() {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let (c, res) = (2, 6);
        let mut t = Triplane::zeros(res, c);
        for p in 0..3 {
            t.plane_mut(p)[..res * res].fill(0.7);
            t.plane_mut(p)[res * res..].fill(-0.2);
        }
        let tape = Tape::new();
        let out = conv3d_aware(
            tape.constant(t.rollout()),
            tape.constant(Tensor::randn(&[3, 3 * c, 1, 1], &mut r)),
            tape.constant(Tensor::randn(&[3], &mut r)),
        )
        .unwrap();
        let out = Triplane::unroll(&out.value()).unwrap();
        assert_eq!(out.res(), res);
        for p in 0..3 {
            for k in 0..3 {
                let ch = &out.plane(p)[k * res * res..(k + 1) * res * res];
                assert!(ch.iter().all(|v| (v - ch[0]).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn conv3d_aware_hand_computed_2x2() {
        // C=1, R=2. plane values laid out [row][col].
        let xz = [[1.0, 2.0], [3.0, 4.0]];
        let xy = [[5.0, 6.0], [7.0, 8.0]];
        let yz = [[9.0, 10.0], [11.0, 12.0]];
        let mut t = Triplane::zeros(2, 1);
        for (p, v) in [xz, xy, yz].iter().enumerate() {
            t.plane_mut(p).copy_from_slice(&[v[0][0], v[0][1], v[1][0], v[1][1]]);
        }
        // weights: own·1 + first other·10 + second other·100, bias 0.5
        let w = Tensor::new(&[1, 3, 1, 1], vec![1.0, 10.0, 100.0]).unwrap();
        let tape = Tape::new();
        let out = conv3d_aware(
            tape.constant(t.rollout()),
            tape.constant(w),
            tape.constant(Tensor::from_vec(vec![0.5])),
        )
        .unwrap();
        let out = Triplane::unroll(&out.value()).unwrap();
        // xz (col x,row z): xy pooled over y rows → profile(x) = [6, 7], broadcast over columns;
        //                   yz pooled over y cols → profile(z) = [9.5, 11.5], broadcast over rows.
        let want_xz = [
            1.0 + 60.0 + 950.0 + 0.5,
            2.0 + 70.0 + 950.0 + 0.5,
            3.0 + 60.0 + 1150.0 + 0.5,
            4.0 + 70.0 + 1150.0 + 0.5,
        ];
        // xy (col x,row y): xz pooled over z rows → profile(x) = [2, 3] along columns;
        //                   yz pooled over z rows → profile(y) = [10, 11] along rows.
        let want_xy = [
            5.0 + 20.0 + 1000.0 + 0.5,
            6.0 + 30.0 + 1000.0 + 0.5,
            7.0 + 20.0 + 1100.0 + 0.5,
            8.0 + 30.0 + 1100.0 + 0.5,
        ];
        // yz (col y,row z): xz pooled over x cols → profile(z) = [1.5, 3.5] along rows;
        //                   xy pooled over x cols → profile(y) = [5.5, 7.5] along columns.
        let want_yz = [
            9.0 + 15.0 + 550.0 + 0.5,
            10.0 + 15.0 + 750.0 + 0.5,
            11.0 + 35.0 + 550.0 + 0.5,
            12.0 + 35.0 + 750.0 + 0.5,
        ];
        assert_eq!(out.plane(0), &want_xz);
        assert_eq!(out.plane(1), &want_xy);
        assert_eq!(out.plane(2), &want_yz);
    }

    #[test]
    fn conv3d_aware_channel_mismatch() {
        let tape = Tape::new();
        let img = tape.constant(Triplane::zeros(4, 2).rollout());
        let w = tape.constant(Tensor::zeros(&[1, 4, 3, 3]));
        assert!(conv3d_aware(img, w, tape.constant(Tensor::zeros(&[1]))).is_err());
    }

    #[test]
    fn conv3d_aware_grad_check() {
        let mut r = ChaCha8Rng::seed_from_u64(10);
        let img = Tensor::randn(&[2, 4, 12], &mut r);
        let w = Tensor::randn(&[3, 6, 3, 3], &mut r);
        let b = Tensor::randn(&[3], &mut r);
        let (w1, b1) = (w.clone(), b.clone());
        let e = grad_check(
            move |t, v| conv3d_aware(v, t.constant(w1.clone()), t.constant(b1.clone()))?.tanh()?.sum(),
            &img,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-4, "input {e}");
        let e = grad_check(
            move |t, v| conv3d_aware(t.constant(img.clone()), v, t.constant(b.clone()))?.tanh()?.sum(),
            &w,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-4, "weights {e}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn sampling_is_linear_in_planes(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let p1 = Triplane::new(Tensor::randn(&[3, 2, 5, 5], &mut r)).unwrap();
            let p2 = Triplane::new(Tensor::randn(&[3, 2, 5, 5], &mut r)).unwrap();
            let pts: Vec<[f64; 3]> = (0..4).map(|_| [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)]).collect();
            let mix = Triplane::new(p1.planes().zip_map(p2.planes(), |x, y| a * x + b * y).unwrap()).unwrap();
            let lhs = sample(&mix, &pts);
            let f1 = sample(&p1, &pts);
            let f2 = sample(&p2, &pts);
            let rhs = f1.zip_map(&f2, |x, y| a * x + b * y).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        }

        #[test]
        fn rollout_roundtrip(seed in 0u64..1000, c in 1usize..4, res in 2usize..7) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let t = Triplane::new(Tensor::randn(&[3, c, res, res], &mut r)).unwrap();
            prop_assert_eq!(Triplane::unroll(&t.rollout()).unwrap(), t);
        }
    }
}
