//! Differentiable operations on [`Var`].
//!
//! Binary elementwise operations broadcast with trailing-dimension alignment: shapes are
//! right-aligned and a dimension of size 1 (or a missing leading dimension) stretches to
//! match the other operand.

use std::rc::Rc;

use super::tape::Var;
use super::tensor::{gemm, strides_of, Tensor};
use crate::error::{shape_err, Result};

/// Broadcast result shape of `a` and `b`.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat index of `out`, the flat index into a tensor of shape `input` broadcast to it.
/// Returns `None` when no broadcasting is needed.
fn broadcast_map(out: &[usize], input: &[usize]) -> Option<Vec<usize>> {
    if out == input {
        return None;
    }
    let offset = out.len() - input.len();
    let in_strides = strides_of(input);
    let mut eff = vec![0usize; out.len()];
    for i in 0..input.len() {
        if input[i] != 1 {
            eff[i + offset] = in_strides[i];
        }
    }
    let n: usize = out.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out.len()];
    let mut flat = 0usize;
    for _ in 0..n {
        map.push(flat);
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            flat += eff[d];
            if idx[d] < out[d] {
                break;
            }
            flat -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    Some(map)
}

fn reduce_to(grad: &Tensor, map: &Option<Vec<usize>>, shape: &[usize]) -> Tensor {
    match map {
        None => grad.clone(),
        Some(m) => {
            let mut out = Tensor::zeros(shape);
            let od = out.data_mut();
            for (g, &i) in grad.data().iter().zip(m) {
                od[i] += g;
            }
            out
        }
    }
}

fn gather(t: &Tensor, map: &Option<Vec<usize>>) -> Vec<f64> {
    match map {
        None => t.data().to_vec(),
        Some(m) => m.iter().map(|&i| t.data()[i]).collect(),
    }
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl<'t> Var<'t> {
    fn binary(self, other: Var<'t>, op: BinOp) -> Result<Var<'t>> {
        let (av, bv) = (self.value(), other.value());
        let Some(out_shape) = broadcast_shape(av.shape(), bv.shape()) else {
            return shape_err(
                "broadcast",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            );
        };
        let ma = Rc::new(broadcast_map(&out_shape, av.shape()));
        let mb = Rc::new(broadcast_map(&out_shape, bv.shape()));
        let a = gather(&av, &ma);
        let b = gather(&bv, &mb);
        let data: Vec<f64> = match op {
            BinOp::Add => a.iter().zip(&b).map(|(x, y)| x + y).collect(),
            BinOp::Sub => a.iter().zip(&b).map(|(x, y)| x - y).collect(),
            BinOp::Mul => a.iter().zip(&b).map(|(x, y)| x * y).collect(),
            BinOp::Div => a.iter().zip(&b).map(|(x, y)| x / y).collect(),
        };
        let value = Tensor::from_parts(out_shape, data);
        let (a, b) = (Rc::new(a), Rc::new(b));
        let (sa, sb) = (av.shape().to_vec(), bv.shape().to_vec());
        let name = match op {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        };
        self.tape()
            .custom(name, value, &[self, other], move |g, need| {
                let gd = g.data();
                let ga = need[0].then(|| {
                    let full: Vec<f64> = match op {
                        BinOp::Add | BinOp::Sub => gd.to_vec(),
                        BinOp::Mul => gd.iter().zip(b.iter()).map(|(g, y)| g * y).collect(),
                        BinOp::Div => gd.iter().zip(b.iter()).map(|(g, y)| g / y).collect(),
                    };
                    reduce_to(&Tensor::from_parts(g.shape().to_vec(), full), &ma, &sa)
                });
                let gb = need[1].then(|| {
                    let full: Vec<f64> = match op {
                        BinOp::Add => gd.to_vec(),
                        BinOp::Sub => gd.iter().map(|g| -g).collect(),
                        BinOp::Mul => gd.iter().zip(a.iter()).map(|(g, x)| g * x).collect(),
                        BinOp::Div => gd
                            .iter()
                            .zip(a.iter().zip(b.iter()))
                            .map(|(g, (x, y))| -g * x / (y * y))
                            .collect(),
                    };
                    reduce_to(&Tensor::from_parts(g.shape().to_vec(), full), &mb, &sb)
                });
                vec![ga, gb]
            })
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinOp::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinOp::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinOp::Mul)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinOp::Div)
    }

    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    fn unary(
        self,
        name: &str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Var<'t>> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let yc = Rc::clone(&y);
        self.tape()
            .custom(name, (*y).clone(), &[self], move |g, _| {
                let d = g
                    .data()
                    .iter()
                    .zip(x.data().iter().zip(yc.data()))
                    .map(|(g, (&x, &y))| g * df(x, y))
                    .collect();
                vec![Some(Tensor::from_parts(g.shape().to_vec(), d))]
            })
    }

    pub fn add_scalar(self, k: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", |x| x + k, |_, _| 1.0)
    }

    pub fn mul_scalar(self, k: f64) -> Result<Var<'t>> {
        self.unary("mul_scalar", |x| x * k, move |_, _| k)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.mul_scalar(-1.0)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary("relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary("sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn silu(self) -> Result<Var<'t>> {
        self.unary(
            "silu",
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.unary("tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Result<Var<'t>> {
        self.unary("ln", f64::ln, |x, _| 1.0 / x)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary("sqrt", f64::sqrt, |_, y| 0.5 / y)
    }

    /// Absolute value; the subgradient at 0 is 0.
    pub fn abs(self) -> Result<Var<'t>> {
        self.unary("abs", f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// Clamp to `[lo, hi]`; gradient is zero where clamping is active.
    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'t>> {
        self.unary(
            "clamp",
            move |x| x.clamp(lo, hi),
            move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape()
            .custom("sum", Tensor::scalar(x.sum()), &[self], move |g, _| {
                vec![Some(Tensor::full(&shape, g.item()))]
            })
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.len().max(1) as f64;
        self.sum()?.mul_scalar(1.0 / n)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return shape_err("sum_axis", format!("axis {axis} for shape {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        let xd = x.data();
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xd[base + i];
                }
            }
        }
        let mut oshape = shape.clone();
        oshape.remove(axis);
        self.tape().custom(
            "sum_axis",
            Tensor::from_parts(oshape, out),
            &[self],
            move |g, _| {
                let gd = g.data();
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        let base = (o * n + k) * inner;
                        gx[base..base + inner].copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(Tensor::from_parts(shape.clone(), gx))]
            },
        )
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let n = self.shape().get(axis).copied().unwrap_or(1).max(1) as f64;
        self.sum_axis(axis)?.mul_scalar(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let value = x.reshape(shape)?;
        let old = x.shape().to_vec();
        self.tape().custom("reshape", value, &[self], move |g, _| {
            vec![Some(Tensor::from_parts(old.clone(), g.data().to_vec()))]
        })
    }

    /// General axis permutation: output axis `i` is input axis `dims[i]`.
    pub fn permute(self, dims: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let mut seen = vec![false; shape.len()];
        if dims.len() != shape.len() || dims.iter().any(|&d| d >= shape.len()) {
            return shape_err("permute", format!("dims {dims:?} for shape {shape:?}"));
        }
        for &d in dims {
            if std::mem::replace(&mut seen[d], true) {
                return shape_err("permute", format!("repeated axis in {dims:?}"));
            }
        }
        let value = permute_tensor(&x, dims);
        let mut inv = vec![0; dims.len()];
        for (i, &d) in dims.iter().enumerate() {
            inv[d] = i;
        }
        self.tape().custom("permute", value, &[self], move |g, _| {
            vec![Some(permute_tensor(g, &inv))]
        })
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        if self.shape().len() != 2 {
            return shape_err("transpose", format!("expected rank 2, got {:?}", self.shape()));
        }
        self.permute(&[1, 0])
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return shape_err(
                "narrow",
                format!("axis {axis} range {start}..{} of {shape:?}", start + len),
            );
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut oshape = shape.clone();
        oshape[axis] = len;
        self.tape().custom(
            "narrow",
            Tensor::from_parts(oshape, out),
            &[self],
            move |g, _| {
                let mut gx = vec![0.0; shape.iter().product()];
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    gx[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(Tensor::from_parts(shape.clone(), gx))]
            },
        )
    }

    /// Rows of `self` (axis 0) at `indices`; repeated indices accumulate gradients.
    pub fn index_select(self, indices: Rc<Vec<usize>>) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if shape.is_empty() {
            return shape_err("index_select", "scalar input");
        }
        let row: usize = shape[1..].iter().product();
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[0]) {
            return shape_err("index_select", format!("index {bad} >= {}", shape[0]));
        }
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices.iter() {
            out.extend_from_slice(&x.data()[i * row..(i + 1) * row]);
        }
        let mut oshape = shape.clone();
        oshape[0] = indices.len();
        self.tape().custom(
            "index_select",
            Tensor::from_parts(oshape, out),
            &[self],
            move |g, _| {
                let mut gx = vec![0.0; shape.iter().product()];
                for (k, &i) in indices.iter().enumerate() {
                    for j in 0..row {
                        gx[i * row + j] += g.data()[k * row + j];
                    }
                }
                vec![Some(Tensor::from_parts(shape.clone(), gx))]
            },
        )
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        match broadcast_shape(x.shape(), shape) {
            Some(s) if s == shape => {}
            _ => {
                return shape_err(
                    "broadcast_to",
                    format!("{:?} to {:?}", x.shape(), shape),
                )
            }
        }
        let map = Rc::new(broadcast_map(shape, x.shape()));
        let value = Tensor::from_parts(shape.to_vec(), gather(&x, &map));
        let old = x.shape().to_vec();
        self.tape().custom("broadcast_to", value, &[self], move |g, _| {
            vec![Some(reduce_to(g, &map, &old))]
        })
    }

    /// `self (m×k) · other (k×n)`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", format!("{sa:?} · {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut c);
        self.tape().custom(
            "matmul",
            Tensor::from_parts(vec![m, n], c),
            &[self, other],
            move |g, need| {
                let ga = need[0].then(|| {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, b.data(), true, 0.0, &mut d);
                    Tensor::from_parts(vec![m, k], d)
                });
                let gb = need[1].then(|| {
                    let mut d = vec![0.0; k * n];
                    gemm(k, m, n, a.data(), true, g.data(), false, 0.0, &mut d);
                    Tensor::from_parts(vec![k, n], d)
                });
                vec![ga, gb]
            },
        )
    }

    /// Affine map of rows: `x (N×in) · wᵀ + b` with `w (out×in)` and `b (out)`.
    pub fn linear(self, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let (x, wv, bv) = (self.value(), w.value(), b.value());
        let (sx, sw) = (x.shape(), wv.shape());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] || bv.shape() != [sw[0]] {
            return shape_err(
                "linear",
                format!("x {:?}, w {:?}, b {:?}", sx, sw, bv.shape()),
            );
        }
        let (n, din, dout) = (sx[0], sx[1], sw[0]);
        let mut y = Vec::with_capacity(n * dout);
        for _ in 0..n {
            y.extend_from_slice(bv.data());
        }
        gemm(n, din, dout, x.data(), false, wv.data(), true, 1.0, &mut y);
        self.tape().custom(
            "linear",
            Tensor::from_parts(vec![n, dout], y),
            &[self, w, b],
            move |g, need| {
                let gx = need[0].then(|| {
                    let mut d = vec![0.0; n * din];
                    gemm(n, dout, din, g.data(), false, wv.data(), false, 0.0, &mut d);
                    Tensor::from_parts(vec![n, din], d)
                });
                let gw = need[1].then(|| {
                    let mut d = vec![0.0; dout * din];
                    gemm(dout, n, din, g.data(), true, x.data(), false, 0.0, &mut d);
                    Tensor::from_parts(vec![dout, din], d)
                });
                let gb = need[2].then(|| {
                    let mut d = vec![0.0; dout];
                    for r in g.data().chunks(dout) {
                        for (a, v) in d.iter_mut().zip(r) {
                            *a += v;
                        }
                    }
                    Tensor::from_parts(vec![dout], d)
                });
                vec![gx, gw, gb]
            },
        )
    }

    /// Normalize each row over the last dimension to zero mean and unit variance (no affine).
    pub fn layer_norm(self, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let d = *shape.last().unwrap_or(&1);
        normalize_groups(self, x.len() / d.max(1), d, eps, "layer_norm")
    }

    /// Group normalization of a `[C, H, W]` feature map (no affine).
    pub fn group_norm(self, groups: usize, eps: f64) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 3 || groups == 0 || shape[0] % groups != 0 {
            return shape_err(
                "group_norm",
                format!("{groups} groups for shape {shape:?}"),
            );
        }
        let per = shape[0] / groups * shape[1] * shape[2];
        normalize_groups(self, groups, per, eps, "group_norm")
    }
}

/// Normalize `count` contiguous chunks of `size` elements each.
fn normalize_groups<'t>(
    x: Var<'t>,
    count: usize,
    size: usize,
    eps: f64,
    name: &str,
) -> Result<Var<'t>> {
    let xv = x.value();
    let mut y = vec![0.0; xv.len()];
    let mut inv_std = vec![0.0; count];
    for (gi, (xs, ys)) in xv.data().chunks(size).zip(y.chunks_mut(size)).enumerate() {
        let n = size as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[gi] = is;
        for (o, v) in ys.iter_mut().zip(xs) {
            *o = (v - mean) * is;
        }
    }
    let y = Rc::new(Tensor::from_parts(xv.shape().to_vec(), y));
    let yc = Rc::clone(&y);
    x.tape().custom(name, (*y).clone(), &[x], move |g, _| {
        let mut gx = vec![0.0; g.len()];
        for (gi, ((gs, ys), out)) in g
            .data()
            .chunks(size)
            .zip(yc.data().chunks(size))
            .zip(gx.chunks_mut(size))
            .enumerate()
        {
            let n = size as f64;
            let mg = gs.iter().sum::<f64>() / n;
            let mgy = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / n;
            for ((o, &g), &y) in out.iter_mut().zip(gs).zip(ys) {
                *o = inv_std[gi] * (g - mg - y * mgy);
            }
        }
        vec![Some(Tensor::from_parts(g.shape().to_vec(), gx))]
    })
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn permute_tensor(x: &Tensor, dims: &[usize]) -> Tensor {
    let shape = x.shape();
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = dims.iter().map(|&d| shape[d]).collect();
    let eff: Vec<usize> = dims.iter().map(|&d| in_strides[d]).collect();
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; dims.len()];
    let mut flat = 0usize;
    let xd = x.data();
    for _ in 0..n {
        out.push(xd[flat]);
        for d in (0..dims.len()).rev() {
            idx[d] += 1;
            flat += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            flat -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

/// Concatenate along `axis`; all other dimensions must agree.
pub fn concat<'t>(vars: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let Some(first) = vars.first() else {
        return shape_err("concat", "no inputs");
    };
    let values: Vec<Rc<Tensor>> = vars.iter().map(|v| v.value()).collect();
    let base = values[0].shape().to_vec();
    if axis >= base.len() {
        return shape_err("concat", format!("axis {axis} for shape {base:?}"));
    }
    for v in &values {
        let s = v.shape();
        if s.len() != base.len()
            || s.iter()
                .zip(&base)
                .enumerate()
                .any(|(i, (a, b))| i != axis && a != b)
        {
            return shape_err("concat", format!("{:?} vs {:?}", s, base));
        }
    }
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let total: usize = sizes.iter().sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &s) in values.iter().zip(&sizes) {
            out.extend_from_slice(&v.data()[o * s * inner..(o + 1) * s * inner]);
        }
    }
    let mut oshape = base.clone();
    oshape[axis] = total;
    let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    first.tape().custom(
        "concat",
        Tensor::from_parts(oshape, out),
        vars,
        move |g, need| {
            let mut grads: Vec<Vec<f64>> = sizes
                .iter()
                .map(|&s| Vec::with_capacity(outer * s * inner))
                .collect();
            let gd = g.data();
            let mut off = 0;
            for _ in 0..outer {
                for (gv, &s) in grads.iter_mut().zip(&sizes) {
                    gv.extend_from_slice(&gd[off..off + s * inner]);
                    off += s * inner;
                }
            }
            grads
                .into_iter()
                .zip(&shapes)
                .zip(need)
                .map(|((gv, s), &n)| n.then(|| Tensor::from_parts(s.clone(), gv)))
                .collect()
        },
    )
}
