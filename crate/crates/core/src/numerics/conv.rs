//! 2D convolution and resampling on single `[C, H, W]` feature maps.

use super::tape::Var;
use super::tensor::{gemm, Tensor};
use crate::error::{shape_err, Result};

fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut col = vec![0.0; c * k * k * hw];
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst = &mut row[y * w..(y + 1) * w];
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    for xx in x0..x1 {
                        dst[xx] = src[(xx as isize + dx) as usize];
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut x = vec![0.0; c * hw];
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let src = &row[y * w..(y + 1) * w];
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    for xx in x0..x1 {
                        dst[(xx as isize + dx) as usize] += src[xx];
                    }
                }
            }
        }
    }
    x
}

impl<'t> Var<'t> {
    /// Same-padded, stride-1 convolution of `[Cin, H, W]` with weights `[Cout, Cin, k, k]`
    /// (odd `k`) and bias `[Cout]`.
    pub fn conv2d(self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, wv, bv) = (self.value(), weight.value(), bias.value());
        let (sx, sw) = (x.shape().to_vec(), wv.shape().to_vec());
        if sx.len() != 3
            || sw.len() != 4
            || sw[1] != sx[0]
            || sw[2] != sw[3]
            || sw[2] % 2 == 0
            || bv.shape() != [sw[0]]
        {
            return shape_err(
                "conv2d",
                format!("x {:?}, w {:?}, b {:?}", sx, sw, bv.shape()),
            );
        }
        let (cin, h, w) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        let hw = h * w;
        let kk = cin * k * k;
        let col = if k == 1 { x.data().to_vec() } else { im2col(x.data(), cin, h, w, k) };
        let mut out = vec![0.0; cout * hw];
        for (o, b) in out.chunks_mut(hw).zip(bv.data()) {
            o.fill(*b);
        }
        gemm(cout, kk, hw, wv.data(), false, &col, false, 1.0, &mut out);
        self.tape().custom(
            "conv2d",
            Tensor::from_parts(vec![cout, h, w], out),
            &[self, weight, bias],
            move |g, need| {
                let gd = g.data();
                let gx = need[0].then(|| {
                    let mut dcol = vec![0.0; kk * hw];
                    gemm(kk, cout, hw, wv.data(), true, gd, false, 0.0, &mut dcol);
                    let dx = if k == 1 { dcol } else { col2im(&dcol, cin, h, w, k) };
                    Tensor::from_parts(vec![cin, h, w], dx)
                });
                let gw = need[1].then(|| {
                    let mut dw = vec![0.0; cout * kk];
                    gemm(cout, hw, kk, gd, false, &col, true, 0.0, &mut dw);
                    Tensor::from_parts(vec![cout, cin, k, k], dw)
                });
                let gb = need[2].then(|| {
                    Tensor::from_parts(vec![cout], gd.chunks(hw).map(|c| c.iter().sum()).collect())
                });
                vec![gx, gw, gb]
            },
        )
    }

    /// 2×2 average pooling of `[C, H, W]` with even `H`, `W`.
    pub fn avg_pool2(self) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape().to_vec();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return shape_err("avg_pool2", format!("{s:?}"));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h / 2, w / 2);
        let xd = x.data();
        let mut out = vec![0.0; c * ho * wo];
        for ci in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    let b = ci * h * w + 2 * y * w + 2 * xx;
                    out[(ci * ho + y) * wo + xx] =
                        0.25 * (xd[b] + xd[b + 1] + xd[b + w] + xd[b + w + 1]);
                }
            }
        }
        self.tape().custom(
            "avg_pool2",
            Tensor::from_parts(vec![c, ho, wo], out),
            &[self],
            move |g, _| {
                let mut gx = vec![0.0; c * h * w];
                for ci in 0..c {
                    for y in 0..ho {
                        for xx in 0..wo {
                            let v = 0.25 * g.data()[(ci * ho + y) * wo + xx];
                            let b = ci * h * w + 2 * y * w + 2 * xx;
                            gx[b] = v;
                            gx[b + 1] = v;
                            gx[b + w] = v;
                            gx[b + w + 1] = v;
                        }
                    }
                }
                vec![Some(Tensor::from_parts(vec![c, h, w], gx))]
            },
        )
    }

    /// Nearest-neighbour 2× upsampling of `[C, H, W]`.
    pub fn upsample2(self) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape().to_vec();
        if s.len() != 3 {
            return shape_err("upsample2", format!("{s:?}"));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * ho * wo];
        for ci in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    out[(ci * ho + y) * wo + xx] = x.data()[(ci * h + y / 2) * w + xx / 2];
                }
            }
        }
        self.tape().custom(
            "upsample2",
            Tensor::from_parts(vec![c, ho, wo], out),
            &[self],
            move |g, _| {
                let mut gx = vec![0.0; c * h * w];
                for ci in 0..c {
                    for y in 0..ho {
                        for xx in 0..wo {
                            gx[(ci * h + y / 2) * w + xx / 2] += g.data()[(ci * ho + y) * wo + xx];
                        }
                    }
                }
                vec![Some(Tensor::from_parts(vec![c, h, w], gx))]
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::grad_check;
    use crate::numerics::tape::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
        let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        let p = (k / 2) as isize;
        let mut out = Tensor::zeros(&[cout, h, wd]);
        for o in 0..cout {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b.data()[o];
                    for c in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - p;
                                let sx = xx as isize + kx as isize - p;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                acc += w.data()[((o * cin + c) * k + ky) * k + kx]
                                    * x.data()[(c * h + sy as usize) * wd + sx as usize];
                            }
                        }
                    }
                    out.data_mut()[(o * h + y) * wd + xx] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for k in [1, 3, 5] {
            let x = Tensor::randn(&[3, 5, 7], &mut r);
            let w = Tensor::randn(&[4, 3, k, k], &mut r);
            let b = Tensor::randn(&[4], &mut r);
            let tape = Tape::new();
            let y = tape
                .constant(x.clone())
                .conv2d(tape.constant(w.clone()), tape.constant(b.clone()))
                .unwrap();
            let want = naive_conv(&x, &w, &b);
            assert!(y.value().max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn conv_grad_check_all_inputs() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[2, 4, 5], &mut r);
        let w = Tensor::randn(&[3, 2, 3, 3], &mut r);
        let b = Tensor::randn(&[3], &mut r);
        let (w1, b1) = (w.clone(), b.clone());
        let e = grad_check(
            move |t, v| {
                v.conv2d(t.constant(w1.clone()), t.constant(b1.clone()))?
                    .tanh()?
                    .sum()
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-6, "x: {e}");
        let (x1, b2) = (x.clone(), b.clone());
        let e = grad_check(
            move |t, v| {
                t.constant(x1.clone())
                    .conv2d(v, t.constant(b2.clone()))?
                    .tanh()?
                    .sum()
            },
            &w,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-6, "w: {e}");
    }

    #[test]
    fn pool_and_upsample_grad_check() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[2, 4, 6], &mut r);
        let e = grad_check(|_, v| v.avg_pool2()?.upsample2()?.square()?.sum(), &x, 1e-5).unwrap();
        assert!(e < 1e-6, "{e}");
    }
}
