//! Zero-padded bilinear sampling and the fused adaptive filter kernel, with
//! their vector-Jacobian products.

use rayon::prelude::*;

use crate::autodiff::{CustomOp, Tensor};

/// The four lattice neighbours of `(x, y)` with interpolation weights and
/// their partial derivatives. Neighbours outside the plane get zero weight.
#[derive(Clone, Copy)]
struct Footprint {
    idx: [usize; 4],
    wt: [f64; 4],
    dx: [f64; 4],
    dy: [f64; 4],
}

impl Footprint {
    #[inline]
    fn new(h: usize, w: usize, x: f64, y: f64) -> Self {
        let (xf, yf) = (x.floor(), y.floor());
        let (fx, fy) = (x - xf, y - yf);
        let (x0, y0) = (xf as isize, yf as isize);
        let mut fp = Footprint {
            idx: [0; 4],
            wt: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
            dx: [-(1.0 - fy), 1.0 - fy, -fy, fy],
            dy: [-(1.0 - fx), -fx, 1.0 - fx, fx],
        };
        for (k, (ox, oy)) in [(0, 0), (1, 0), (0, 1), (1, 1)].into_iter().enumerate() {
            let (xx, yy) = (x0 + ox, y0 + oy);
            if xx < 0 || yy < 0 || xx >= w as isize || yy >= h as isize {
                fp.wt[k] = 0.0;
                fp.dx[k] = 0.0;
                fp.dy[k] = 0.0;
            } else {
                fp.idx[k] = yy as usize * w + xx as usize;
            }
        }
        fp
    }

    #[inline]
    fn value(&self, plane: &[f64]) -> f64 {
        (0..4).map(|k| self.wt[k] * plane[self.idx[k]]).sum()
    }

    #[inline]
    fn grad(&self, plane: &[f64]) -> (f64, f64, f64) {
        let mut out = (0.0, 0.0, 0.0);
        for k in 0..4 {
            let v = plane[self.idx[k]];
            out.0 += self.wt[k] * v;
            out.1 += self.dx[k] * v;
            out.2 += self.dy[k] * v;
        }
        out
    }

    /// Add `g` times the interpolation weights into `plane_grad`.
    #[inline]
    fn scatter(&self, plane_grad: &mut [f64], g: f64) {
        for k in 0..4 {
            plane_grad[self.idx[k]] += g * self.wt[k];
        }
    }
}

/// Bilinear value of `plane` at `(x, y)`; out-of-range neighbours read 0.
pub(crate) fn sample(plane: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    Footprint::new(h, w, x, y).value(plane)
}

/// Sample a `C×H×W` map at `M` points, producing `C×M`.
pub(crate) struct BilinearSampleOp;

pub(crate) fn bilinear_forward(feat: &Tensor, xs: &[f64], ys: &[f64]) -> Tensor {
    let s = feat.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let m = xs.len();
    let d = feat.data();
    Tensor::from_fn(&[c, m], |i| {
        let (ch, k) = (i / m, i % m);
        sample(&d[ch * h * w..(ch + 1) * h * w], h, w, xs[k], ys[k])
    })
}

impl CustomOp for BilinearSampleOp {
    fn name(&self) -> &'static str {
        "bilinear_sample"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (feat, xs, ys) = (inputs[0], inputs[1].data(), inputs[2].data());
        let s = feat.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        let m = xs.len();
        let d = feat.data();
        let mut dfeat = vec![0.0; d.len()];
        let mut dxs = vec![0.0; m];
        let mut dys = vec![0.0; m];
        for k in 0..m {
            let fp = Footprint::new(h, w, xs[k], ys[k]);
            for ch in 0..c {
                let gv = g[ch * m + k];
                let (_, gx, gy) = fp.grad(&d[ch * h * w..(ch + 1) * h * w]);
                dxs[k] += gv * gx;
                dys[k] += gv * gy;
                fp.scatter(&mut dfeat[ch * h * w..(ch + 1) * h * w], gv);
            }
        }
        vec![Some(dfeat), Some(dxs), Some(dys)]
    }
}

/// Geometry of one filter evaluation.
#[derive(Clone, Copy)]
struct FilterDims {
    c: usize,
    h: usize,
    w: usize,
    n: usize,
}

impl FilterDims {
    fn of(feat: &Tensor, kv: &Tensor) -> Self {
        let s = feat.shape();
        FilterDims {
            c: s[0],
            h: s[1],
            w: s[2],
            n: kv.shape()[0],
        }
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }
}

/// Inputs of the fused filter, borrowed as flat slices.
pub(crate) struct FilterInputs<'a> {
    pub feat: &'a Tensor,
    pub kv: &'a Tensor,
    pub kh: &'a Tensor,
    pub weight: &'a Tensor,
    pub px: &'a Tensor,
    pub py: &'a Tensor,
}

impl FilterInputs<'_> {
    /// Tap coefficient `W[j]·K_v[a]·K_h[b]` and sampling position for output
    /// pixel `(x, y)` and tap `j = a·n + b`.
    #[inline]
    fn tap(&self, d: FilterDims, x: usize, y: usize, j: usize) -> (f64, f64, f64) {
        let (a, b) = (j / d.n, j % d.n);
        let r = (d.n / 2) as f64;
        let pix = y * d.w + x;
        let hw = d.hw();
        let coef = self.weight.data()[j * hw + pix] * self.kv.data()[a * hw + pix] * self.kh.data()[b * hw + pix];
        let sx = x as f64 + (b as f64 - r) + self.px.data()[j * hw + pix];
        let sy = y as f64 + (a as f64 - r) + self.py.data()[j * hw + pix];
        (coef, sx, sy)
    }
}

pub(crate) fn filter_forward(inp: &FilterInputs<'_>) -> Tensor {
    let d = FilterDims::of(inp.feat, inp.kv);
    let (c, h, w, hw) = (d.c, d.h, d.w, d.hw());
    let taps = d.n * d.n;
    let fd = inp.feat.data();
    // pixel-major scratch so rows can be filled in parallel
    let mut scratch = vec![0.0; hw * c];
    scratch.par_chunks_mut(w * c).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let acc = &mut row[x * c..(x + 1) * c];
            for j in 0..taps {
                let (coef, sx, sy) = inp.tap(d, x, y, j);
                if coef == 0.0 {
                    continue;
                }
                let fp = Footprint::new(h, w, sx, sy);
                for (ch, a) in acc.iter_mut().enumerate() {
                    *a += coef * fp.value(&fd[ch * hw..(ch + 1) * hw]);
                }
            }
        }
    });
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, pix) = (i / hw, i % hw);
        scratch[pix * c + ch]
    })
}

/// Gradients of the fused filter with respect to (feat, kv, kh, weight, px, py).
pub(crate) fn filter_backward(inp: &FilterInputs<'_>, g: &[f64]) -> [Vec<f64>; 6] {
    let d = FilterDims::of(inp.feat, inp.kv);
    let (c, h, w, hw, n) = (d.c, d.h, d.w, d.hw(), d.n);
    let taps = n * n;
    let fd = inp.feat.data();
    let (kvd, khd, wd) = (inp.kv.data(), inp.kh.data(), inp.weight.data());
    let mut dfeat = vec![0.0; fd.len()];
    let mut dkv = vec![0.0; kvd.len()];
    let mut dkh = vec![0.0; khd.len()];
    let mut dw = vec![0.0; wd.len()];
    let mut dpx = vec![0.0; wd.len()];
    let mut dpy = vec![0.0; wd.len()];
    for y in 0..h {
        for x in 0..w {
            let pix = y * w + x;
            for j in 0..taps {
                let (a, b) = (j / n, j % n);
                let (coef, sx, sy) = inp.tap(d, x, y, j);
                let mut dcoef = 0.0;
                let mut gx = 0.0;
                let mut gy = 0.0;
                let fp = Footprint::new(h, w, sx, sy);
                for ch in 0..c {
                    let gv = g[ch * hw + pix];
                    if gv == 0.0 {
                        continue;
                    }
                    let plane = &fd[ch * hw..(ch + 1) * hw];
                    let (v, vx, vy) = fp.grad(plane);
                    dcoef += gv * v;
                    gx += gv * vx;
                    gy += gv * vy;
                    if coef != 0.0 {
                        fp.scatter(&mut dfeat[ch * hw..(ch + 1) * hw], gv * coef);
                    }
                }
                let (wv, kva, khb) = (wd[j * hw + pix], kvd[a * hw + pix], khd[b * hw + pix]);
                dw[j * hw + pix] += dcoef * kva * khb;
                dkv[a * hw + pix] += dcoef * wv * khb;
                dkh[b * hw + pix] += dcoef * wv * kva;
                dpx[j * hw + pix] += coef * gx;
                dpy[j * hw + pix] += coef * gy;
            }
        }
    }
    [dfeat, dkv, dkh, dw, dpx, dpy]
}

pub(crate) struct AdaptiveFilterOp;

impl CustomOp for AdaptiveFilterOp {
    fn name(&self) -> &'static str {
        "adaptive_filter"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let inp = FilterInputs {
            feat: inputs[0],
            kv: inputs[1],
            kh: inputs[2],
            weight: inputs[3],
            px: inputs[4],
            py: inputs[5],
        };
        filter_backward(&inp, g).into_iter().map(Some).collect()
    }
}
