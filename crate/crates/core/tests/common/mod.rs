//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use evlie_core::autodiff::Tensor;
use evlie_core::events::{EventRecord, EventStream, Polarity};
use evlie_core::representation::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random stream with frequent timestamp ties.
pub fn random_stream(seed: u64) -> EventStream {
    let mut r = rng(seed);
    let (w, h) = (r.random_range(1..12u16), r.random_range(1..12u16));
    let n = r.random_range(0..150);
    let span = r.random_range(1..2000u64);
    let recs = (0..n)
        .map(|_| EventRecord {
            x: r.random_range(0..w),
            y: r.random_range(0..h),
            t: 10_000 + r.random_range(0..=span),
            p: if r.random_bool(0.5) {
                Polarity::Positive
            } else {
                Polarity::Negative
            },
        })
        .collect();
    EventStream::new(w, h, recs).unwrap()
}

/// Per-event accumulation straight from the bin definition: event `k` goes
/// to the `i` whose interval `[t0 + iΔt/B, t0 + (i+1)Δt/B)` holds it, found
/// by linear search in exact integer arithmetic; events at the closing
/// timestamp go to the last bin.
pub fn naive_voxel(stream: &EventStream, bins: usize) -> Vec<i64> {
    let (w, h) = (stream.width() as usize, stream.height() as usize);
    let mut out = vec![0i64; bins * h * w];
    let recs = stream.records();
    if recs.is_empty() {
        return out;
    }
    let t0 = recs.iter().map(|r| r.t).min().unwrap();
    let tn = recs.iter().map(|r| r.t).max().unwrap();
    let dt = (tn - t0) as u128;
    let b = bins as u128;
    for r in recs {
        let rel = (r.t - t0) as u128;
        let bin = if r.t == tn {
            bins - 1
        } else {
            (0..bins)
                .find(|&i| b * rel >= i as u128 * dt && b * rel < (i as u128 + 1) * dt)
                .expect("event outside every bin")
        };
        out[(bin * h + r.y as usize) * w + r.x as usize] += r.p.value() as i64;
    }
    out
}

/// Zero-padded per-pixel 2-D correlation with the outer product
/// `K_v[a]·K_h[b]` of the local kernels and optional tap weights.
pub fn dense_conv(f: &Tensor, kv: &Tensor, kh: &Tensor, weight: Option<&Tensor>) -> Tensor {
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let n = kv.shape()[0];
    let r = (n / 2) as isize;
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for a in 0..n {
                    for b in 0..n {
                        let (sy, sx) = (y as isize + a as isize - r, x as isize + b as isize - r);
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            continue;
                        }
                        let wt = weight.map_or(1.0, |t| t.at(&[a * n + b, y, x]));
                        acc += kv.at(&[a, y, x]) * kh.at(&[b, y, x]) * wt * f.at(&[ch, sy as usize, sx as usize]);
                    }
                }
                out.data_mut()[(ch * h + y) * w + x] = acc;
            }
        }
    }
    out
}

pub fn naive_psnr(a: &Image, b: &Image) -> f64 {
    let n = a.data().len() as f64;
    let mut sse = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        sse += (x - y) * (x - y);
    }
    if sse == 0.0 {
        return 99.0;
    }
    (10.0 * (n / sse).log10()).min(99.0)
}

/// SSIM with a full 11×11 Gaussian window (σ = 1.5) evaluated directly at
/// every valid position.
pub fn naive_ssim(a: &Image, b: &Image) -> f64 {
    let (w, h, ch) = (a.width(), a.height(), a.channels());
    let k = 11;
    let mut win = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            win[i * k + j] = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
        }
    }
    let s: f64 = win.iter().sum();
    win.iter_mut().for_each(|v| *v /= s);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for c in 0..ch {
        let mut acc = 0.0;
        let mut count = 0;
        for y in 0..=h - k {
            for x in 0..=w - k {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        ma += win[i * k + j] * a.get(x + j, y + i, c);
                        mb += win[i * k + j] * b.get(x + j, y + i, c);
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let (da, db) = (a.get(x + j, y + i, c) - ma, b.get(x + j, y + i, c) - mb);
                        va += win[i * k + j] * da * da;
                        vb += win[i * k + j] * db * db;
                        cov += win[i * k + j] * da * db;
                    }
                }
                acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    total / ch as f64
}

pub fn l2(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}
