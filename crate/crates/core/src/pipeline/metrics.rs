//! Full-reference image quality metrics on images in `[0, 1]`.

use crate::error::{Error, Result};
use crate::representation::Image;

/// Reported for identical images and as an upper bound.
pub const PSNR_CAP: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_shapes(what: &str, a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::argument(format!(
            "{what}: {}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_shapes("mse", a, b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
    Ok(sum / a.data().len() as f64)
}

/// `10·log10(1 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * m.log10()).min(PSNR_CAP))
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable 'valid' filtering of one `h×w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| taps[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Gaussian-window SSIM with unit data range, averaged over valid windows
/// and then over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_shapes("ssim", a, b)?;
    let (w, h, ch) = (a.width(), a.height(), a.channels());
    if w.min(h) < SSIM_WINDOW {
        return Err(Error::argument(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let plane = |img: &Image, c: usize| -> Vec<f64> { img.data().iter().skip(c).step_by(ch).copied().collect() };
    let mut total = 0.0;
    for c in 0..ch {
        let (pa, pb) = (plane(a, c), plane(b, c));
        let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
        let mu_a = filter_valid(&pa, h, w, &taps);
        let mu_b = filter_valid(&pb, h, w, &taps);
        let saa = filter_valid(&prod(&pa, &pa), h, w, &taps);
        let sbb = filter_valid(&prod(&pb, &pb), h, w, &taps);
        let sab = filter_valid(&prod(&pa, &pb), h, w, &taps);
        let n = mu_a.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = saa[i] - ma * ma;
            let vb = sbb[i] - mb * mb;
            let cov = sab[i] - ma * mb;
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += acc / n as f64;
    }
    Ok(total / ch as f64)
}

/// PSNR and SSIM of one image against a reference.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct Metrics {
    pub psnr: f64,
    pub ssim: f64,
}

impl Metrics {
    pub fn compute(a: &Image, b: &Image) -> Result<Metrics> {
        Ok(Metrics {
            psnr: psnr(a, b)?,
            ssim: ssim(a, b)?,
        })
    }
}
