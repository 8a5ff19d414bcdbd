use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{Error, Result};

/// Per-pixel channel maximum of an image, `H×W` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct IlluminationPrior {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl IlluminationPrior {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Single-channel image view of the prior.
    pub fn to_image(&self) -> Image {
        Image::new(self.width, self.height, 1, self.data.clone()).expect("prior geometry is valid")
    }

    /// Prior replicated across `channels`.
    pub fn replicate(&self, channels: usize) -> Image {
        Image::from_fn(self.width, self.height, channels, |i| self.data[i / channels])
    }
}

pub fn illumination_prior(image: &Image) -> IlluminationPrior {
    let data = image
        .data()
        .chunks(image.channels())
        .map(|p| p.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    IlluminationPrior {
        width: image.width(),
        height: image.height(),
        data,
    }
}

/// Reflectance/illumination split whose elementwise product is the source.
#[derive(Clone, Debug, PartialEq)]
pub struct RetinexPair {
    pub reflectance: Image,
    pub illumination: Image,
}

impl RetinexPair {
    /// Use the floored illumination prior, replicated over channels, as the
    /// illumination map; reflectance is the quotient.
    pub fn from_prior(image: &Image, eps: f64) -> Result<RetinexPair> {
        if !(eps > 0.0) {
            return Err(Error::argument(format!(
                "illumination floor must be positive, got {eps}"
            )));
        }
        let illumination = illumination_prior(image)
            .replicate(image.channels())
            .map(|v| v.max(eps).min(1.0));
        let reflectance = Image::from_fn(image.width(), image.height(), image.channels(), |i| {
            (image.data()[i] / illumination.data()[i]).clamp(0.0, 1.0)
        });
        Ok(RetinexPair {
            reflectance,
            illumination,
        })
    }

    pub fn reconstruct(&self) -> Image {
        Image::from_fn(
            self.reflectance.width(),
            self.reflectance.height(),
            self.reflectance.channels(),
            |i| self.reflectance.data()[i] * self.illumination.data()[i],
        )
    }
}

/// `min(1, I ⊙ L̄)` (and `max(0, ·)`).
pub fn apply_litup(image: &Image, litup: &Image) -> Result<Image> {
    if !image.same_shape(litup) {
        return Err(Error::argument(format!(
            "lit-up map is {}x{}x{}, image is {}x{}x{}",
            litup.width(),
            litup.height(),
            litup.channels(),
            image.width(),
            image.height(),
            image.channels()
        )));
    }
    Ok(Image::from_fn(image.width(), image.height(), image.channels(), |i| {
        (image.data()[i] * litup.data()[i]).clamp(0.0, 1.0)
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowLightParams {
    pub gain: f64,
    pub gamma: f64,
    pub noise_sigma: f64,
}

impl Default for LowLightParams {
    fn default() -> Self {
        LowLightParams {
            gain: 0.25,
            gamma: 1.5,
            noise_sigma: 0.01,
        }
    }
}

/// `clamp((gain·I)^gamma + N(0, σ²), 0, 1)`, reproducible per seed.
pub fn synthesize_lowlight(image: &Image, params: LowLightParams, seed: u64) -> Result<Image> {
    let LowLightParams {
        gain,
        gamma,
        noise_sigma,
    } = params;
    if !(gain > 0.0 && gain <= 1.0) {
        return Err(Error::argument(format!("gain must be in (0, 1], got {gain}")));
    }
    if !(gamma >= 1.0) {
        return Err(Error::argument(format!("gamma must be >= 1, got {gamma}")));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::argument(format!("noise sigma must be >= 0, got {noise_sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sigma).expect("sigma validated");
    let mut out = image.clone();
    for v in out.data_mut() {
        let n = if noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        *v = ((gain * *v).max(0.0).powf(gamma) + n).clamp(0.0, 1.0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_image(seed: u64) -> Image {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(6, 5, 3, |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn prior_of_pixel() {
        let img = Image::new(1, 1, 3, vec![0.2, 0.5, 0.3]).unwrap();
        assert_eq!(illumination_prior(&img).data(), &[0.5]);
    }

    #[test]
    fn prior_of_replicated_gray_is_gray() {
        let gray: Vec<f64> = (0..12).map(|i| i as f64 / 12.0).collect();
        let img = Image::from_fn(4, 3, 3, |i| gray[i / 3]);
        assert_eq!(illumination_prior(&img).data(), gray.as_slice());
    }

    #[test]
    fn prior_dominates_and_hits_argmax() {
        let img = rand_image(1);
        let prior = illumination_prior(&img);
        for y in 0..img.height() {
            for x in 0..img.width() {
                let px = img.pixel(x, y);
                assert!(px.iter().all(|&v| prior.get(x, y) >= v));
                assert!(px.iter().any(|&v| prior.get(x, y) == v));
            }
        }
    }

    #[test]
    fn prior_is_idempotent() {
        let prior = illumination_prior(&rand_image(2));
        assert_eq!(illumination_prior(&prior.replicate(3)), prior);
    }

    #[test]
    fn retinex_pair_reconstructs() {
        let img = rand_image(3);
        let pair = RetinexPair::from_prior(&img, 1e-3).unwrap();
        let rec = pair.reconstruct();
        assert!(rec.data().iter().zip(img.data()).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn litup_identity_and_zero() {
        let img = rand_image(4);
        let ones = Image::filled(6, 5, 3, 1.0);
        assert_eq!(apply_litup(&img, &ones).unwrap(), img);
        let zero = Image::filled(6, 5, 3, 0.0);
        let lit = rand_image(5).map(|v| 1.0 + 4.0 * v);
        assert!(apply_litup(&zero, &lit).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn litup_pointwise_oracle() {
        let img = rand_image(6);
        let lit = rand_image(7).map(|v| 3.0 * v + 0.01);
        let out = apply_litup(&img, &lit).unwrap();
        for i in 0..img.data().len() {
            assert_eq!(out.data()[i], (img.data()[i] * lit.data()[i]).min(1.0));
        }
    }

    #[test]
    fn inverse_prior_litup_never_exceeds_one() {
        let img = rand_image(8);
        let eps = 1e-3;
        let lit = illumination_prior(&img)
            .replicate(3)
            .map(|v| (1.0 / v.max(eps)).min(1e3));
        assert!(apply_litup(&img, &lit).unwrap().data().iter().all(|&v| v <= 1.0));
    }

    #[test]
    fn litup_shape_mismatch() {
        let img = rand_image(9);
        assert!(matches!(
            apply_litup(&img, &Image::filled(5, 5, 3, 1.0)),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn lowlight_identity_and_closed_form() {
        let img = rand_image(10);
        let id = LowLightParams {
            gain: 1.0,
            gamma: 1.0,
            noise_sigma: 0.0,
        };
        assert_eq!(synthesize_lowlight(&img, id, 0).unwrap(), img);

        let flat = Image::filled(4, 4, 3, 0.8);
        let dark = LowLightParams {
            gain: 0.05,
            gamma: 1.0,
            noise_sigma: 0.0,
        };
        let out = synthesize_lowlight(&flat, dark, 0).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.04).abs() < 1e-12));
    }

    #[test]
    fn lowlight_reproducible_and_validated() {
        let img = rand_image(11);
        let p = LowLightParams::default();
        assert_eq!(
            synthesize_lowlight(&img, p, 5).unwrap(),
            synthesize_lowlight(&img, p, 5).unwrap()
        );
        assert_ne!(
            synthesize_lowlight(&img, p, 5).unwrap(),
            synthesize_lowlight(&img, p, 6).unwrap()
        );
        let bad = LowLightParams { gain: 0.0, ..p };
        assert!(matches!(synthesize_lowlight(&img, bad, 0), Err(Error::Argument(_))));
    }
}
