use std::io::Cursor;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Interleaved `H×W×C` image with real values, nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::argument(format!(
                "image extents must be positive, got {width}x{height}x{channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::argument(format!(
                "{width}x{height}x{channels} image needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, channels: usize, f: impl FnMut(usize) -> f64) -> Self {
        Image {
            width,
            height,
            channels,
            data: (0..width * height * channels).map(f).collect(),
        }
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Image::from_fn(width, height, channels, |_| value)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    /// Per-pixel scalar brightness: the single channel as is, Rec.601 luma
    /// for RGB, channel mean otherwise.
    pub fn intensity(&self) -> Vec<f64> {
        match self.channels {
            1 => self.data.clone(),
            3 => self
                .data
                .chunks(3)
                .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
                .collect(),
            c => self.data.chunks(c).map(|p| p.iter().sum::<f64>() / c as f64).collect(),
        }
    }

    /// Planar `C×H×W` tensor.
    pub fn to_chw(&self) -> Tensor {
        let (w, h, c) = (self.width, self.height, self.channels);
        Tensor::from_fn(&[c, h, w], |i| {
            let (ch, rest) = (i / (h * w), i % (h * w));
            self.data[rest * c + ch]
        })
    }

    pub fn from_chw(t: &Tensor) -> Result<Image> {
        let s = t.shape();
        if s.len() != 3 {
            return Err(Error::argument(format!("expected C×H×W tensor, got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let d = t.data();
        Ok(Image::from_fn(w, h, c, |i| {
            let (pix, ch) = (i / c, i % c);
            d[ch * h * w + pix]
        }))
    }

    /// Quantize to 8 bits (`round(v·255)`, clamped).
    pub fn to_rgb8(&self) -> Result<Vec<u8>> {
        if self.channels != 3 {
            return Err(Error::argument(format!(
                "8-bit RGB export needs 3 channels, got {}",
                self.channels
            )));
        }
        Ok(self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect())
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Image> {
        Image::new(width, height, 3, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }

    /// Binary PPM (P6, maxval 255).
    pub fn encode_ppm(&self) -> Result<Vec<u8>> {
        let bytes = self.to_rgb8()?;
        let mut out = Vec::new();
        PnmEncoder::new(&mut out)
            .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
            .write_image(&bytes, self.width as u32, self.height as u32, ExtendedColorType::Rgb8)?;
        Ok(out)
    }

    pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
        let img = image::ImageReader::with_format(Cursor::new(bytes), ImageFormat::Pnm)
            .decode()?
            .to_rgb8();
        Image::from_rgb8(img.width() as usize, img.height() as usize, img.as_raw())
    }

    pub fn read_ppm(path: &Path) -> Result<Image> {
        Image::decode_ppm(&std::fs::read(path)?)
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_ppm()?)?;
        Ok(())
    }
}
