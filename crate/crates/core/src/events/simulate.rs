use rayon::prelude::*;

use super::{EventRecord, EventStream, Polarity};
use crate::error::{Error, Result};
use crate::representation::Image;

pub const DEFAULT_LOG_EPS: f64 = 1e-3;

/// Frames with linear intensity in `[0, 1]` and strictly increasing
/// microsecond timestamps.
#[derive(Clone, Debug)]
pub struct FrameSequence {
    frames: Vec<Image>,
    timestamps: Vec<u64>,
}

impl FrameSequence {
    pub fn new(frames: Vec<Image>, timestamps: Vec<u64>) -> Result<Self> {
        if frames.len() != timestamps.len() {
            return Err(Error::argument(format!(
                "{} frames but {} timestamps",
                frames.len(),
                timestamps.len()
            )));
        }
        if let Some(f) = frames.first() {
            if let Some(i) = frames
                .iter()
                .position(|g| g.width() != f.width() || g.height() != f.height())
            {
                return Err(Error::validation(format!(
                    "frame {i} is {}x{}, expected {}x{}",
                    frames[i].width(),
                    frames[i].height(),
                    f.width(),
                    f.height()
                )));
            }
        }
        if let Some(i) = timestamps.windows(2).position(|w| w[0] >= w[1]) {
            return Err(Error::validation(format!(
                "timestamps must strictly increase: t[{i}]={} >= t[{}]={}",
                timestamps[i],
                i + 1,
                timestamps[i + 1]
            )));
        }
        Ok(FrameSequence { frames, timestamps })
    }

    pub fn frames(&self) -> &[Image] {
        &self.frames
    }

    pub fn timestamps(&self) -> &[u64] {
        &self.timestamps
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimulationParams {
    /// Contrast threshold in log-intensity units.
    pub contrast: f64,
    /// Intensity floor applied before taking the log.
    pub log_eps: f64,
}

impl Default for SimulationParams {
    fn default() -> Self {
        SimulationParams {
            contrast: 0.2,
            log_eps: DEFAULT_LOG_EPS,
        }
    }
}

/// Frame-driven event synthesis with a per-pixel reference-level quantizer.
///
/// Between consecutive frames each pixel emits `floor(|Δℓ| / c)` events of
/// sign `Δℓ`, where `Δℓ` is the log-intensity change relative to the
/// pixel's reference level; the reference then advances by `c` per event.
/// Event `j` of `n` is stamped at the point where linear interpolation of
/// `Δℓ` over the frame interval crosses `j·c`.
pub fn simulate_events(frames: &FrameSequence, params: SimulationParams) -> Result<EventStream> {
    if frames.len() < 2 {
        return Err(Error::argument(format!(
            "simulation needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    if !(params.contrast > 0.0 && params.contrast.is_finite()) {
        return Err(Error::argument(format!(
            "contrast threshold must be positive, got {}",
            params.contrast
        )));
    }
    if !(params.log_eps > 0.0) {
        return Err(Error::argument(format!(
            "log floor must be positive, got {}",
            params.log_eps
        )));
    }
    let first = &frames.frames()[0];
    let (w, h) = (first.width(), first.height());
    if w > u16::MAX as usize || h > u16::MAX as usize {
        return Err(Error::argument(format!("frame geometry {w}x{h} exceeds u16")));
    }
    let c = params.contrast;
    let log_levels: Vec<Vec<f64>> = frames
        .frames()
        .iter()
        .map(|f| f.intensity().into_iter().map(|v| v.max(params.log_eps).ln()).collect())
        .collect();
    let ts = frames.timestamps();

    let per_pixel: Vec<Vec<EventRecord>> = (0..w * h)
        .into_par_iter()
        .map(|idx| {
            let (x, y) = ((idx % w) as u16, (idx / w) as u16);
            let mut reference = log_levels[0][idx];
            let mut out = Vec::new();
            for k in 1..log_levels.len() {
                let delta = log_levels[k][idx] - reference;
                let n = (delta.abs() / c).floor() as u64;
                if n == 0 {
                    continue;
                }
                let p = Polarity::from_sign(delta);
                let (ta, tb) = (ts[k - 1], ts[k]);
                let span = (tb - ta) as f64;
                for j in 1..=n {
                    let frac = (j as f64 * c / delta.abs()).min(1.0);
                    let t = ta + (span * frac).floor() as u64;
                    out.push(EventRecord { x, y, t, p });
                }
                reference += n as f64 * c * delta.signum();
            }
            out
        })
        .collect();

    let records: Vec<EventRecord> = per_pixel.into_iter().flatten().collect();
    EventStream::new(w as u16, h as u16, records)
}
