use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use super::{EventRecord, EventStream, Polarity};
use crate::error::{Error, Result};

/// Add spatiotemporally uniform background-activity events.
///
/// The number of added events is Poisson with mean
/// `rate · W · H · (t_b − t_a) / 1e6`; each has uniform pixel, timestamp in
/// `[t_a, t_b)` and polarity. Original events are kept and the result is
/// stably re-sorted, so for equal timestamps original events stay first.
pub fn inject_noise(stream: &EventStream, rate: f64, span: (u64, u64), seed: u64) -> Result<EventStream> {
    let (ta, tb) = span;
    if !(rate >= 0.0 && rate.is_finite()) {
        return Err(Error::argument(format!("noise rate must be >= 0, got {rate}")));
    }
    if ta >= tb {
        return Err(Error::argument(format!("noise span [{ta}, {tb}) is empty")));
    }
    if rate == 0.0 {
        return Ok(stream.clone());
    }
    let (w, h) = (stream.width(), stream.height());
    let mean = rate * w as f64 * h as f64 * (tb - ta) as f64 * 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = Poisson::new(mean)
        .map_err(|e| Error::argument(format!("poisson mean {mean}: {e}")))?
        .sample(&mut rng) as usize;

    let mut records = stream.records().to_vec();
    records.reserve(count);
    for _ in 0..count {
        records.push(EventRecord {
            x: rng.random_range(0..w),
            y: rng.random_range(0..h),
            t: rng.random_range(ta..tb),
            p: if rng.random_bool(0.5) {
                Polarity::Positive
            } else {
                Polarity::Negative
            },
        });
    }
    records.sort_by_key(|r| r.t);
    EventStream::new(w, h, records)
}
