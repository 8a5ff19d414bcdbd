use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::events::EventStream;

/// `B×H×W` signed polarity sums over equal time bins.
#[derive(Clone, Debug, PartialEq)]
pub struct EventVoxel {
    data: Tensor,
    t0: u64,
    t_end: u64,
}

impl EventVoxel {
    pub fn bins(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn t0(&self) -> u64 {
        self.t0
    }

    pub fn t_end(&self) -> u64 {
        self.t_end
    }
}

/// Bin index of timestamp `t` for a window starting at `t0` of length `dt`.
///
/// Integer floor of `(t − t0)·B / Δt`, which is exactly membership in the
/// half-open interval `[t0 + iΔt/B, t0 + (i+1)Δt/B)`. The closing event at
/// `t0 + Δt` is clamped into the last bin. In a zero-length window every
/// event sits at the closing timestamp and lands there too.
fn bin_index(t: u64, t0: u64, dt: u64, bins: usize) -> usize {
    if dt == 0 {
        return bins - 1;
    }
    let i = ((t - t0) as u128 * bins as u128 / dt as u128) as usize;
    i.min(bins - 1)
}

/// Stack events into `bins` equal time bins spanning the stream's own
/// first-to-last timestamp range.
pub fn voxelize_sbt(stream: &EventStream, bins: usize) -> Result<EventVoxel> {
    if bins == 0 {
        return Err(Error::argument("voxel bin count must be >= 1"));
    }
    let (w, h) = (stream.width() as usize, stream.height() as usize);
    let mut data = Tensor::zeros(&[bins, h, w]);
    let recs = stream.records();
    let (Some(first), Some(last)) = (recs.first(), recs.last()) else {
        return Ok(EventVoxel { data, t0: 0, t_end: 0 });
    };
    let (t0, t_end) = (first.t, last.t);
    let dt = t_end - t0;
    let out = data.data_mut();
    for r in recs {
        let b = bin_index(r.t, t0, dt, bins);
        out[(b * h + r.y as usize) * w + r.x as usize] += r.p.value() as f64;
    }
    Ok(EventVoxel { data, t0, t_end })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{EventRecord, Polarity};

    #[test]
    fn empty_stream_gives_zero_voxel() {
        let v = voxelize_sbt(&EventStream::empty(2, 2).unwrap(), 4).unwrap();
        assert_eq!(v.tensor(), &Tensor::zeros(&[4, 2, 2]));
        assert_eq!((v.t0(), v.t_end()), (0, 0));
    }

    #[test]
    fn zero_bins_rejected() {
        assert!(matches!(
            voxelize_sbt(&EventStream::empty(2, 2).unwrap(), 0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn last_event_clamped_into_final_bin() {
        let s = EventStream::new(
            2,
            1,
            vec![
                EventRecord::new(0, 0, 100, Polarity::Positive),
                EventRecord::new(0, 0, 200, Polarity::Positive),
                EventRecord::new(1, 0, 300, Polarity::Negative),
            ],
        )
        .unwrap();
        let v = voxelize_sbt(&s, 2).unwrap();
        let t = v.tensor();
        assert_eq!(t.at(&[0, 0, 0]), 1.0);
        assert_eq!(t.at(&[1, 0, 0]), 1.0);
        assert_eq!(t.at(&[1, 0, 1]), -1.0);
        assert_eq!(t.at(&[0, 0, 1]), 0.0);
    }

    #[test]
    fn single_timestamp_goes_to_last_bin() {
        let s = EventStream::new(
            1,
            1,
            vec![
                EventRecord::new(0, 0, 7, Polarity::Positive),
                EventRecord::new(0, 0, 7, Polarity::Positive),
            ],
        )
        .unwrap();
        let v = voxelize_sbt(&s, 3).unwrap();
        assert_eq!(v.tensor().data(), &[0.0, 0.0, 2.0]);
    }
}
