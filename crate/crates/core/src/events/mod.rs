//! Event-stream data model, file formats, frame-driven simulation and
//! background-activity noise.

mod format;
mod noise;
mod simulate;

pub use format::{parse_events, serialize_events, EventFormat, EVT1_HEADER_LEN, EVT1_MAGIC, EVT1_RECORD_LEN};
pub use noise::inject_noise;
pub use simulate::{simulate_events, FrameSequence, SimulationParams, DEFAULT_LOG_EPS};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn value(self) -> i8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }

    pub fn from_value(v: i64) -> Option<Self> {
        match v {
            1 => Some(Polarity::Positive),
            -1 => Some(Polarity::Negative),
            _ => None,
        }
    }

    pub fn from_sign(v: f64) -> Self {
        if v >= 0.0 {
            Polarity::Positive
        } else {
            Polarity::Negative
        }
    }
}

/// A single polarity spike: pixel `(x, y)`, timestamp in microseconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EventRecord {
    pub x: u16,
    pub y: u16,
    pub t: u64,
    pub p: Polarity,
}

impl EventRecord {
    pub fn new(x: u16, y: u16, t: u64, p: Polarity) -> Self {
        EventRecord { x, y, t, p }
    }
}

/// Time-ordered events over a `width × height` sensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventStream {
    width: u16,
    height: u16,
    records: Vec<EventRecord>,
}

impl EventStream {
    /// Validate coordinates and stable-sort by timestamp.
    pub fn new(width: u16, height: u16, mut records: Vec<EventRecord>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::argument(format!(
                "sensor geometry must be positive, got {width}x{height}"
            )));
        }
        if let Some((i, r)) = records.iter().enumerate().find(|(_, r)| r.x >= width || r.y >= height) {
            return Err(Error::validation(format!(
                "record {i}: coordinate ({}, {}) outside {width}x{height} sensor",
                r.x, r.y
            )));
        }
        if !records.windows(2).all(|w| w[0].t <= w[1].t) {
            records.sort_by_key(|r| r.t);
        }
        Ok(EventStream { width, height, records })
    }

    pub fn empty(width: u16, height: u16) -> Result<Self> {
        EventStream::new(width, height, Vec::new())
    }

    pub fn width(&self) -> u16 {
        self.width
    }

    pub fn height(&self) -> u16 {
        self.height
    }

    pub fn records(&self) -> &[EventRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<EventRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn polarity_sum(&self) -> i64 {
        self.records.iter().map(|r| r.p.value() as i64).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unsorted_input_is_stably_sorted() {
        let recs = vec![
            EventRecord::new(0, 0, 5, Polarity::Positive),
            EventRecord::new(1, 0, 2, Polarity::Negative),
            EventRecord::new(2, 0, 5, Polarity::Negative),
            EventRecord::new(3, 0, 2, Polarity::Positive),
        ];
        let s = EventStream::new(4, 1, recs).unwrap();
        let xs: Vec<u16> = s.records().iter().map(|r| r.x).collect();
        assert_eq!(xs, vec![1, 3, 0, 2]);
    }

    #[test]
    fn out_of_geometry_reports_index() {
        let recs = vec![
            EventRecord::new(0, 0, 1, Polarity::Positive),
            EventRecord::new(4, 0, 2, Polarity::Positive),
        ];
        let err = EventStream::new(4, 4, recs).unwrap_err();
        assert!(matches!(err, Error::Validation(ref m) if m.contains("record 1")));
    }

    #[test]
    fn polarity_values() {
        assert_eq!(Polarity::from_value(1), Some(Polarity::Positive));
        assert_eq!(Polarity::from_value(-1), Some(Polarity::Negative));
        assert_eq!(Polarity::from_value(0), None);
    }
}
