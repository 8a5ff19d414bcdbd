//! `EVT1` binary and plain CSV event files.
//!
//! EVT1 layout (little-endian): magic `EVT1`, `u16` width, `u16` height,
//! `u64` count, then `count` records of `u16 x, u16 y, u64 t_us, i8 p`.

use std::fmt::Write as _;

use super::{EventRecord, EventStream, Polarity};
use crate::error::{Error, Result};

pub const EVT1_MAGIC: [u8; 4] = *b"EVT1";
pub const EVT1_HEADER_LEN: usize = 16;
pub const EVT1_RECORD_LEN: usize = 13;

const CSV_HEADER: &str = "x,y,t,p";

/// On-disk event encodings. CSV carries no geometry, so it is supplied here.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventFormat {
    Binary,
    Csv { width: u16, height: u16 },
}

pub fn parse_events(bytes: &[u8], format: EventFormat) -> Result<EventStream> {
    match format {
        EventFormat::Binary => parse_binary(bytes),
        EventFormat::Csv { width, height } => parse_csv(bytes, width, height),
    }
}

pub fn serialize_events(stream: &EventStream, format: EventFormat) -> Vec<u8> {
    match format {
        EventFormat::Binary => serialize_binary(stream),
        EventFormat::Csv { .. } => serialize_csv(stream),
    }
}

fn parse_binary(bytes: &[u8]) -> Result<EventStream> {
    if bytes.len() < EVT1_HEADER_LEN {
        return Err(Error::format(format!(
            "EVT1 header needs {EVT1_HEADER_LEN} bytes, got {}",
            bytes.len()
        )));
    }
    if bytes[..4] != EVT1_MAGIC {
        return Err(Error::format(format!("bad magic {:02x?}", &bytes[..4])));
    }
    let width = u16::from_le_bytes([bytes[4], bytes[5]]);
    let height = u16::from_le_bytes([bytes[6], bytes[7]]);
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let body = &bytes[EVT1_HEADER_LEN..];
    let expected = usize::try_from(count)
        .ok()
        .and_then(|c| c.checked_mul(EVT1_RECORD_LEN))
        .ok_or_else(|| Error::format(format!("record count {count} too large")))?;
    if body.len() != expected {
        return Err(Error::format(format!(
            "header declares {count} records ({expected} bytes), body has {} bytes",
            body.len()
        )));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(format!("degenerate geometry {width}x{height}")));
    }

    let mut records = Vec::with_capacity(count as usize);
    for (i, rec) in body.chunks_exact(EVT1_RECORD_LEN).enumerate() {
        let x = u16::from_le_bytes([rec[0], rec[1]]);
        let y = u16::from_le_bytes([rec[2], rec[3]]);
        let t = u64::from_le_bytes(rec[4..12].try_into().unwrap());
        let raw = rec[12] as i8;
        let p = Polarity::from_value(raw as i64)
            .ok_or_else(|| Error::validation(format!("record {i}: unknown polarity byte {:#04x}", rec[12])))?;
        if x >= width || y >= height {
            return Err(Error::validation(format!(
                "record {i}: coordinate ({x}, {y}) outside {width}x{height} sensor"
            )));
        }
        records.push(EventRecord { x, y, t, p });
    }
    EventStream::new(width, height, records)
}

fn serialize_binary(stream: &EventStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(EVT1_HEADER_LEN + stream.len() * EVT1_RECORD_LEN);
    out.extend_from_slice(&EVT1_MAGIC);
    out.extend_from_slice(&stream.width().to_le_bytes());
    out.extend_from_slice(&stream.height().to_le_bytes());
    out.extend_from_slice(&(stream.len() as u64).to_le_bytes());
    for r in stream.records() {
        out.extend_from_slice(&r.x.to_le_bytes());
        out.extend_from_slice(&r.y.to_le_bytes());
        out.extend_from_slice(&r.t.to_le_bytes());
        out.push(r.p.value() as u8);
    }
    out
}

fn parse_csv(bytes: &[u8], width: u16, height: u16) -> Result<EventStream> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::format(format!("CSV is not UTF-8: {e}")))?;
    let mut records = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (line_no == 0 && line == CSV_HEADER) {
            continue;
        }
        let i = records.len();
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::format(format!(
                "line {}: expected 4 fields, got {}",
                line_no + 1,
                fields.len()
            )));
        }
        let num = |s: &str, what: &str| -> Result<i64> {
            s.parse::<i64>()
                .map_err(|_| Error::format(format!("line {}: bad {what} {s:?}", line_no + 1)))
        };
        let (x, y, t, p) = (
            num(fields[0], "x")?,
            num(fields[1], "y")?,
            num(fields[2], "t")?,
            num(fields[3], "p")?,
        );
        let p =
            Polarity::from_value(p).ok_or_else(|| Error::validation(format!("record {i}: unknown polarity {p}")))?;
        if t < 0 {
            return Err(Error::validation(format!("record {i}: negative timestamp {t}")));
        }
        if !(0..width as i64).contains(&x) || !(0..height as i64).contains(&y) {
            return Err(Error::validation(format!(
                "record {i}: coordinate ({x}, {y}) outside {width}x{height} sensor"
            )));
        }
        records.push(EventRecord {
            x: x as u16,
            y: y as u16,
            t: t as u64,
            p,
        });
    }
    EventStream::new(width, height, records)
}

fn serialize_csv(stream: &EventStream) -> Vec<u8> {
    let mut out = String::with_capacity(8 + stream.len() * 16);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in stream.records() {
        let _ = writeln!(out, "{},{},{},{}", r.x, r.y, r.t, r.p.value());
    }
    out.into_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn header(w: u16, h: u16, count: u64) -> Vec<u8> {
        let mut b = EVT1_MAGIC.to_vec();
        b.extend_from_slice(&w.to_le_bytes());
        b.extend_from_slice(&h.to_le_bytes());
        b.extend_from_slice(&count.to_le_bytes());
        b
    }

    #[test]
    fn empty_body() {
        let s = parse_events(&header(4, 4, 0), EventFormat::Binary).unwrap();
        assert_eq!(s.len(), 0);
        assert_eq!((s.width(), s.height()), (4, 4));
    }

    #[test]
    fn empty_stream_serializes_to_header_only() {
        let s = EventStream::empty(4, 4).unwrap();
        assert_eq!(serialize_events(&s, EventFormat::Binary), header(4, 4, 0));
    }

    #[test]
    fn single_event_record_layout() {
        let s = EventStream::new(4, 4, vec![EventRecord::new(0, 0, 0, Polarity::Positive)]).unwrap();
        let b = serialize_events(&s, EventFormat::Binary);
        assert_eq!(b.len(), EVT1_HEADER_LEN + EVT1_RECORD_LEN);
        assert_eq!(&b[EVT1_HEADER_LEN..], &[0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1]);
    }

    #[test]
    fn csv_without_header() {
        let s = parse_events(b"2,3,100,1\n2,3,250,-1", EventFormat::Csv { width: 4, height: 4 }).unwrap();
        assert_eq!(
            s.records(),
            &[
                EventRecord::new(2, 3, 100, Polarity::Positive),
                EventRecord::new(2, 3, 250, Polarity::Negative)
            ]
        );
    }

    #[test]
    fn csv_round_trip_with_header() {
        let s = parse_events(
            b"x,y,t,p\n1,1,9,-1\n0,2,3,1\n",
            EventFormat::Csv { width: 3, height: 3 },
        )
        .unwrap();
        assert_eq!(s.records()[0].t, 3);
        let fmt = EventFormat::Csv { width: 3, height: 3 };
        assert_eq!(parse_events(&serialize_events(&s, fmt), fmt).unwrap(), s);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut b = header(4, 4, 0);
        b[0] = b'X';
        assert!(matches!(parse_events(&b, EventFormat::Binary), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_body_is_format_error() {
        let mut b = header(4, 4, 2);
        b.extend_from_slice(&[0; EVT1_RECORD_LEN]);
        assert!(matches!(parse_events(&b, EventFormat::Binary), Err(Error::Format(_))));
    }

    #[test]
    fn bad_polarity_is_validation_error() {
        let mut b = header(4, 4, 1);
        b.extend_from_slice(&[1, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        let err = parse_events(&b, EventFormat::Binary).unwrap_err();
        assert!(matches!(err, Error::Validation(ref m) if m.contains("polarity")));
    }

    #[test]
    fn out_of_range_coordinate_names_record() {
        let mut b = header(4, 4, 2);
        b.extend_from_slice(&[1, 0, 1, 0, 5, 0, 0, 0, 0, 0, 0, 0, 1]);
        b.extend_from_slice(&[4, 0, 1, 0, 6, 0, 0, 0, 0, 0, 0, 0, 1]);
        let err = parse_events(&b, EventFormat::Binary).unwrap_err();
        assert!(
            matches!(err, Error::Validation(ref m) if m.contains("record 1")),
            "{err}"
        );
    }

    #[test]
    fn unsorted_binary_is_resorted() {
        let mut b = header(4, 4, 2);
        b.extend_from_slice(&[1, 0, 1, 0, 9, 0, 0, 0, 0, 0, 0, 0, 1]);
        b.extend_from_slice(&[2, 0, 1, 0, 3, 0, 0, 0, 0, 0, 0, 0, 0xff]);
        let s = parse_events(&b, EventFormat::Binary).unwrap();
        assert_eq!(s.records()[0].t, 3);
    }

    fn arb_file() -> impl Strategy<Value = Vec<u8>> {
        (1u16..64, 1u16..64).prop_flat_map(|(w, h)| {
            prop::collection::vec((0..w, 0..h, 0u64..1_000_000, any::<bool>()), 0..64).prop_map(move |mut recs| {
                recs.sort_by_key(|r| r.2);
                let mut b = header(w, h, recs.len() as u64);
                for (x, y, t, pos) in recs {
                    b.extend_from_slice(&x.to_le_bytes());
                    b.extend_from_slice(&y.to_le_bytes());
                    b.extend_from_slice(&t.to_le_bytes());
                    b.push(if pos { 1 } else { 0xff });
                }
                b
            })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn binary_round_trip_is_byte_exact(bytes in arb_file()) {
            let s = parse_events(&bytes, EventFormat::Binary).unwrap();
            prop_assert_eq!(serialize_events(&s, EventFormat::Binary), bytes);
        }

        #[test]
        fn csv_round_trip(bytes in arb_file()) {
            let s = parse_events(&bytes, EventFormat::Binary).unwrap();
            let fmt = EventFormat::Csv { width: s.width(), height: s.height() };
            prop_assert_eq!(parse_events(&serialize_events(&s, fmt), fmt).unwrap(), s);
        }
    }
}
