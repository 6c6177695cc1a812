//! Workload traces: CSV I/O, synthesis, rescaling, and burstiness analysis.
//!
//! A trace file is UTF-8 CSV with the header
//! `arrival_ms,input_tokens,output_tokens` and one request per line.

mod burst;
mod synth;

pub use burst::{burstiness, running_average, subwindow_series, BurstReport, ExcessPoint, SUBWINDOW_MS};
pub use synth::{synthesize, LengthMix, Segment, SynthesisSpec};

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bucket::BucketId;
use crate::engine::Millis;

pub const TRACE_HEADER: [&str; 3] = ["arrival_ms", "input_tokens", "output_tokens"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TraceRecord {
    pub arrival_ms: Millis,
    pub input_tokens: u32,
    pub output_tokens: u32,
}

impl TraceRecord {
    pub fn new(arrival_ms: Millis, input_tokens: u32, output_tokens: u32) -> Self {
        Self { arrival_ms, input_tokens, output_tokens }
    }

    pub fn total_tokens(&self) -> u64 {
        self.input_tokens as u64 + self.output_tokens as u64
    }

    pub fn bucket(&self) -> BucketId {
        classify(self)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{source_name}: malformed trace:\n  {}", .problems.join("\n  "))]
    Malformed { source_name: String, problems: Vec<String> },
    #[error("target rate must be positive, got {0}")]
    NonPositiveTarget(f64),
    #[error(
        "target rate {target:.3} req/s exceeds the source rate {source_rate:.3} req/s; upsampling is not supported"
    )]
    TargetAboveSource { target: f64, source_rate: f64 },
    #[error("trace needs at least two distinct arrival times to define a rate")]
    NoRate,
}

/// Bucket of a record by its true lengths.
pub fn classify(record: &TraceRecord) -> BucketId {
    BucketId::classify(record.input_tokens, record.output_tokens)
}

pub fn parse_trace(path: &Path) -> Result<Vec<TraceRecord>, TraceError> {
    let file = std::fs::File::open(path).map_err(|source| TraceError::Io { path: path.to_path_buf(), source })?;
    parse_reader(file, &path.display().to_string())
}

/// Parses CSV trace text. Records come back sorted by arrival; every bad
/// line is reported, by 1-based line number.
pub fn parse_reader(reader: impl Read, source_name: &str) -> Result<Vec<TraceRecord>, TraceError> {
    let malformed = |problems| TraceError::Malformed { source_name: source_name.to_string(), problems };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| malformed(vec![format!("line 1: {e}")]))?.clone();
    let mut cols = [0usize; 3];
    let mut problems = vec![];
    for (slot, name) in cols.iter_mut().zip(TRACE_HEADER) {
        match headers.iter().position(|h| h == name) {
            Some(i) => *slot = i,
            None => problems.push(format!("line 1: missing column `{name}`")),
        }
    }
    if !problems.is_empty() {
        return Err(malformed(problems));
    }

    let mut records = vec![];
    for row in rdr.records() {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                problems.push(format!("line {line}: {e}"));
                continue;
            }
        };
        let line = row.position().map_or(0, |p| p.line());
        let mut field = |col: usize, name: &str, min: u64| -> Option<u64> {
            let Some(raw) = row.get(col) else {
                problems.push(format!("line {line}: missing `{name}`"));
                return None;
            };
            match raw.parse::<i128>() {
                Ok(v) if v < min as i128 => {
                    problems.push(format!("line {line}: `{name}` must be at least {min}, got {v}"));
                    None
                }
                Ok(v) if v > u32::MAX as i128 && name != "arrival_ms" => {
                    problems.push(format!("line {line}: `{name}` is too large: {v}"));
                    None
                }
                Ok(v) => u64::try_from(v).ok(),
                Err(_) => {
                    problems.push(format!("line {line}: `{name}` is not an integer: {raw:?}"));
                    None
                }
            }
        };
        let a = field(cols[0], "arrival_ms", 0);
        let i = field(cols[1], "input_tokens", 1);
        let o = field(cols[2], "output_tokens", 1);
        if let (Some(a), Some(i), Some(o)) = (a, i, o) {
            records.push(TraceRecord::new(a, i as u32, o as u32));
        }
    }
    if !problems.is_empty() {
        return Err(malformed(problems));
    }
    records.sort_by_key(|r| r.arrival_ms);
    Ok(records)
}

pub fn write_trace(records: &[TraceRecord], writer: impl Write) -> std::io::Result<()> {
    let mut w =
        csv::WriterBuilder::new().has_headers(false).terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    w.write_record(TRACE_HEADER)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()
}

pub fn save_trace(records: &[TraceRecord], path: &Path) -> Result<(), TraceError> {
    let io = |source| TraceError::Io { path: path.to_path_buf(), source };
    let file = std::fs::File::create(path).map_err(io)?;
    write_trace(records, std::io::BufWriter::new(file)).map_err(io)
}

/// Mean request rate in req/s over the span from first to last arrival.
pub fn mean_rate(records: &[TraceRecord]) -> Option<f64> {
    let (first, last) = (records.first()?, records.last()?);
    let span = last.arrival_ms.checked_sub(first.arrival_ms)?;
    if span == 0 {
        return None;
    }
    Some(records.len() as f64 * 1000.0 / span as f64)
}

/// Uniform random thinning to `target_rps`.
///
/// Keeps exactly `round(target · span)` records chosen without replacement,
/// so the arrival pattern's shape and the length distributions are preserved
/// in expectation. Input must be sorted by arrival.
pub fn rescale(records: &[TraceRecord], target_rps: f64, rng: &mut impl Rng) -> Result<Vec<TraceRecord>, TraceError> {
    if !(target_rps > 0.0) {
        return Err(TraceError::NonPositiveTarget(target_rps));
    }
    let source_rate = mean_rate(records).ok_or(TraceError::NoRate)?;
    if target_rps > source_rate * (1.0 + 1e-9) {
        return Err(TraceError::TargetAboveSource { target: target_rps, source_rate });
    }
    let n = records.len();
    let keep = ((n as f64 * target_rps / source_rate).round() as usize).clamp(1, n);
    let mut picked = index::sample(rng, n, keep).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| records[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bucket::LengthClass;
    use crate::engine::{RngStreams, Stream};
    use proptest::prelude::*;
    use rand::Rng;

    fn parse(text: &str) -> Result<Vec<TraceRecord>, TraceError> {
        parse_reader(text.as_bytes(), "t.csv")
    }

    #[test]
    fn parses_well_formed_file() {
        let recs = parse("arrival_ms,input_tokens,output_tokens\n0,10,5\n5,20,6\n9,30,7\n").unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[2], TraceRecord::new(9, 30, 7));
    }

    #[test]
    fn sorts_out_of_order_arrivals() {
        let recs = parse("arrival_ms,input_tokens,output_tokens\n50,1,1\n10,2,2\n30,3,3\n").unwrap();
        let times: Vec<_> = recs.iter().map(|r| r.arrival_ms).collect();
        assert_eq!(times, vec![10, 30, 50]);
    }

    #[test]
    fn reports_every_bad_line() {
        let text = "arrival_ms,input_tokens,output_tokens\n\
                    0,1,1\n1,1,1\n2,1,1\n3,1,1\n4,1,1\n5,-4,1\n6,x,1\n7,1,0\n";
        let err = parse(text).unwrap_err().to_string();
        assert!(err.contains("line 7: `input_tokens` must be at least 1, got -4"), "{err}");
        assert!(err.contains("line 8: `input_tokens` is not an integer"), "{err}");
        assert!(err.contains("line 9: `output_tokens` must be at least 1"), "{err}");
    }

    #[test]
    fn missing_column_is_an_error() {
        let err = parse("arrival_ms,input_tokens\n0,1\n").unwrap_err().to_string();
        assert!(err.contains("missing column `output_tokens`"), "{err}");
    }

    #[test]
    fn classify_examples() {
        assert_eq!(classify(&TraceRecord::new(0, 256, 100)).label(), "S-S");
        assert_eq!(classify(&TraceRecord::new(0, 8192, 610)).label(), "L-L");
        let clamped = classify(&TraceRecord::new(0, 9000, 700));
        assert_eq!((clamped.input, clamped.output), (LengthClass::Long, LengthClass::Long));
    }

    fn uniform(n: u64, gap: u64) -> Vec<TraceRecord> {
        (0..n).map(|i| TraceRecord::new(i * gap, 1 + (i % 4000) as u32, 1 + (i % 600) as u32)).collect()
    }

    #[test]
    fn rescale_halves() {
        // 44 req/s source thinned to 22
        let src: Vec<_> = (0..4400u64).map(|i| TraceRecord::new(i * 1000 / 44, 100, 10)).collect();
        let src_rate = mean_rate(&src).unwrap();
        let mut rng = RngStreams::new(1).stream(Stream::Rescale);
        let out = rescale(&src, src_rate / 2.0, &mut rng).unwrap();
        assert_eq!(out.len(), 2200);
        let rate = mean_rate(&out).unwrap();
        assert!((rate / (src_rate / 2.0) - 1.0).abs() < 0.02, "{rate}");
    }

    #[test]
    fn rescale_to_source_rate_is_identity() {
        let src = uniform(500, 10);
        let mut rng = RngStreams::new(1).stream(Stream::Rescale);
        let out = rescale(&src, mean_rate(&src).unwrap(), &mut rng).unwrap();
        assert_eq!(out, src);
    }

    #[test]
    fn rescale_refuses_upsampling() {
        let src = uniform(100, 10);
        let mut rng = RngStreams::new(1).stream(Stream::Rescale);
        let too_fast = mean_rate(&src).unwrap() * 1.5;
        assert!(matches!(rescale(&src, too_fast, &mut rng), Err(TraceError::TargetAboveSource { .. })));
        assert!(matches!(rescale(&src, 0.0, &mut rng), Err(TraceError::NonPositiveTarget(_))));
    }

    fn ks_statistic(mut a: Vec<u32>, mut b: Vec<u32>) -> f64 {
        a.sort_unstable();
        b.sort_unstable();
        let (mut i, mut j, mut d) = (0usize, 0usize, 0f64);
        while i < a.len() && j < b.len() {
            let x = a[i].min(b[j]);
            while i < a.len() && a[i] == x {
                i += 1;
            }
            while j < b.len() && b[j] == x {
                j += 1;
            }
            d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
        }
        d
    }

    #[test]
    fn rescale_preserves_length_distributions() {
        let mut rng = RngStreams::new(3).stream(Stream::TraceSynthesis);
        let src: Vec<_> = (0..20_000u64)
            .map(|i| TraceRecord::new(i * 5, rng.random_range(1..=8192), rng.random_range(1..=610)))
            .collect();
        let mut rs = RngStreams::new(3).stream(Stream::Rescale);
        let out = rescale(&src, mean_rate(&src).unwrap() / 2.0, &mut rs).unwrap();
        assert_eq!(out.len(), 10_000);
        let d_in =
            ks_statistic(src.iter().map(|r| r.input_tokens).collect(), out.iter().map(|r| r.input_tokens).collect());
        let d_out =
            ks_statistic(src.iter().map(|r| r.output_tokens).collect(), out.iter().map(|r| r.output_tokens).collect());
        assert!(d_in < 0.05 && d_out < 0.05, "{d_in} {d_out}");
    }

    proptest! {
        #[test]
        fn csv_round_trip(mut recs in prop::collection::vec((0u64..1_000_000, 1u32..100_000, 1u32..5_000), 0..50)) {
            recs.sort();
            let recs: Vec<_> = recs.into_iter().map(|(a, i, o)| TraceRecord::new(a, i, o)).collect();
            let mut buf = vec![];
            write_trace(&recs, &mut buf).unwrap();
            let text = String::from_utf8(buf.clone()).unwrap();
            prop_assert!(text.starts_with("arrival_ms,input_tokens,output_tokens\n"));
            let back = parse_reader(buf.as_slice(), "mem").unwrap();
            prop_assert_eq!(back, recs);
        }
    }
}
