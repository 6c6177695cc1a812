use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Exp;
use serde::{Deserialize, Serialize};

use crate::bucket::{BucketId, BucketTable, INPUT_BOUNDARIES, OUTPUT_BOUNDARIES};
use crate::engine::Millis;
use crate::error::ConfigError;
use crate::trace::TraceRecord;

/// How request lengths are drawn within a segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LengthMix {
    /// Pick a bucket by weight, then lengths near its representatives.
    ///
    /// `jitter` in [0, 1] spreads each length uniformly over
    /// `[rep·(1−jitter), rep]`, clipped to stay inside the bucket.
    Buckets {
        weights: BucketTable<f64>,
        #[serde(default)]
        jitter: f64,
    },
    /// Every request has the same lengths.
    Fixed { input_tokens: u32, output_tokens: u32 },
}

impl Default for LengthMix {
    fn default() -> Self {
        LengthMix::Buckets { weights: BucketTable::splat(1.0), jitter: 0.0 }
    }
}

/// Poisson arrivals at `rps` over `[start_ms, end_ms)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub start_ms: Millis,
    pub end_ms: Millis,
    pub rps: f64,
    /// Overrides the spec-level mix for this segment.
    #[serde(default)]
    pub mix: Option<LengthMix>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisSpec {
    pub segments: Vec<Segment>,
    #[serde(default)]
    pub mix: LengthMix,
}

impl SynthesisSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = vec![];
        if self.segments.is_empty() {
            errs.push("synthesis needs at least one segment".to_string());
        }
        for (i, s) in self.segments.iter().enumerate() {
            if s.end_ms <= s.start_ms {
                errs.push(format!("segment {i}: end_ms must be after start_ms"));
            }
            if !(s.rps >= 0.0 && s.rps.is_finite()) {
                errs.push(format!("segment {i}: rps must be a finite non-negative number, got {}", s.rps));
            }
            if i > 0 && self.segments[i - 1].end_ms != s.start_ms {
                errs.push(format!(
                    "segment {i}: starts at {} but the previous one ends at {}",
                    s.start_ms,
                    self.segments[i - 1].end_ms
                ));
            }
            if let Some(m) = &s.mix {
                validate_mix(m, &format!("segment {i}"), &mut errs);
            }
        }
        validate_mix(&self.mix, "mix", &mut errs);
        ConfigError::from_list(errs)
    }

    pub fn end_ms(&self) -> Millis {
        self.segments.last().map_or(0, |s| s.end_ms)
    }
}

fn validate_mix(mix: &LengthMix, at: &str, errs: &mut Vec<String>) {
    match mix {
        LengthMix::Buckets { weights, jitter } => {
            if weights.iter().any(|(_, w)| !(w >= 0.0 && w.is_finite())) || weights.iter().all(|(_, w)| w <= 0.0) {
                errs.push(format!("{at}: bucket weights must be non-negative with a positive sum"));
            }
            if !(0.0..=1.0).contains(jitter) {
                errs.push(format!("{at}: jitter must be in [0, 1], got {jitter}"));
            }
        }
        LengthMix::Fixed { input_tokens, output_tokens } => {
            if *input_tokens == 0 || *output_tokens == 0 {
                errs.push(format!("{at}: fixed lengths must be at least 1"));
            }
        }
    }
}

fn draw_length(rng: &mut impl Rng, rep: u32, class_floor: u32, jitter: f64) -> u32 {
    let lo = ((rep as f64 * (1.0 - jitter)).round() as u32).max(class_floor + 1).min(rep);
    rng.random_range(lo..=rep)
}

fn draw_lengths(rng: &mut impl Rng, mix: &LengthMix, picker: Option<&WeightedIndex<f64>>) -> (u32, u32) {
    match mix {
        LengthMix::Fixed { input_tokens, output_tokens } => (*input_tokens, *output_tokens),
        LengthMix::Buckets { jitter, .. } => {
            let b = BucketId::from_index(picker.expect("bucket mix has a picker").sample(rng));
            let spec = b.spec();
            let floor = |bounds: &[u32; 3], i: usize| if i == 0 { 0 } else { bounds[i - 1] };
            let input = draw_length(rng, spec.representative_input, floor(&INPUT_BOUNDARIES, b.input.index()), *jitter);
            let output =
                draw_length(rng, spec.representative_output, floor(&OUTPUT_BOUNDARIES, b.output.index()), *jitter);
            (input, output)
        }
    }
}

fn picker(mix: &LengthMix) -> Option<WeightedIndex<f64>> {
    match mix {
        LengthMix::Buckets { weights, .. } => Some(WeightedIndex::new(weights.0).expect("weights validated")),
        LengthMix::Fixed { .. } => None,
    }
}

/// Generates a trace from rate segments. The spec must be valid.
pub fn synthesize(spec: &SynthesisSpec, rng: &mut impl Rng) -> Vec<TraceRecord> {
    let mut out = vec![];
    for seg in &spec.segments {
        if seg.rps <= 0.0 {
            continue;
        }
        let mix = seg.mix.as_ref().unwrap_or(&spec.mix);
        let pick = picker(mix);
        let gap = Exp::new(seg.rps / 1000.0).expect("positive rate");
        let mut t = seg.start_ms as f64;
        loop {
            t += gap.sample(rng);
            if t >= seg.end_ms as f64 {
                break;
            }
            let (i, o) = draw_lengths(rng, mix, pick.as_ref());
            out.push(TraceRecord::new(t as Millis, i, o));
        }
    }
    out
}
