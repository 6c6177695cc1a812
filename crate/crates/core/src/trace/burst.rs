use serde::{Deserialize, Serialize};

use crate::engine::Millis;
use crate::trace::TraceRecord;

/// Resolution of the instantaneous rate.
pub const SUBWINDOW_MS: Millis = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcessPoint {
    pub factor: f64,
    /// Share of requests arriving while the request rate exceeds
    /// `factor` × its running average.
    pub requests: f64,
    /// Same for tokens against the token-rate running average.
    pub tokens: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BurstReport {
    pub window_ms: Millis,
    pub subwindow_ms: Millis,
    pub subwindows: usize,
    pub requests: usize,
    /// Share of sub-windows whose request rate exceeds the running average.
    pub burst_time_fraction: f64,
    pub mean_burst_duration_s: f64,
    pub excess: Vec<ExcessPoint>,
}

impl BurstReport {
    pub fn excess_at(&self, factor: f64) -> Option<&ExcessPoint> {
        self.excess.iter().find(|p| p.factor == factor)
    }

    /// Token share above the running average, used to size the convertible
    /// decoder pool.
    pub fn burst_ratio(&self) -> f64 {
        self.excess_at(1.0).map_or(0.0, |p| p.tokens)
    }
}

/// Per-sub-window sums of `weight`, aligned to the first arrival.
pub fn subwindow_series(records: &[TraceRecord], weight: impl Fn(&TraceRecord) -> f64) -> Vec<f64> {
    let Some(first) = records.iter().map(|r| r.arrival_ms).min() else {
        return vec![];
    };
    let last = records.iter().map(|r| r.arrival_ms).max().unwrap_or(first);
    let mut series = vec![0.0; ((last - first) / SUBWINDOW_MS) as usize + 1];
    for r in records {
        series[((r.arrival_ms - first) / SUBWINDOW_MS) as usize] += weight(r);
    }
    series
}

/// Trailing mean over up to `len` entries, current one included.
pub fn running_average(series: &[f64], len: usize) -> Vec<f64> {
    let len = len.max(1);
    let mut out = Vec::with_capacity(series.len());
    let mut sum = 0.0;
    for (i, &x) in series.iter().enumerate() {
        sum += x;
        if i >= len {
            sum -= series[i - len];
        }
        out.push(sum / (i + 1).min(len) as f64);
    }
    out
}

fn excess_share(series: &[f64], avg: &[f64], factor: f64) -> f64 {
    let total: f64 = series.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let above: f64 = series.iter().zip(avg).filter(|(x, a)| **x > factor * **a).map(|(x, _)| x).sum();
    above / total
}

/// Sliding-window burstiness of a trace.
///
/// Instantaneous rates are 1 s sub-window counts; the baseline is their
/// trailing mean over `window_ms`. An empty trace yields an all-zero report.
pub fn burstiness(records: &[TraceRecord], window_ms: Millis, factors: &[f64]) -> BurstReport {
    let reqs = subwindow_series(records, |_| 1.0);
    let toks = subwindow_series(records, |r| r.total_tokens() as f64);
    let span = (window_ms / SUBWINDOW_MS).max(1) as usize;
    let req_avg = running_average(&reqs, span);
    let tok_avg = running_average(&toks, span);

    let bursting: Vec<bool> = reqs.iter().zip(&req_avg).map(|(x, a)| x > a).collect();
    let burst_windows = bursting.iter().filter(|&&b| b).count();
    let mut runs = 0usize;
    for (i, &b) in bursting.iter().enumerate() {
        if b && (i == 0 || !bursting[i - 1]) {
            runs += 1;
        }
    }
    let sub_s = SUBWINDOW_MS as f64 / 1000.0;

    BurstReport {
        window_ms,
        subwindow_ms: SUBWINDOW_MS,
        subwindows: reqs.len(),
        requests: records.len(),
        burst_time_fraction: if reqs.is_empty() { 0.0 } else { burst_windows as f64 / reqs.len() as f64 },
        mean_burst_duration_s: if runs == 0 { 0.0 } else { burst_windows as f64 * sub_s / runs as f64 },
        excess: factors
            .iter()
            .map(|&factor| ExcessPoint {
                factor,
                requests: excess_share(&reqs, &req_avg, factor),
                tokens: excess_share(&toks, &tok_avg, factor),
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_rate_has_no_bursts() {
        let recs: Vec<_> = (0..6000u64).map(|i| TraceRecord::new(i * 100, 500, 50)).collect();
        let r = burstiness(&recs, 60_000, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(r.burst_time_fraction, 0.0);
        assert!(r.excess.iter().filter(|p| p.factor > 1.0).all(|p| p.requests == 0.0 && p.tokens == 0.0));
    }

    #[test]
    fn running_average_is_trailing() {
        assert_eq!(running_average(&[2.0, 4.0, 6.0, 8.0], 2), vec![2.0, 3.0, 5.0, 7.0]);
    }

    #[test]
    fn burst_runs_and_durations() {
        // 10 rps with two 2 s spikes to 40 rps
        let mut recs = vec![];
        for s in 0..30u64 {
            let n = if matches!(s, 10 | 11 | 20 | 21) { 40 } else { 10 };
            recs.extend((0..n).map(|k| TraceRecord::new(s * 1000 + k * 1000 / n, 10, 10)));
        }
        let r = burstiness(&recs, 60_000, &[1.0]);
        assert_eq!(r.subwindows, 30);
        assert!((r.burst_time_fraction - 4.0 / 30.0).abs() < 1e-12);
        assert!((r.mean_burst_duration_s - 2.0).abs() < 1e-12);
        assert!((r.burst_ratio() - 160.0 / 420.0).abs() < 1e-12);
    }

    #[test]
    fn empty_trace_is_all_zero() {
        let r = burstiness(&[], 60_000, &[1.0]);
        assert_eq!(r.subwindows, 0);
        assert_eq!(r.excess[0].requests, 0.0);
    }

    proptest! {
        #[test]
        fn excess_nonincreasing_and_shift_invariant(
            arrivals in prop::collection::vec((0u64..120_000, 1u32..5000, 1u32..600), 1..400),
            shift in 0u64..10_000_000,
        ) {
            let mut recs: Vec<_> = arrivals.iter().map(|&(a, i, o)| TraceRecord::new(a, i, o)).collect();
            recs.sort();
            let factors = [1.0, 1.5, 2.0, 3.0, 4.0];
            let r = burstiness(&recs, 60_000, &factors);
            for w in r.excess.windows(2) {
                prop_assert!(w[1].requests <= w[0].requests && w[1].tokens <= w[0].tokens);
            }
            for p in &r.excess {
                prop_assert!((0.0..=1.0).contains(&p.requests) && (0.0..=1.0).contains(&p.tokens));
            }
            let shifted: Vec<_> = recs.iter().map(|r| TraceRecord { arrival_ms: r.arrival_ms + shift, ..*r }).collect();
            prop_assert_eq!(burstiness(&shifted, 60_000, &factors), r);
        }
    }
}
