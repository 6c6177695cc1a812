//! Gateway and load balancer.
//!
//! The gateway counts arrivals and predicts each request's output bucket.
//! Prefill placement follows the two-round feasibility scan (regular
//! prefillers first, then convertible decoders, otherwise the pending
//! queue). Decode placement picks the decoder with the fewest in-flight
//! requests of the predicted bucket.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bucket::{input_class, BucketId, BucketTable, LengthClass};
use crate::cluster::{InstanceId, RequestId};
use crate::engine::Millis;
use crate::error::ConfigError;

fn d250() -> Millis {
    250
}
fn d400() -> Millis {
    400
}
fn d2000() -> Millis {
    2000
}
fn d100() -> f64 {
    100.0
}

/// Latency targets. TTFT depends on the input class; TPOT is constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SloPolicy {
    #[serde(default = "d250")]
    pub ttft_short_ms: Millis,
    #[serde(default = "d400")]
    pub ttft_medium_ms: Millis,
    #[serde(default = "d2000")]
    pub ttft_long_ms: Millis,
    #[serde(default = "d100")]
    pub tpot_ms: f64,
}

impl Default for SloPolicy {
    fn default() -> Self {
        Self { ttft_short_ms: 250, ttft_medium_ms: 400, ttft_long_ms: 2000, tpot_ms: 100.0 }
    }
}

impl SloPolicy {
    pub fn ttft_slo_ms(&self, input_tokens: u32) -> Millis {
        match input_class(input_tokens) {
            LengthClass::Short => self.ttft_short_ms,
            LengthClass::Medium => self.ttft_medium_ms,
            LengthClass::Long => self.ttft_long_ms,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = vec![];
        if !(self.ttft_short_ms <= self.ttft_medium_ms && self.ttft_medium_ms <= self.ttft_long_ms) {
            errs.push("TTFT SLOs must be nondecreasing from short to long inputs".to_string());
        }
        if self.ttft_short_ms == 0 {
            errs.push("TTFT SLOs must be positive".to_string());
        }
        if !(self.tpot_ms > 0.0 && self.tpot_ms.is_finite()) {
            errs.push(format!("TPOT SLO must be positive, got {}", self.tpot_ms));
        }
        ConfigError::from_list(errs)
    }
}

/// Stochastic stand-in for a content-based output-length classifier.
///
/// The input class is observed exactly; with probability `1 − accuracy`
/// the output class is replaced by one of the other two, uniformly. Two
/// draws are taken per request whatever the outcome, so the stream stays
/// aligned across accuracy settings.
#[derive(Debug, Clone)]
pub struct OutputPredictor {
    accuracy: f64,
    rng: ChaCha8Rng,
}

impl OutputPredictor {
    pub fn new(accuracy: f64, rng: ChaCha8Rng) -> Self {
        assert!((0.0..=1.0).contains(&accuracy), "accuracy must be in [0, 1]");
        Self { accuracy, rng }
    }

    pub fn predict(&mut self, truth: BucketId) -> BucketId {
        let u: f64 = self.rng.random();
        let pick = self.rng.random_range(0..2usize);
        if u < self.accuracy {
            return truth;
        }
        let others: Vec<_> = LengthClass::ALL.into_iter().filter(|&c| c != truth.output).collect();
        BucketId::new(truth.input, others[pick])
    }
}

/// Arrival counters for one traffic window.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrafficCounts {
    pub requests: u64,
    pub input_tokens: u64,
    /// Input plus representative predicted-output tokens, per predicted bucket.
    pub predicted_tokens: BucketTable<u64>,
}

impl TrafficCounts {
    /// Counts one arrival.
    pub fn record_arrival(&mut self, input_tokens: u32, predicted: BucketId) {
        self.requests += 1;
        self.input_tokens += input_tokens as u64;
        self.predicted_tokens[predicted] += input_tokens as u64 + predicted.spec().representative_output as u64;
    }

    /// Input-token rate λ over a window of `window_ms`.
    pub fn lambda(&self, window_ms: Millis) -> f64 {
        per_second(self.input_tokens as f64, window_ms)
    }

    /// Per-bucket rate λ' of input plus predicted output tokens.
    pub fn lambda_prime(&self, window_ms: Millis) -> BucketTable<f64> {
        BucketTable(self.predicted_tokens.0.map(|t| per_second(t as f64, window_ms)))
    }

    pub fn request_rate(&self, window_ms: Millis) -> f64 {
        per_second(self.requests as f64, window_ms)
    }
}

fn per_second(x: f64, window_ms: Millis) -> f64 {
    if window_ms == 0 {
        0.0
    } else {
        x * 1000.0 / window_ms as f64
    }
}

/// How the prefill feasibility test treats the request's own cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeasibilityMode {
    /// Queueing delay plus the request's own prefill time must fit the SLO.
    #[default]
    Strict,
    /// Only the queueing delay from in-flight tokens is checked.
    Verbatim,
}

/// A ready prefiller as seen by the router.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrefillerView {
    pub id: InstanceId,
    pub inflight_tokens: u64,
    /// Exact time until its queue drains, ms.
    pub backlog_ms: f64,
}

/// A ready convertible decoder as seen by the router.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvertibleView {
    pub id: InstanceId,
    /// Prefill tokens still to process across its queued tasks.
    pub inflight_tokens: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrefillRequest {
    pub input_tokens: u32,
    pub ttft_slo_ms: Millis,
    /// Own prefill time on a regular prefiller, ms.
    pub prefill_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrefillRouting {
    pub mode: FeasibilityMode,
    pub prefill_velocity: f64,
    /// V_D^{P'}; zero disables round two.
    pub convertible_velocity: f64,
    /// One iteration the task may have to wait for before it is picked up.
    pub convertible_alignment_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrefillPlacement {
    Prefiller(InstanceId),
    Convertible(InstanceId),
    Enqueue,
}

/// Two-round prefill placement. Candidates are scanned in the order given,
/// which callers keep as ascending instance id.
pub fn route_prefill(
    req: &PrefillRequest,
    prefillers: &[PrefillerView],
    convertibles: &[ConvertibleView],
    cfg: &PrefillRouting,
) -> PrefillPlacement {
    let slo = req.ttft_slo_ms as f64;
    for p in prefillers {
        let wait = match cfg.mode {
            FeasibilityMode::Verbatim => 1000.0 * p.inflight_tokens as f64 / cfg.prefill_velocity,
            FeasibilityMode::Strict => p.backlog_ms + req.prefill_ms,
        };
        if wait <= slo {
            return PrefillPlacement::Prefiller(p.id);
        }
    }
    if cfg.convertible_velocity > 0.0 {
        for c in convertibles {
            let wait = match cfg.mode {
                FeasibilityMode::Verbatim => 1000.0 * c.inflight_tokens as f64 / cfg.convertible_velocity,
                FeasibilityMode::Strict => {
                    1000.0 * (c.inflight_tokens + req.input_tokens as u64) as f64 / cfg.convertible_velocity
                        + cfg.convertible_alignment_ms
                }
            };
            if wait <= slo {
                return PrefillPlacement::Convertible(c.id);
            }
        }
    }
    PrefillPlacement::Enqueue
}

/// A ready decoder as seen by the router.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoderView {
    pub id: InstanceId,
    pub convertible: bool,
    /// Committed share of the non-reserved KV capacity.
    pub utilization: f64,
    pub same_bucket_inflight: u32,
}

/// Least-loaded decoder for the request's bucket. Convertible decoders above
/// `exclusion_threshold` are skipped; ties go to the lowest id.
pub fn route_decode(decoders: &[DecoderView], exclusion_threshold: f64) -> Option<InstanceId> {
    decoders
        .iter()
        .filter(|d| !(d.convertible && d.utilization > exclusion_threshold))
        .min_by_key(|d| (d.same_bucket_inflight, d.id))
        .map(|d| d.id)
}

/// Prefill tokens a convertible decoder processes this iteration: only the
/// chunk headroom left after the whole decode batch.
pub fn convertible_prefill_share(chunk_size: u32, decode_batch: u32, remaining: u32) -> u32 {
    chunk_size.saturating_sub(decode_batch).min(remaining)
}

/// FIFO of requests waiting for a feasible prefill placement.
#[derive(Debug, Clone, Default)]
pub struct PendingQueue {
    queue: VecDeque<RequestId>,
}

impl PendingQueue {
    pub fn push(&mut self, r: RequestId) {
        self.queue.push_back(r);
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn contains(&self, r: RequestId) -> bool {
        self.queue.contains(&r)
    }

    pub fn iter(&self) -> impl Iterator<Item = RequestId> + '_ {
        self.queue.iter().copied()
    }

    /// Offers each queued request to `place` in FIFO order; placed requests
    /// leave the queue. Returns how many were placed.
    pub fn reevaluate(&mut self, mut place: impl FnMut(RequestId) -> bool) -> usize {
        let before = self.queue.len();
        let mut kept = VecDeque::with_capacity(before);
        while let Some(r) = self.queue.pop_front() {
            if !place(r) {
                kept.push_back(r);
            }
        }
        self.queue = kept;
        before - self.queue.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{RngStreams, Stream};

    #[test]
    fn ttft_slo_by_class() {
        let s = SloPolicy::default();
        assert_eq!(s.ttft_slo_ms(200), 250);
        assert_eq!(s.ttft_slo_ms(256), 250);
        assert_eq!(s.ttft_slo_ms(500), 400);
        assert_eq!(s.ttft_slo_ms(8192), 2000);
        assert_eq!(s.ttft_slo_ms(20_000), 2000);
    }

    fn predictor(acc: f64, seed: u64) -> OutputPredictor {
        OutputPredictor::new(acc, RngStreams::new(seed).stream(Stream::Predictor))
    }

    #[test]
    fn perfect_and_adversarial_predictors() {
        let (mut good, mut bad) = (predictor(1.0, 1), predictor(0.0, 1));
        for b in BucketId::all().cycle().take(900) {
            assert_eq!(good.predict(b), b);
            let p = bad.predict(b);
            assert_ne!(p, b);
            assert_eq!(p.input, b.input);
        }
    }

    #[test]
    fn empirical_accuracy() {
        let mut p = predictor(0.85, 7);
        let truth = BucketId::from_index(4);
        let hits = (0..10_000).filter(|_| p.predict(truth) == truth).count();
        assert!((hits as f64 / 10_000.0 - 0.85).abs() < 0.02, "{hits}");
    }

    #[test]
    fn gateway_rates() {
        let ss: BucketId = "S-S".parse().unwrap();
        let mut w = TrafficCounts::default();
        assert_eq!(w.lambda(1000), 0.0);
        w.record_arrival(256, ss);
        assert_eq!(w.lambda(1000), 256.0);
        assert_eq!(w.lambda_prime(1000)[ss], 356.0);
        w.record_arrival(256, ss);
        assert_eq!(w.lambda(1000), 512.0);
        assert_eq!(w.lambda_prime(1000)[ss], 712.0);
        assert_eq!(w.request_rate(1000), 2.0);
    }

    const VERBATIM: PrefillRouting = PrefillRouting {
        mode: FeasibilityMode::Verbatim,
        prefill_velocity: 1000.0,
        convertible_velocity: 4000.0,
        convertible_alignment_ms: 0.0,
    };

    fn req(input: u32, slo: Millis) -> PrefillRequest {
        PrefillRequest { input_tokens: input, ttft_slo_ms: slo, prefill_ms: input as f64 }
    }

    #[test]
    fn idle_prefiller_takes_request() {
        let p = [PrefillerView { id: InstanceId(0), inflight_tokens: 0, backlog_ms: 0.0 }];
        assert_eq!(route_prefill(&req(100, 250), &p, &[], &VERBATIM), PrefillPlacement::Prefiller(InstanceId(0)));
    }

    #[test]
    fn busy_prefiller_overflows_to_convertible() {
        let p = [PrefillerView { id: InstanceId(0), inflight_tokens: 10_000, backlog_ms: 10_000.0 }];
        let c = [ConvertibleView { id: InstanceId(1), inflight_tokens: 0 }];
        assert_eq!(route_prefill(&req(5000, 2000), &p, &c, &VERBATIM), PrefillPlacement::Convertible(InstanceId(1)));
        let c_busy = [ConvertibleView { id: InstanceId(1), inflight_tokens: 10_000 }];
        assert_eq!(route_prefill(&req(5000, 2000), &p, &c_busy, &VERBATIM), PrefillPlacement::Enqueue);
    }

    #[test]
    fn strict_mode_counts_own_cost() {
        let p = [PrefillerView { id: InstanceId(0), inflight_tokens: 200, backlog_ms: 200.0 }];
        let strict = PrefillRouting { mode: FeasibilityMode::Strict, ..VERBATIM };
        // 200 ms of backlog passes verbatim but not with 100 ms of own work on a 250 ms SLO
        assert_eq!(route_prefill(&req(100, 250), &p, &[], &VERBATIM), PrefillPlacement::Prefiller(InstanceId(0)));
        assert_eq!(route_prefill(&req(100, 250), &p, &[], &strict), PrefillPlacement::Enqueue);
        assert_eq!(route_prefill(&req(50, 250), &p, &[], &strict), PrefillPlacement::Prefiller(InstanceId(0)));
    }

    #[test]
    fn first_feasible_in_id_order() {
        let p = [
            PrefillerView { id: InstanceId(2), inflight_tokens: 100, backlog_ms: 100.0 },
            PrefillerView { id: InstanceId(5), inflight_tokens: 0, backlog_ms: 0.0 },
        ];
        assert_eq!(route_prefill(&req(10, 250), &p, &[], &VERBATIM), PrefillPlacement::Prefiller(InstanceId(2)));
    }

    fn dv(id: u32, convertible: bool, utilization: f64, n: u32) -> DecoderView {
        DecoderView { id: InstanceId(id), convertible, utilization, same_bucket_inflight: n }
    }

    #[test]
    fn decode_argmin_exclusion_and_ties() {
        assert_eq!(
            route_decode(&[dv(0, false, 0.0, 2), dv(1, false, 0.0, 0), dv(2, false, 0.0, 1)], 0.9),
            Some(InstanceId(1))
        );
        assert_eq!(route_decode(&[dv(0, false, 0.5, 3), dv(1, true, 0.95, 0)], 0.9), Some(InstanceId(0)));
        assert_eq!(
            route_decode(&[dv(3, false, 0.0, 1), dv(1, false, 0.0, 1), dv(2, false, 0.0, 1)], 0.9),
            Some(InstanceId(1))
        );
        assert_eq!(route_decode(&[dv(1, true, 0.95, 0)], 0.9), None);
        assert_eq!(route_decode(&[], 0.9), None);
    }

    #[test]
    fn decode_balance_within_one() {
        let mut counts = [0u32; 3];
        for _ in 0..100 {
            let views: Vec<_> = (0..3).map(|i| dv(i, false, 0.0, counts[i as usize])).collect();
            let id = route_decode(&views, 0.9).unwrap();
            counts[id.0 as usize] += 1;
            assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn convertible_headroom() {
        assert_eq!(convertible_prefill_share(512, 512, 1000), 0);
        assert_eq!(convertible_prefill_share(512, 0, 1000), 512);
        assert_eq!(convertible_prefill_share(512, 112, 1000), 400);
        assert_eq!(convertible_prefill_share(512, 112, 1024 - 800), 224);
        assert_eq!(convertible_prefill_share(512, 112, 0), 0);
    }

    #[test]
    fn pending_queue_is_fifo() {
        let mut q = PendingQueue::default();
        for r in [3, 1, 2] {
            q.push(r);
        }
        let mut order = vec![];
        let placed = q.reevaluate(|r| {
            order.push(r);
            r != 1
        });
        assert_eq!(order, vec![3, 1, 2]);
        assert_eq!(placed, 2);
        assert_eq!(q.iter().collect::<Vec<_>>(), vec![1]);
        assert_eq!(q.reevaluate(|_| false), 0);
    }
}
