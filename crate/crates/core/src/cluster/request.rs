use std::fmt;

use crate::bucket::BucketId;
use crate::cluster::InstanceId;
use crate::engine::Millis;

/// Index into the simulation's request table.
pub type RequestId = u64;

/// Where a request currently sits. Exactly one of these at any time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Not yet arrived.
    Future,
    /// In the router's pending queue: no feasible prefill placement yet.
    PendingPrefill,
    /// Assigned to a prefiller (queued or executing).
    Prefilling(InstanceId),
    /// Assigned to a convertible decoder as a chunked-prefill task.
    ConvertiblePrefill(InstanceId),
    /// Prefilled, no eligible decoder existed; waiting in the router.
    AwaitingDecoder,
    /// Waiting in a decoder's admission queue for memory.
    AwaitingAdmission(InstanceId),
    /// Admitted; KV cache in flight to the decoder.
    Transferring(InstanceId),
    /// Resident in a decoder's batch.
    Decoding(InstanceId),
    Completed,
}

/// One step of a request's placement history.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    Prefill(InstanceId),
    ConvertiblePrefill(InstanceId),
    Decode(InstanceId),
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Placement::Prefill(i) => write!(f, "P{}", i.0),
            Placement::ConvertiblePrefill(i) => write!(f, "C{}", i.0),
            Placement::Decode(i) => write!(f, "D{}", i.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Request {
    pub id: RequestId,
    pub arrival_ms: Millis,
    pub input_tokens: u32,
    /// True output length. Policies and the router never read this; only
    /// the decode engine does, to know when a sequence finishes.
    pub output_tokens: u32,
    pub true_bucket: BucketId,
    pub predicted_bucket: BucketId,
    pub prefill_start: Option<Millis>,
    pub prefill_end: Option<Millis>,
    pub first_token_time: Option<Millis>,
    pub completion_time: Option<Millis>,
    pub tokens_generated: u32,
    /// Input tokens already prefilled on a convertible decoder.
    pub prefilled_tokens: u32,
    pub phase: Phase,
    pub placements: Vec<Placement>,
}

impl Request {
    pub fn new(id: RequestId, arrival_ms: Millis, input_tokens: u32, output_tokens: u32) -> Self {
        assert!(input_tokens >= 1 && output_tokens >= 1, "request {id} has an empty side");
        let bucket = BucketId::classify(input_tokens, output_tokens);
        Self {
            id,
            arrival_ms,
            input_tokens,
            output_tokens,
            true_bucket: bucket,
            predicted_bucket: bucket,
            prefill_start: None,
            prefill_end: None,
            first_token_time: None,
            completion_time: None,
            tokens_generated: 0,
            prefilled_tokens: 0,
            phase: Phase::Future,
            placements: Vec::new(),
        }
    }

    /// Token-slots reserved on a decoder for the request's whole lifetime.
    pub fn footprint(&self) -> u64 {
        self.input_tokens as u64 + self.output_tokens as u64
    }

    /// KV token-slots currently resident on the request's decoder.
    pub fn resident_tokens(&self) -> u64 {
        match self.phase {
            Phase::ConvertiblePrefill(_) => self.prefilled_tokens as u64,
            Phase::Decoding(_) => self.input_tokens as u64 + self.tokens_generated as u64,
            _ => 0,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.phase == Phase::Completed
    }

    pub fn placement_string(&self) -> String {
        self.placements.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(">")
    }

    /// Lifecycle timestamps are ordered for every completed request.
    pub fn timestamps_ordered(&self) -> bool {
        let (Some(ps), Some(pe), Some(ft), Some(ct)) =
            (self.prefill_start, self.prefill_end, self.first_token_time, self.completion_time)
        else {
            return !self.is_complete();
        };
        self.arrival_ms <= ps && ps <= pe && pe <= ft && ft <= ct
    }
}
