use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::bucket::{BucketId, BucketTable};
use crate::cluster::RequestId;
use crate::engine::Millis;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct InstanceId(pub u32);

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Prefiller,
    RegularDecoder,
    ConvertibleDecoder,
}

impl Role {
    pub fn is_decoder(self) -> bool {
        !matches!(self, Role::Prefiller)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstanceState {
    Starting,
    Ready,
    /// Accepts no new work; terminates once idle.
    Draining,
    Terminated,
}

/// A decode iteration in progress.
#[derive(Debug, Clone)]
pub struct Iteration {
    pub members: Vec<RequestId>,
    /// Prefill task and the number of its tokens processed this iteration.
    pub prefill: Option<(RequestId, u32)>,
    pub start_exact: f64,
    pub end_exact: f64,
}

/// A simulated prefiller, decoder, or convertible decoder.
#[derive(Debug, Clone)]
pub struct Instance {
    pub id: InstanceId,
    pub role: Role,
    pub state: InstanceState,
    pub gpus: u32,
    pub started_at: Millis,
    pub ready_at: Millis,
    pub terminated_at: Option<Millis>,

    pub kvc_capacity: u64,
    /// Token-slots actually holding KV cache.
    pub kvc_used: u64,
    /// Token-slots promised to admitted requests (≥ `kvc_used`).
    pub kvc_committed: u64,
    /// Held back from routed decode work (convertible decoders only).
    pub reserved_tokens: u64,
    /// Sequences admitted and not yet completed.
    pub admitted: u32,

    // Prefiller state.
    pub prefill_queue: VecDeque<RequestId>,
    pub prefill_active: Option<(RequestId, Millis)>,
    /// Input tokens of assigned prefill work not yet completed.
    pub inflight_prefill_tokens: u64,
    /// Busy time of finished prefills, ms.
    pub prefill_busy_ms: u64,

    // Decoder state.
    pub admission_queue: VecDeque<RequestId>,
    pub decode_batch: BTreeSet<RequestId>,
    pub per_bucket_inflight: BucketTable<u32>,
    pub iteration: Option<Iteration>,
    /// Exact end time of the last iteration. Keeps back-to-back iterations
    /// drift-free even though events fire on integral milliseconds.
    pub cursor_exact: f64,

    // Convertible decoder state. The head task is the active one.
    pub prefill_tasks: VecDeque<RequestId>,
    /// Whether the head task's footprint is committed.
    pub head_task_committed: bool,

    /// (completion time, input + output tokens) per finished request.
    pub completions: Vec<(Millis, u64)>,
    /// (end time, tokens generated) per decode iteration.
    pub generated: Vec<(Millis, u32)>,
    /// Exact duration of every iteration, ms.
    pub iteration_log: Vec<f64>,
    pub record_iterations: bool,
}

impl Instance {
    pub fn new(id: InstanceId, role: Role, gpus: u32, kvc_capacity: u64, now: Millis, ready_at: Millis) -> Self {
        Self {
            id,
            role,
            state: if ready_at <= now { InstanceState::Ready } else { InstanceState::Starting },
            gpus,
            started_at: now,
            ready_at,
            terminated_at: None,
            kvc_capacity: if role.is_decoder() { kvc_capacity } else { 0 },
            kvc_used: 0,
            kvc_committed: 0,
            reserved_tokens: 0,
            admitted: 0,
            prefill_queue: VecDeque::new(),
            prefill_active: None,
            inflight_prefill_tokens: 0,
            prefill_busy_ms: 0,
            admission_queue: VecDeque::new(),
            decode_batch: BTreeSet::new(),
            per_bucket_inflight: BucketTable::splat(0),
            iteration: None,
            cursor_exact: 0.0,
            prefill_tasks: VecDeque::new(),
            head_task_committed: false,
            completions: Vec::new(),
            generated: Vec::new(),
            iteration_log: Vec::new(),
            record_iterations: false,
        }
    }

    pub fn is_ready(&self) -> bool {
        self.state == InstanceState::Ready
    }

    pub fn is_alive(&self) -> bool {
        self.state != InstanceState::Terminated
    }

    /// Counted toward the provisioned total: starting or ready.
    pub fn is_provisioned(&self) -> bool {
        matches!(self.state, InstanceState::Starting | InstanceState::Ready)
    }

    /// Upper bound on committed token-slots for routed decode work.
    pub fn decode_limit(&self) -> u64 {
        self.kvc_capacity.saturating_sub(self.reserved_tokens)
    }

    /// Whether a routed decode request of `footprint` slots fits now.
    pub fn can_admit_decode(&self, footprint: u64, max_batch: u32) -> bool {
        self.admitted < max_batch && self.kvc_committed + footprint <= self.decode_limit()
    }

    /// Whether a redirected prefill task may start; it may use the reserve.
    pub fn can_start_prefill_task(&self, footprint: u64, max_batch: u32) -> bool {
        self.admitted < max_batch && self.kvc_committed + footprint <= self.kvc_capacity
    }

    pub fn commit(&mut self, footprint: u64) {
        self.kvc_committed += footprint;
        self.admitted += 1;
        debug_assert!(self.kvc_committed <= self.kvc_capacity);
    }

    pub fn release(&mut self, footprint: u64, resident: u64) {
        debug_assert!(self.kvc_committed >= footprint && self.kvc_used >= resident);
        self.kvc_committed -= footprint;
        self.kvc_used -= resident;
        self.admitted -= 1;
    }

    /// Actual KV occupancy as a fraction of capacity.
    pub fn memory_utilization(&self) -> f64 {
        if self.kvc_capacity == 0 {
            0.0
        } else {
            self.kvc_used as f64 / self.kvc_capacity as f64
        }
    }

    /// Committed slots relative to the non-reserved region; used for the
    /// convertible-decoder routing exclusion.
    pub fn routing_utilization(&self) -> f64 {
        let limit = self.decode_limit();
        if limit == 0 {
            1.0
        } else {
            self.kvc_committed as f64 / limit as f64
        }
    }

    /// Remaining prefill tokens across all tasks on a convertible decoder.
    pub fn convertible_inflight_tokens(&self, remaining: impl Fn(RequestId) -> u64) -> u64 {
        self.prefill_tasks.iter().map(|&r| remaining(r)).sum()
    }

    pub fn note_decode_assigned(&mut self, bucket: BucketId) {
        self.per_bucket_inflight[bucket] += 1;
    }

    pub fn note_decode_finished(&mut self, bucket: BucketId) {
        debug_assert!(self.per_bucket_inflight[bucket] > 0);
        self.per_bucket_inflight[bucket] -= 1;
    }

    pub fn has_prefill_work(&self) -> bool {
        self.prefill_active.is_some() || !self.prefill_queue.is_empty()
    }

    /// No work of any kind assigned.
    pub fn is_idle(&self) -> bool {
        !self.has_prefill_work()
            && self.admission_queue.is_empty()
            && self.decode_batch.is_empty()
            && self.prefill_tasks.is_empty()
            && self.iteration.is_none()
            && self.admitted == 0
    }

    /// Prefill busy time up to `now`, including the running prefill.
    pub fn prefill_busy_until(&self, now: Millis) -> u64 {
        self.prefill_busy_ms + self.prefill_active.map_or(0, |(_, start)| now.saturating_sub(start))
    }

    /// Alive time inside `[0, horizon]`.
    pub fn lifetime_within(&self, horizon: Millis) -> Millis {
        let end = self.terminated_at.unwrap_or(horizon).min(horizon);
        end.saturating_sub(self.started_at.min(horizon))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decoder(cap: u64) -> Instance {
        Instance::new(InstanceId(0), Role::ConvertibleDecoder, 1, cap, 0, 0)
    }

    #[test]
    fn starting_until_ready() {
        let i = Instance::new(InstanceId(1), Role::Prefiller, 1, 0, 10_000, 15_000);
        assert_eq!(i.state, InstanceState::Starting);
        assert_eq!(i.ready_at - i.started_at, 5_000);
        let j = Instance::new(InstanceId(2), Role::Prefiller, 1, 0, 10_000, 10_000);
        assert!(j.is_ready());
    }

    #[test]
    fn reserve_blocks_routed_decode_only() {
        let mut d = decoder(1000);
        d.reserved_tokens = 300;
        assert!(d.can_admit_decode(700, 10));
        assert!(!d.can_admit_decode(701, 10));
        assert!(d.can_start_prefill_task(1000, 10));
        d.commit(600);
        assert!(!d.can_admit_decode(200, 10));
        assert!(d.can_start_prefill_task(400, 10));
        assert!((d.routing_utilization() - 600.0 / 700.0).abs() < 1e-12);
    }

    #[test]
    fn batch_cap_blocks_admission() {
        let mut d = decoder(1000);
        d.commit(1);
        assert!(!d.can_admit_decode(1, 1));
    }

    #[test]
    fn lifetime_clips_to_horizon() {
        let mut i = Instance::new(InstanceId(0), Role::Prefiller, 1, 0, 100, 100);
        assert_eq!(i.lifetime_within(1000), 900);
        i.terminated_at = Some(400);
        assert_eq!(i.lifetime_within(1000), 300);
    }
}
