use serde::{Deserialize, Serialize};

use crate::engine::Millis;
use crate::error::ConfigError;

/// Per-instance performance model.
///
/// Prefill runs at a fixed token rate with batch size one. Decode iterations
/// cost `c0 + c1·B` milliseconds for a batch of `B` sequences. On a
/// convertible decoder a mixed iteration additionally pays `c1·p/κ` for `p`
/// prefill tokens, where κ is the number of prefill tokens that cost as much
/// as one decode sequence-step.
///
/// Memory is counted in token-slots: one slot per token of KV cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfModel {
    /// Prefill velocity, tokens/s.
    pub prefill_velocity: f64,
    /// KV transfer velocity, tokens/s. `None` disables network modeling.
    pub network_velocity: Option<f64>,
    pub decode_iter_base_ms: f64,
    pub decode_iter_per_seq_ms: f64,
    pub kvc_capacity_tokens: u64,
    pub max_decode_batch: u32,
    /// κ: prefill tokens per decode-sequence-equivalent.
    pub prefill_seq_equiv: f64,
    pub gpus_per_instance: u32,
}

pub const DEFAULT_PREFILL_SEQ_EQUIV: f64 = 8.0;

impl PerfModel {
    /// Prefill time for `input_tokens` on a dedicated prefiller.
    pub fn prefill_duration_ms(&self, input_tokens: u32) -> Millis {
        ceil_ms(1000.0 * input_tokens as f64 / self.prefill_velocity)
    }

    /// KV transfer time from prefiller to decoder.
    pub fn transfer_duration_ms(&self, input_tokens: u32) -> Millis {
        match self.network_velocity {
            None => 0,
            Some(v) if v.is_infinite() => 0,
            Some(v) => ceil_ms(1000.0 * input_tokens as f64 / v),
        }
    }

    /// Pure decode iteration time for a batch of `batch` sequences.
    pub fn decode_iteration_ms(&self, batch: u32) -> f64 {
        self.decode_iter_base_ms + self.decode_iter_per_seq_ms * batch as f64
    }

    /// Iteration time with `prefill_tokens` of chunked prefill folded in.
    pub fn mixed_iteration_ms(&self, batch: u32, prefill_tokens: u32) -> f64 {
        self.decode_iteration_ms(batch) + self.decode_iter_per_seq_ms * prefill_tokens as f64 / self.prefill_seq_equiv
    }

    /// Smaller of prefill and network velocity.
    pub fn prefill_bottleneck_velocity(&self) -> f64 {
        match self.network_velocity {
            Some(v) => self.prefill_velocity.min(v),
            None => self.prefill_velocity,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = vec![];
        if !(self.prefill_velocity > 0.0 && self.prefill_velocity.is_finite()) {
            errs.push(format!("prefill velocity must be positive, got {}", self.prefill_velocity));
        }
        if let Some(v) = self.network_velocity {
            if !(v > 0.0) {
                errs.push(format!("network velocity must be positive, got {v}"));
            }
        }
        if !(self.decode_iter_base_ms >= 0.0) {
            errs.push(format!("c0 must be >= 0, got {}", self.decode_iter_base_ms));
        }
        if !(self.decode_iter_per_seq_ms >= 0.0) {
            errs.push(format!("c1 must be >= 0, got {}", self.decode_iter_per_seq_ms));
        }
        if self.decode_iter_base_ms + self.decode_iter_per_seq_ms <= 0.0 {
            errs.push("decode iteration time must be positive".into());
        }
        if self.kvc_capacity_tokens == 0 {
            errs.push("kvc capacity must be positive".into());
        }
        if self.max_decode_batch == 0 {
            errs.push("max decode batch must be positive".into());
        }
        if !(self.prefill_seq_equiv > 0.0) {
            errs.push(format!("prefill_seq_equiv must be positive, got {}", self.prefill_seq_equiv));
        }
        if self.gpus_per_instance == 0 {
            errs.push("gpus per instance must be positive".into());
        }
        ConfigError::from_list(errs)
    }
}

/// Chunked-prefill parameters for convertible decoders.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvertibleConfig {
    /// Cap on prefill tokens plus decode batch size per iteration.
    pub chunk_size: u32,
    pub expected_batch_size: u32,
    /// Token-slots held back from routed decode work.
    pub reserved_tokens: u64,
}

impl ConvertibleConfig {
    /// Prefill tokens available in an iteration with `decode_batch` sequences.
    pub fn prefill_headroom(&self, decode_batch: u32) -> u32 {
        self.chunk_size.saturating_sub(decode_batch)
    }
}

/// Integral milliseconds, rounding up. A tiny tolerance keeps exact
/// quotients such as 100.000000001 from rounding to 101.
pub(crate) fn ceil_ms(x: f64) -> Millis {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r.max(0.0) as Millis
    } else {
        x.ceil().max(0.0) as Millis
    }
}

#[cfg(test)]
pub(crate) fn test_perf() -> PerfModel {
    PerfModel {
        prefill_velocity: 14_000.0,
        network_velocity: Some(819_200.0),
        decode_iter_base_ms: 20.0,
        decode_iter_per_seq_ms: 0.1,
        kvc_capacity_tokens: 100_000,
        max_decode_batch: 256,
        prefill_seq_equiv: DEFAULT_PREFILL_SEQ_EQUIV,
        gpus_per_instance: 1,
    }
}
