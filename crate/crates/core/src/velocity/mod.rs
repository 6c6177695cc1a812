//! Token Velocity: measurement, convertible-decoder derivations, and the
//! offline profiler.
//!
//! A stage's velocity is the maximum rate, in tokens per second, at which an
//! instance can release tokens under its current resources. Prefill and
//! network velocities are constants of the hardware/model pair; decode
//! velocity depends on request shape and is profiled per bucket.

mod profile;
mod profiler;

#[cfg(test)]
pub(crate) use profile::test_profile;
pub use profile::VelocityProfile;
pub use profiler::{
    decode_sweep, derive_convertible, prefill_sweep, profile_decode_velocity, profile_prefill_velocity,
    profile_velocities, ConvertibleDerivation, ProfileTargets, ProfilerSettings, SweepPoint,
};

use crate::cluster::PerfModel;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum VelocityError {
    #[error("decode velocity is undefined: {0}")]
    UndefinedMeasurement(&'static str),
    #[error("chunk size {chunk} must exceed the decode batch size {batch}")]
    ChunkNotAboveBatch { chunk: u32, batch: u32 },
    #[error("TPOT SLO must be positive, got {0}")]
    NonPositiveSlo(f64),
    #[error("no feasible chunk: TPOT SLO {tpot_slo_ms} ms is not above the decode iteration time {decode_ms} ms")]
    InfeasibleChunk { tpot_slo_ms: f64, decode_ms: f64 },
    #[error("bucket {0} has traffic but no profiled decode velocity")]
    MissingBucketVelocity(String),
}

/// Decode velocity from completed requests: total tokens over measured TPOT.
///
/// `completed_tokens` holds each request's token count; `tpot_s` is the
/// measured time per output token in seconds.
pub fn measured_decode_velocity(completed_tokens: &[u64], tpot_s: f64) -> Result<f64, VelocityError> {
    if completed_tokens.is_empty() {
        return Err(VelocityError::UndefinedMeasurement("no completed requests"));
    }
    if !(tpot_s > 0.0) {
        return Err(VelocityError::UndefinedMeasurement("TPOT must be positive"));
    }
    let total: u64 = completed_tokens.iter().sum();
    Ok(total as f64 / tpot_s)
}

/// Prefill velocity of a convertible decoder: the chunk headroom left by the
/// decode batch, released once per TPOT SLO.
pub fn convertible_prefill_velocity(chunk_size: u32, batch_size: u32, tpot_slo_s: f64) -> Result<f64, VelocityError> {
    if chunk_size <= batch_size {
        return Err(VelocityError::ChunkNotAboveBatch { chunk: chunk_size, batch: batch_size });
    }
    if !(tpot_slo_s > 0.0) {
        return Err(VelocityError::NonPositiveSlo(tpot_slo_s));
    }
    Ok((chunk_size - batch_size) as f64 / tpot_slo_s)
}

/// Token-slots a convertible decoder holds back for prefill work: what it
/// can prefill within one TTFT SLO.
pub fn reserved_memory(v_dp: f64, mem_per_token: f64, ttft_slo_s: f64) -> u64 {
    let slots = v_dp * mem_per_token * ttft_slo_s;
    if slots <= 0.0 {
        0
    } else {
        slots.round() as u64
    }
}

const SLO_EPS_MS: f64 = 1e-9;

/// Largest chunk size whose mixed iteration at `expected_batch` sequences
/// stays within `tpot_slo_ms`.
///
/// Profiles the configured iteration model the way one would profile an
/// engine: double the prefill share until the SLO breaks, then binary search
/// the last feasible size. The result never exceeds the KV capacity.
pub fn select_chunk_size(perf: &PerfModel, expected_batch: u32, tpot_slo_ms: f64) -> Result<u32, VelocityError> {
    let decode_ms = perf.decode_iteration_ms(expected_batch);
    if tpot_slo_ms <= perf.decode_iter_base_ms || decode_ms > tpot_slo_ms + SLO_EPS_MS {
        return Err(VelocityError::InfeasibleChunk { tpot_slo_ms, decode_ms });
    }
    let fits = |headroom: u32| perf.mixed_iteration_ms(expected_batch, headroom) <= tpot_slo_ms + SLO_EPS_MS;
    let cap = u32::try_from(perf.kvc_capacity_tokens).unwrap_or(u32::MAX).max(1);
    if !fits(1) {
        return Ok(expected_batch);
    }
    let mut good = 1u32;
    let mut bad = None;
    while good < cap {
        let probe = good.saturating_mul(2).min(cap);
        if fits(probe) {
            good = probe;
        } else {
            bad = Some(probe);
            break;
        }
    }
    if let Some(mut bad) = bad {
        while bad - good > 1 {
            let mid = good + (bad - good) / 2;
            if fits(mid) {
                good = mid;
            } else {
                bad = mid;
            }
        }
    }
    Ok(expected_batch.saturating_add(good))
}

/// Average decode batch: capacity left after the reserve divided by the
/// mean per-request footprint.
pub fn expected_batch_size(kvc_capacity: u64, reserved: u64, mean_tokens_per_request: f64, max_batch: u32) -> u32 {
    if !(mean_tokens_per_request > 0.0) {
        return max_batch;
    }
    let b = (kvc_capacity.saturating_sub(reserved) as f64 / mean_tokens_per_request).floor();
    (b as u32).min(max_batch)
}
