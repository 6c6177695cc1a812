//! Offline profiler: drives a private simulator at increasing request rates
//! until an instance's output rate saturates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bucket::{BucketId, BucketSpec, BucketTable};
use crate::cluster::{PerfModel, Role};
use crate::engine::Millis;
use crate::sim::{SimConfig, Simulation};
use crate::trace::TraceRecord;

use super::{
    convertible_prefill_velocity, expected_batch_size, reserved_memory, select_chunk_size, VelocityError,
    VelocityProfile,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfilerSettings {
    pub start_rps: f64,
    pub growth: f64,
    /// Relative gain below which a step counts as saturated.
    pub min_gain: f64,
    /// Consecutive saturated steps before the sweep stops.
    pub patience: u32,
    pub max_steps: u32,
    pub warmup_ms: Millis,
    pub measure_ms: Millis,
}

impl Default for ProfilerSettings {
    fn default() -> Self {
        Self {
            start_rps: 1.0,
            growth: 1.25,
            min_gain: 0.02,
            patience: 2,
            max_steps: 60,
            warmup_ms: 30_000,
            measure_ms: 120_000,
        }
    }
}

/// One rung of a rate ladder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub offered_rps: f64,
    pub tokens_per_s: f64,
}

/// SLOs and traffic shape the convertible-decoder sizing is solved for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileTargets {
    pub tpot_slo_ms: f64,
    pub ttft_reserve_ms: f64,
    pub mean_tokens_per_request: f64,
}

impl Default for ProfileTargets {
    fn default() -> Self {
        let mean = BucketId::all().map(|b| b.spec().representative_tokens() as f64).sum::<f64>() / 9.0;
        Self { tpot_slo_ms: 100.0, ttft_reserve_ms: 250.0, mean_tokens_per_request: mean }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvertibleDerivation {
    pub expected_batch_size: u32,
    pub chunk_size: u32,
    pub prefill_velocity: f64,
    pub reserved_tokens: u64,
}

/// Batch size, chunk size, convertible prefill velocity, and reserve.
///
/// The batch depends on the reserve and the reserve on the batch; one
/// fixed-point pass from a zero reserve settles both.
pub fn derive_convertible(perf: &PerfModel, targets: &ProfileTargets) -> Result<ConvertibleDerivation, VelocityError> {
    let tpot_s = targets.tpot_slo_ms / 1000.0;
    let ttft_s = targets.ttft_reserve_ms / 1000.0;
    let solve = |reserve: u64| -> Result<ConvertibleDerivation, VelocityError> {
        let batch = expected_batch_size(
            perf.kvc_capacity_tokens,
            reserve,
            targets.mean_tokens_per_request,
            perf.max_decode_batch,
        );
        let chunk = select_chunk_size(perf, batch, targets.tpot_slo_ms)?;
        let v = convertible_prefill_velocity(chunk, batch, tpot_s)?;
        Ok(ConvertibleDerivation {
            expected_batch_size: batch,
            chunk_size: chunk,
            prefill_velocity: v,
            reserved_tokens: reserved_memory(v, 1.0, ttft_s),
        })
    };
    let first = solve(0)?;
    solve(first.reserved_tokens)
}

fn harness_profile(perf: &PerfModel) -> VelocityProfile {
    let (chunk, batch) = (101, 100);
    let tpot_slo_ms = 100.0;
    let ttft_reserve_ms = 250.0;
    let v = convertible_prefill_velocity(chunk, batch, tpot_slo_ms / 1000.0).expect("chunk above batch");
    VelocityProfile {
        v_p: perf.prefill_velocity,
        v_n: perf.network_velocity,
        v_d_per_bucket: BucketTable::splat(1.0),
        chunk_size: chunk,
        expected_batch_size: batch,
        reserved_tokens: reserved_memory(v, 1.0, ttft_reserve_ms / 1000.0),
        c0_ms: perf.decode_iter_base_ms,
        c1_ms: perf.decode_iter_per_seq_ms,
        kvc_capacity_tokens: perf.kvc_capacity_tokens,
        gpus_per_instance: perf.gpus_per_instance,
        max_decode_batch: perf.max_decode_batch,
        prefill_seq_equiv: perf.prefill_seq_equiv,
        tpot_slo_ms,
        ttft_reserve_ms,
    }
}

fn evenly_spaced(rps: f64, horizon: Millis, input: u32, output: u32) -> Vec<TraceRecord> {
    let n = (rps * horizon as f64 / 1000.0).floor() as u64;
    (0..n).map(|i| TraceRecord::new((i as f64 * 1000.0 / rps) as Millis, input, output)).collect()
}

/// Tokens per second released by events `(time, count)` inside the window.
fn windowed_rate(events: impl Iterator<Item = (Millis, u64)>, from: Millis, to: Millis) -> f64 {
    let total: u64 = events.filter(|&(t, _)| t > from && t <= to).map(|(_, n)| n).sum();
    total as f64 * 1000.0 / (to - from) as f64
}

fn measure(perf: &PerfModel, settings: &ProfilerSettings, rps: f64, input: u32, output: u32, role: Role) -> f64 {
    let horizon = settings.warmup_ms + settings.measure_ms;
    let mut cfg = SimConfig::new(harness_profile(perf), horizon);
    cfg.label = "profiler".into();
    cfg.scaling_enabled = false;
    match role {
        Role::Prefiller => {
            cfg.initial_prefillers = 1;
            cfg.initial_decoders = 64;
            cfg.profile.kvc_capacity_tokens = u64::MAX / 4;
            cfg.profile.max_decode_batch = u32::MAX;
            // a single prefiller must accept its whole backlog
            cfg.slo.ttft_short_ms = u64::MAX / 4;
            cfg.slo.ttft_medium_ms = u64::MAX / 4;
            cfg.slo.ttft_long_ms = u64::MAX / 4;
        }
        _ => {
            let prefill_s = input as f64 / perf.prefill_velocity;
            cfg.initial_prefillers = (rps * prefill_s * 2.0).ceil() as u32 + 1;
            cfg.initial_decoders = 1;
            cfg.profile.v_n = None;
        }
    }
    let trace = evenly_spaced(rps, horizon, input, output);
    let mut sim = Simulation::new(cfg, &trace).expect("harness config is valid");
    sim.run();
    let (from, to) = (settings.warmup_ms, horizon);
    match role {
        Role::Prefiller => windowed_rate(
            sim.instances().iter().filter(|i| i.role == Role::Prefiller).flat_map(|i| i.completions.iter().copied()),
            from,
            to,
        ),
        // Completions arrive in waves as long as a request's lifetime, so
        // count generated tokens per iteration and scale each output token
        // by the request's full footprint.
        _ => {
            let generated = sim
                .instances()
                .iter()
                .filter(|i| i.role.is_decoder())
                .flat_map(|i| i.generated.iter().map(|&(t, n)| (t, n as u64)));
            windowed_rate(generated, from, to) * (input + output) as f64 / output as f64
        }
    }
}

fn ladder(settings: &ProfilerSettings, mut probe: impl FnMut(f64) -> f64) -> Vec<SweepPoint> {
    let mut points: Vec<SweepPoint> = vec![];
    let mut flat = 0;
    let mut rps = settings.start_rps;
    for _ in 0..settings.max_steps {
        let v = probe(rps);
        if let Some(prev) = points.last() {
            if v < prev.tokens_per_s * (1.0 + settings.min_gain) {
                flat += 1;
            } else {
                flat = 0;
            }
        }
        points.push(SweepPoint { offered_rps: rps, tokens_per_s: v });
        if flat >= settings.patience {
            break;
        }
        rps *= settings.growth;
    }
    points
}

fn peak(points: &[SweepPoint]) -> f64 {
    points.iter().map(|p| p.tokens_per_s).fold(0.0, f64::max)
}

/// Rate ladder on a single prefiller with inputs of `input_tokens`.
pub fn prefill_sweep(perf: &PerfModel, settings: &ProfilerSettings, input_tokens: u32) -> Vec<SweepPoint> {
    ladder(settings, |rps| measure(perf, settings, rps, input_tokens, 1, Role::Prefiller))
}

/// Rate ladder on a single decoder fed by overprovisioned prefillers.
pub fn decode_sweep(perf: &PerfModel, settings: &ProfilerSettings, spec: &BucketSpec) -> Vec<SweepPoint> {
    let (i, o) = (spec.representative_input, spec.representative_output);
    ladder(settings, |rps| measure(perf, settings, rps, i, o, Role::RegularDecoder))
}

/// Saturated prefill token rate, probed with 1024-token prompts.
pub fn profile_prefill_velocity(perf: &PerfModel, settings: &ProfilerSettings) -> f64 {
    let mut s = settings.clone();
    // start near a tenth of nominal capacity so the ladder stays short
    s.start_rps = (perf.prefill_velocity / 1024.0 / 10.0).max(settings.start_rps);
    peak(&prefill_sweep(perf, &s, 1024))
}

/// Peak completed-token rate of one decoder on a bucket's representative
/// request.
pub fn profile_decode_velocity(spec: &BucketSpec, perf: &PerfModel, settings: &ProfilerSettings) -> f64 {
    peak(&decode_sweep(perf, settings, spec))
}

/// Full profile: V_P, per-bucket V_D, and the convertible sizing. V_N is a
/// link property and is copied from the model.
pub fn profile_velocities(
    perf: &PerfModel,
    targets: &ProfileTargets,
    settings: &ProfilerSettings,
) -> Result<VelocityProfile, VelocityError> {
    let conv = derive_convertible(perf, targets)?;
    let v_p = profile_prefill_velocity(perf, settings);
    let v_d: Vec<f64> = BucketId::all()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|b| profile_decode_velocity(&b.spec(), perf, settings))
        .collect();
    Ok(VelocityProfile {
        v_p,
        v_n: perf.network_velocity,
        v_d_per_bucket: BucketTable(v_d.try_into().expect("nine buckets")),
        chunk_size: conv.chunk_size,
        expected_batch_size: conv.expected_batch_size,
        reserved_tokens: conv.reserved_tokens,
        c0_ms: perf.decode_iter_base_ms,
        c1_ms: perf.decode_iter_per_seq_ms,
        kvc_capacity_tokens: perf.kvc_capacity_tokens,
        gpus_per_instance: perf.gpus_per_instance,
        max_decode_batch: perf.max_decode_batch,
        prefill_seq_equiv: perf.prefill_seq_equiv,
        tpot_slo_ms: targets.tpot_slo_ms,
        ttft_reserve_ms: targets.ttft_reserve_ms,
    })
}
