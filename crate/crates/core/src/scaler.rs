//! Scaling policies.
//!
//! The token-velocity policy sizes prefillers from the input-token rate and
//! decoders from the per-bucket rate of input plus predicted output tokens.
//! Four baseline families (concurrency, RPS, utilization, SLO-reactive)
//! are provided for comparison. All decision functions are pure; the
//! [`Scaler`] adds the scale-down damping and bookkeeping.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::bucket::BucketTable;
use crate::engine::Millis;
use crate::error::ConfigError;
use crate::velocity::VelocityError;

const CEIL_EPS: f64 = 1e-9;

fn ceil_count(x: f64) -> u32 {
    if x <= CEIL_EPS {
        0
    } else {
        (x - CEIL_EPS).ceil() as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    TokenVelocity,
    Concurrency,
    Rps,
    Utilization,
    SloReactive,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::TokenVelocity => "token_velocity",
            PolicyKind::Concurrency => "concurrency",
            PolicyKind::Rps => "rps",
            PolicyKind::Utilization => "utilization",
            PolicyKind::SloReactive => "slo_reactive",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Prefill,
    Decode,
}

/// Policy for one stage. The threshold's unit depends on the kind:
/// requests for concurrency, req/s for RPS, a fraction for utilization.
/// Token velocity and SLO-reactive take none.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StagePolicy {
    TokenVelocity,
    Concurrency { threshold_req: f64 },
    Rps { threshold_rps: f64 },
    Utilization { threshold_util: f64 },
    SloReactive,
}

impl StagePolicy {
    pub fn kind(&self) -> PolicyKind {
        match self {
            StagePolicy::TokenVelocity => PolicyKind::TokenVelocity,
            StagePolicy::Concurrency { .. } => PolicyKind::Concurrency,
            StagePolicy::Rps { .. } => PolicyKind::Rps,
            StagePolicy::Utilization { .. } => PolicyKind::Utilization,
            StagePolicy::SloReactive => PolicyKind::SloReactive,
        }
    }

    /// Baseline with its default threshold for `stage`.
    pub fn with_default_threshold(kind: PolicyKind, stage: Stage) -> Self {
        let decode = stage == Stage::Decode;
        match kind {
            PolicyKind::TokenVelocity => StagePolicy::TokenVelocity,
            PolicyKind::Concurrency => StagePolicy::Concurrency { threshold_req: if decode { 45.0 } else { 7.0 } },
            PolicyKind::Rps => StagePolicy::Rps { threshold_rps: if decode { 28.0 } else { 14.0 } },
            PolicyKind::Utilization => StagePolicy::Utilization { threshold_util: 0.7 },
            PolicyKind::SloReactive => StagePolicy::SloReactive,
        }
    }

    pub fn validate(&self, stage: &str) -> Result<(), ConfigError> {
        let bad = |what: &str, v: f64| Err(ConfigError::new(format!("{stage}: {what} must be positive, got {v}")));
        match *self {
            StagePolicy::Concurrency { threshold_req: t } if !(t > 0.0 && t.is_finite()) => bad("threshold_req", t),
            StagePolicy::Rps { threshold_rps: t } if !(t > 0.0 && t.is_finite()) => bad("threshold_rps", t),
            StagePolicy::Utilization { threshold_util: t } if !(t > 0.0 && t <= 1.0) => {
                Err(ConfigError::new(format!("{stage}: threshold_util must be in (0, 1], got {t}")))
            }
            _ => Ok(()),
        }
    }
}

/// Traffic and cluster observations at a scaler tick.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct TrafficSnapshot {
    pub window_start_ms: Millis,
    pub window_end_ms: Millis,
    /// Input-token arrival rate λ, tokens/s.
    pub lambda_input: f64,
    /// λ' per predicted bucket: input plus predicted output tokens/s.
    pub lambda_prime_per_bucket: BucketTable<f64>,
    pub request_rate: f64,
    /// Sliding-window mean of requests waiting for or in prefill.
    pub prefill_concurrency: f64,
    /// Sliding-window mean of requests in the decode stage.
    pub decode_concurrency: f64,
    /// Sliding-window mean busy fraction of ready prefillers.
    pub prefill_utilization: f64,
    /// Sliding-window mean KV occupancy of ready decoders.
    pub decoder_mem_utilization: f64,
    /// p99 of TTFT divided by its SLO, over recent first tokens.
    pub ttft_p99_ratio: Option<f64>,
    pub tpot_p99_ms: Option<f64>,
}

/// Instance counts a policy wants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingDecision {
    pub issued_at: Millis,
    pub policy: String,
    /// I^P
    pub target_prefillers: u32,
    /// I^D, convertible decoders included.
    pub target_decoders_total: u32,
    /// I^D_c, fixed for the run.
    pub convertible_count: u32,
    /// I^D_r
    pub target_regular_decoders: u32,
}

/// Prefillers needed for the input-token rate λ.
pub fn tv_prefiller_target(lambda: f64, bottleneck_velocity: f64, min_prefillers: u32) -> u32 {
    ceil_count(lambda / bottleneck_velocity).max(min_prefillers)
}

/// Total and regular decoders needed for the per-bucket rates λ'.
pub fn tv_decoder_target(
    lambda_prime: &BucketTable<f64>,
    velocity: &BucketTable<f64>,
    convertible_count: u32,
) -> Result<(u32, u32), VelocityError> {
    let mut demand = 0.0;
    for (b, rate) in lambda_prime.iter() {
        if rate <= 0.0 {
            continue;
        }
        let v = velocity[b];
        if !(v > 0.0 && v.is_finite()) {
            return Err(VelocityError::MissingBucketVelocity(b.label()));
        }
        demand += rate / v;
    }
    let total = ceil_count(demand);
    Ok((total, total.saturating_sub(convertible_count)))
}

/// Fractional decoder demand Σ λ'/V_D, before rounding.
pub fn decoder_demand(lambda_prime: &BucketTable<f64>, velocity: &BucketTable<f64>) -> f64 {
    lambda_prime.iter().filter(|(_, r)| *r > 0.0).map(|(b, r)| r / velocity[b]).sum()
}

/// Size of the static convertible-decoder pool.
pub fn convertible_count(max_decoders: u32, burst_ratio: f64) -> u32 {
    assert!((0.0..=1.0).contains(&burst_ratio), "burst ratio {burst_ratio} outside [0, 1]");
    ceil_count(max_decoders as f64 * burst_ratio)
}

pub fn baseline_concurrency(concurrency: f64, threshold_req: f64, floor: u32) -> u32 {
    ceil_count(concurrency / threshold_req).max(floor)
}

pub fn baseline_rps(request_rate: f64, threshold_rps: f64, floor: u32) -> u32 {
    ceil_count(request_rate / threshold_rps).max(floor)
}

/// One step up above the threshold, one step down below half of it.
pub fn baseline_utilization(utilization: f64, threshold: f64, current: u32, floor: u32) -> u32 {
    let target = if utilization > threshold {
        current + 1
    } else if utilization < threshold / 2.0 {
        current.saturating_sub(1)
    } else {
        current
    };
    target.max(floor)
}

/// One step up while the stage's SLO is being violated.
pub fn baseline_slo_reactive(violated: bool, current: u32, floor: u32) -> u32 {
    (if violated { current + 1 } else { current }).max(floor)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerSettings {
    pub prefill: StagePolicy,
    pub decode: StagePolicy,
    pub min_prefillers: u32,
    /// Consecutive agreeing ticks before the token-velocity policy scales down.
    pub damping_ticks: u32,
}

/// Current provisioned counts the policy reacts to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CurrentCounts {
    pub prefillers: u32,
    pub regular_decoders: u32,
}

/// Profile quantities the token-velocity policy needs.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityTargets {
    pub prefill_bottleneck: f64,
    pub decode_per_bucket: BucketTable<f64>,
}

#[derive(Debug, Clone)]
pub struct Scaler {
    settings: ScalerSettings,
    convertibles: u32,
    tpot_slo_ms: f64,
    recent_p: VecDeque<u32>,
    recent_d: VecDeque<u32>,
}

impl Scaler {
    pub fn new(settings: ScalerSettings, convertible_count: u32, tpot_slo_ms: f64) -> Self {
        Self {
            settings,
            convertibles: convertible_count,
            tpot_slo_ms,
            recent_p: VecDeque::new(),
            recent_d: VecDeque::new(),
        }
    }

    pub fn settings(&self) -> &ScalerSettings {
        &self.settings
    }

    pub fn policy_name(&self) -> String {
        format!("{}/{}", self.settings.prefill.kind(), self.settings.decode.kind())
    }

    /// Floor on regular decoders: total decoders never drop below I^D_c + 1.
    pub fn min_regular_decoders(&self) -> u32 {
        1
    }

    fn damp(history: &mut VecDeque<u32>, ticks: u32, raw: u32, current: u32) -> u32 {
        history.push_back(raw);
        while history.len() > ticks.max(1) as usize {
            history.pop_front();
        }
        if raw >= current {
            return raw;
        }
        if history.len() == ticks.max(1) as usize && history.iter().all(|&t| t < current) {
            *history.iter().max().expect("nonempty")
        } else {
            current
        }
    }

    pub fn decide(
        &mut self,
        now: Millis,
        snap: &TrafficSnapshot,
        current: CurrentCounts,
        velocity: &VelocityTargets,
    ) -> Result<ScalingDecision, VelocityError> {
        let s = &self.settings;
        let floor_p = s.min_prefillers;
        let floor_r = self.min_regular_decoders();
        let ic = self.convertibles;

        let target_p = match s.prefill {
            StagePolicy::TokenVelocity => {
                let raw = tv_prefiller_target(snap.lambda_input, velocity.prefill_bottleneck, floor_p);
                Self::damp(&mut self.recent_p, s.damping_ticks, raw, current.prefillers)
            }
            StagePolicy::Concurrency { threshold_req } => {
                baseline_concurrency(snap.prefill_concurrency, threshold_req, floor_p)
            }
            StagePolicy::Rps { threshold_rps } => baseline_rps(snap.request_rate, threshold_rps, floor_p),
            StagePolicy::Utilization { threshold_util } => {
                baseline_utilization(snap.prefill_utilization, threshold_util, current.prefillers, floor_p)
            }
            StagePolicy::SloReactive => {
                baseline_slo_reactive(snap.ttft_p99_ratio.is_some_and(|r| r > 1.0), current.prefillers, floor_p)
            }
        };

        let current_total = current.regular_decoders + ic;
        let target_total = match s.decode {
            StagePolicy::TokenVelocity => {
                let (total, regular) =
                    tv_decoder_target(&snap.lambda_prime_per_bucket, &velocity.decode_per_bucket, ic)?;
                let regular =
                    Self::damp(&mut self.recent_d, s.damping_ticks, regular.max(floor_r), current.regular_decoders);
                total.max(regular + ic)
            }
            StagePolicy::Concurrency { threshold_req } => {
                baseline_concurrency(snap.decode_concurrency, threshold_req, 0)
            }
            StagePolicy::Rps { threshold_rps } => baseline_rps(snap.request_rate, threshold_rps, 0),
            StagePolicy::Utilization { threshold_util } => {
                baseline_utilization(snap.decoder_mem_utilization, threshold_util, current_total, 0)
            }
            StagePolicy::SloReactive => {
                baseline_slo_reactive(snap.tpot_p99_ms.is_some_and(|t| t > self.tpot_slo_ms), current_total, 0)
            }
        };
        let target_total = target_total.max(ic + floor_r);

        Ok(ScalingDecision {
            issued_at: now,
            policy: self.policy_name(),
            target_prefillers: target_p,
            target_decoders_total: target_total,
            convertible_count: ic,
            target_regular_decoders: target_total - ic,
        })
    }
}
