use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bucket::BucketTable;
use crate::cluster::{ConvertibleConfig, PerfModel, DEFAULT_PREFILL_SEQ_EQUIV};
use crate::error::{ConfigError, Error};
use crate::velocity::{convertible_prefill_velocity, reserved_memory};

fn default_max_decode_batch() -> u32 {
    512
}

fn default_prefill_seq_equiv() -> f64 {
    DEFAULT_PREFILL_SEQ_EQUIV
}

fn default_tpot_slo_ms() -> f64 {
    100.0
}

fn default_ttft_reserve_ms() -> f64 {
    250.0
}

/// Velocity profile for one (model, hardware) pair. This is the profile
/// file format; `v_n: null` means the network is not modeled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VelocityProfile {
    pub v_p: f64,
    pub v_n: Option<f64>,
    pub v_d_per_bucket: BucketTable<f64>,
    pub chunk_size: u32,
    pub expected_batch_size: u32,
    pub reserved_tokens: u64,
    pub c0_ms: f64,
    pub c1_ms: f64,
    pub kvc_capacity_tokens: u64,
    pub gpus_per_instance: u32,
    #[serde(default = "default_max_decode_batch")]
    pub max_decode_batch: u32,
    /// κ, prefill tokens per decode-sequence-equivalent.
    #[serde(default = "default_prefill_seq_equiv")]
    pub prefill_seq_equiv: f64,
    /// TPOT SLO the chunk size was selected against.
    #[serde(default = "default_tpot_slo_ms")]
    pub tpot_slo_ms: f64,
    /// TTFT SLO used to size the convertible-decoder reserve.
    #[serde(default = "default_ttft_reserve_ms")]
    pub ttft_reserve_ms: f64,
}

impl VelocityProfile {
    pub fn perf_model(&self) -> PerfModel {
        PerfModel {
            prefill_velocity: self.v_p,
            network_velocity: self.v_n,
            decode_iter_base_ms: self.c0_ms,
            decode_iter_per_seq_ms: self.c1_ms,
            kvc_capacity_tokens: self.kvc_capacity_tokens,
            max_decode_batch: self.max_decode_batch,
            prefill_seq_equiv: self.prefill_seq_equiv,
            gpus_per_instance: self.gpus_per_instance,
        }
    }

    pub fn convertible(&self) -> ConvertibleConfig {
        ConvertibleConfig {
            chunk_size: self.chunk_size,
            expected_batch_size: self.expected_batch_size,
            reserved_tokens: self.reserved_tokens,
        }
    }

    /// V_D^{P'}; zero when the chunk leaves no prefill headroom.
    pub fn convertible_prefill_velocity(&self) -> f64 {
        convertible_prefill_velocity(self.chunk_size, self.expected_batch_size, self.tpot_slo_ms / 1000.0)
            .unwrap_or(0.0)
    }

    /// Smaller of prefill and network velocity.
    pub fn prefill_bottleneck_velocity(&self) -> f64 {
        self.perf_model().prefill_bottleneck_velocity()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = match self.perf_model().validate() {
            Ok(()) => vec![],
            Err(e) => e.problems().to_vec(),
        };
        for (b, v) in self.v_d_per_bucket.iter() {
            if !(v > 0.0 && v.is_finite()) {
                errs.push(format!("v_d_per_bucket[{b}] must be positive, got {v}"));
            }
        }
        match convertible_prefill_velocity(self.chunk_size, self.expected_batch_size, self.tpot_slo_ms / 1000.0) {
            Ok(v) => {
                let expect = reserved_memory(v, 1.0, self.ttft_reserve_ms / 1000.0);
                if expect != self.reserved_tokens {
                    errs.push(format!(
                        "reserved_tokens is {} but V_D^P' = {v} tok/s over a {} ms TTFT SLO gives {expect}",
                        self.reserved_tokens, self.ttft_reserve_ms
                    ));
                }
            }
            Err(e) => errs.push(e.to_string()),
        }
        if self.reserved_tokens >= self.kvc_capacity_tokens {
            errs.push("reserved_tokens must leave room for decode work".into());
        }
        ConfigError::from_list(errs)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let profile: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
        profile.validate().map_err(|e| ConfigError::from_list(e.prefixed(&path.display().to_string())).unwrap_err())?;
        Ok(profile)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("profile serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
pub(crate) fn test_profile() -> VelocityProfile {
    VelocityProfile {
        v_p: 14_000.0,
        v_n: Some(819_200.0),
        v_d_per_bucket: BucketTable([23535.0, 8146.0, 5138.0, 33106.0, 9794.0, 5766.0, 39551.0, 11310.0, 6495.0]),
        chunk_size: 512,
        expected_batch_size: 112,
        reserved_tokens: 1000,
        c0_ms: 20.0,
        c1_ms: 0.1,
        kvc_capacity_tokens: 100_000,
        gpus_per_instance: 1,
        max_decode_batch: 512,
        prefill_seq_equiv: 8.0,
        tpot_slo_ms: 100.0,
        ttft_reserve_ms: 250.0,
    }
}
