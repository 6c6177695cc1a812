//! Experiment configuration files (TOML).
//!
//! Relative paths resolve against the directory holding the config file.
//! Validation is total: every problem is reported at once, and nothing runs
//! on an invalid config.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::engine::{Millis, RngStreams, Stream};
use crate::error::{ConfigError, Error};
use crate::router::{FeasibilityMode, SloPolicy};
use crate::scaler::{PolicyKind, ScalerSettings, Stage, StagePolicy};
use crate::sim::SimConfig;
use crate::trace::{self, SynthesisSpec, TraceRecord};
use crate::velocity::VelocityProfile;

/// Where requests come from: a CSV file or a synthesis spec, optionally
/// downsampled to a target rate.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSource {
    pub path: Option<PathBuf>,
    pub synthesis: Option<SynthesisSpec>,
    pub rescale_rps: Option<f64>,
}

impl TraceSource {
    pub fn file(path: impl Into<PathBuf>) -> Self {
        Self { path: Some(path.into()), ..Self::default() }
    }
}

/// One stage's policy. Only the threshold matching `kind` may be given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub kind: PolicyKind,
    pub threshold_req: Option<f64>,
    pub threshold_rps: Option<f64>,
    pub threshold_util: Option<f64>,
}

impl StageSpec {
    pub fn new(kind: PolicyKind) -> Self {
        Self { kind, threshold_req: None, threshold_rps: None, threshold_util: None }
    }

    pub fn resolve(&self, stage: Stage) -> Result<StagePolicy, ConfigError> {
        let name = match stage {
            Stage::Prefill => "policy.prefill",
            Stage::Decode => "policy.decode",
        };
        let wanted = match self.kind {
            PolicyKind::Concurrency => Some("threshold_req"),
            PolicyKind::Rps => Some("threshold_rps"),
            PolicyKind::Utilization => Some("threshold_util"),
            PolicyKind::TokenVelocity | PolicyKind::SloReactive => None,
        };
        let mut errs = vec![];
        for (key, v) in [
            ("threshold_req", self.threshold_req),
            ("threshold_rps", self.threshold_rps),
            ("threshold_util", self.threshold_util),
        ] {
            if v.is_some() && wanted != Some(key) {
                errs.push(format!("{name}: `{key}` does not apply to the {} policy", self.kind));
            }
        }
        ConfigError::from_list(errs)?;
        let policy = match (StagePolicy::with_default_threshold(self.kind, stage), self) {
            (StagePolicy::Concurrency { .. }, StageSpec { threshold_req: Some(t), .. }) => {
                StagePolicy::Concurrency { threshold_req: *t }
            }
            (StagePolicy::Rps { .. }, StageSpec { threshold_rps: Some(t), .. }) => {
                StagePolicy::Rps { threshold_rps: *t }
            }
            (StagePolicy::Utilization { .. }, StageSpec { threshold_util: Some(t), .. }) => {
                StagePolicy::Utilization { threshold_util: *t }
            }
            (p, _) => p,
        };
        policy.validate(name)?;
        Ok(policy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub prefill: StageSpec,
    pub decode: StageSpec,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self { prefill: StageSpec::new(PolicyKind::TokenVelocity), decode: StageSpec::new(PolicyKind::TokenVelocity) }
    }
}

/// `"auto"` sizes the pool from the trace; a number fixes it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvertibleSetting {
    #[default]
    Auto,
    Count(u32),
}

impl Serialize for ConvertibleSetting {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            ConvertibleSetting::Auto => s.serialize_str("auto"),
            ConvertibleSetting::Count(n) => s.serialize_u32(*n),
        }
    }
}

impl<'de> Deserialize<'de> for ConvertibleSetting {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = ConvertibleSetting;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("\"auto\" or a non-negative integer")
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Self::Value, E> {
                if v == "auto" {
                    Ok(ConvertibleSetting::Auto)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Self::Value, E> {
                u32::try_from(v)
                    .map(ConvertibleSetting::Count)
                    .map_err(|_| E::invalid_value(de::Unexpected::Signed(v), &self))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Self::Value, E> {
                u32::try_from(v)
                    .map(ConvertibleSetting::Count)
                    .map_err(|_| E::invalid_value(de::Unexpected::Unsigned(v), &self))
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    pub initial_prefillers: u32,
    pub initial_decoders: u32,
    pub convertible_count: ConvertibleSetting,
    pub startup_delay_ms: Millis,
    pub min_prefillers: u32,
    /// Consecutive lower targets required before token-velocity decode
    /// scale-down.
    pub damping_ticks: u32,
    pub scaling_enabled: bool,
}

impl Default for ClusterSection {
    fn default() -> Self {
        Self {
            initial_prefillers: 1,
            initial_decoders: 1,
            convertible_count: ConvertibleSetting::Auto,
            startup_delay_ms: 5000,
            min_prefillers: 1,
            damping_ticks: 3,
            scaling_enabled: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoutingSection {
    pub predictor_accuracy: f64,
    pub feasibility: FeasibilityMode,
    pub exclusion_threshold: f64,
}

impl Default for RoutingSection {
    fn default() -> Self {
        Self { predictor_accuracy: 1.0, feasibility: FeasibilityMode::Strict, exclusion_threshold: 0.9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingSection {
    pub tick_ms: Millis,
    pub metrics_tick_ms: Millis,
    pub sliding_window_ms: Millis,
}

impl Default for TimingSection {
    fn default() -> Self {
        Self { tick_ms: 1000, metrics_tick_ms: 100, sliding_window_ms: 5000 }
    }
}

/// Extra drain time after the last arrival when no horizon is given.
pub const DEFAULT_DRAIN_MS: Millis = 60_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub seed: u64,
    /// Defaults to the last arrival plus [`DEFAULT_DRAIN_MS`].
    #[serde(default)]
    pub horizon_ms: Option<Millis>,
    pub profile: PathBuf,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Also run an overprovisioned static companion and correlate the
    /// provisioned series against its required series.
    #[serde(default)]
    pub correlate: bool,
    pub trace: TraceSource,
    #[serde(default)]
    pub policy: PolicySection,
    #[serde(default)]
    pub cluster: ClusterSection,
    #[serde(default)]
    pub routing: RoutingSection,
    #[serde(default)]
    pub slo: SloPolicy,
    #[serde(default)]
    pub timing: TimingSection,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| ConfigError::new(e.to_string().trim_end().to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
            .map_err(|e| Error::Config(ConfigError::from_list(e.prefixed(&path.display().to_string())).unwrap_err()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn resolve_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn profile_path(&self) -> PathBuf {
        self.resolve_path(&self.profile)
    }

    pub fn trace_path(&self) -> Option<PathBuf> {
        self.trace.path.as_deref().map(|p| self.resolve_path(p))
    }

    pub fn output_dir(&self) -> Option<PathBuf> {
        self.output_dir.as_deref().map(|p| self.resolve_path(p))
    }

    /// `prefill/decode` policy names unless a label is set.
    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| format!("{}/{}", self.policy.prefill.kind, self.policy.decode.kind))
    }

    pub fn trace_name(&self) -> String {
        match (&self.trace.path, &self.trace.synthesis) {
            (Some(p), _) => p.display().to_string(),
            _ => "synthetic".into(),
        }
    }

    /// Checks everything that can be checked without running: file
    /// existence, policy/threshold pairing, ranges.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = vec![];
        if !self.profile_path().is_file() {
            errs.push(format!("profile: file not found: {}", self.profile_path().display()));
        }
        match (&self.trace.path, &self.trace.synthesis) {
            (Some(_), Some(_)) => errs.push("trace: give either `path` or `synthesis`, not both".into()),
            (None, None) => errs.push("trace: one of `path` or `synthesis` is required".into()),
            (Some(_), None) => {
                let p = self.trace_path().expect("path set");
                if !p.is_file() {
                    errs.push(format!("trace: file not found: {}", p.display()));
                }
            }
            (None, Some(s)) => {
                if let Err(e) = s.validate() {
                    errs.extend(e.prefixed("trace.synthesis"));
                }
            }
        }
        if let Some(r) = self.trace.rescale_rps {
            if !(r > 0.0 && r.is_finite()) {
                errs.push(format!("trace: rescale_rps must be positive, got {r}"));
            }
        }
        if self.horizon_ms == Some(0) {
            errs.push("horizon_ms must be positive".into());
        }
        for (spec, stage) in [(&self.policy.prefill, Stage::Prefill), (&self.policy.decode, Stage::Decode)] {
            if let Err(e) = spec.resolve(stage) {
                errs.extend(e.problems().iter().cloned());
            }
        }
        let c = &self.cluster;
        if c.initial_prefillers == 0 {
            errs.push("cluster: initial_prefillers must be at least 1".into());
        }
        if c.initial_decoders == 0 {
            errs.push("cluster: initial_decoders must be at least 1".into());
        }
        if c.min_prefillers == 0 {
            errs.push("cluster: min_prefillers must be at least 1".into());
        }
        if c.damping_ticks == 0 {
            errs.push("cluster: damping_ticks must be at least 1".into());
        }
        if c.startup_delay_ms > 10_000 {
            errs.push(format!("cluster: startup_delay_ms must be within 0..=10000, got {}", c.startup_delay_ms));
        }
        let r = &self.routing;
        if !(0.0..=1.0).contains(&r.predictor_accuracy) {
            errs.push(format!("routing: predictor_accuracy must be in [0, 1], got {}", r.predictor_accuracy));
        }
        if !(r.exclusion_threshold > 0.0 && r.exclusion_threshold <= 1.0) {
            errs.push(format!("routing: exclusion_threshold must be in (0, 1], got {}", r.exclusion_threshold));
        }
        if let Err(e) = self.slo.validate() {
            errs.extend(e.prefixed("slo"));
        }
        let t = &self.timing;
        for (k, v) in
            [("tick_ms", t.tick_ms), ("metrics_tick_ms", t.metrics_tick_ms), ("sliding_window_ms", t.sliding_window_ms)]
        {
            if v == 0 {
                errs.push(format!("timing: {k} must be positive"));
            }
        }
        ConfigError::from_list(errs)
    }

    /// Loads the profile and trace referenced by a valid config.
    pub fn load_inputs(&self) -> Result<(VelocityProfile, Vec<TraceRecord>), Error> {
        self.validate()?;
        let profile = VelocityProfile::load(&self.profile_path())?;
        let streams = RngStreams::new(self.seed);
        let mut records = match (self.trace_path(), &self.trace.synthesis) {
            (Some(p), _) => trace::parse_trace(&p)?,
            (None, Some(spec)) => trace::synthesize(spec, &mut streams.stream(Stream::TraceSynthesis)),
            (None, None) => unreachable!("validated"),
        };
        if let Some(target) = self.trace.rescale_rps {
            records = trace::rescale(&records, target, &mut streams.stream(Stream::Rescale))?;
        }
        Ok((profile, records))
    }

    /// Simulator settings for this config; `convertibles` is the resolved
    /// pool size.
    pub fn sim_config(&self, profile: VelocityProfile, records: &[TraceRecord], convertibles: u32) -> SimConfig {
        let horizon = self
            .horizon_ms
            .unwrap_or_else(|| records.iter().map(|r| r.arrival_ms).max().unwrap_or(0) + DEFAULT_DRAIN_MS);
        let mut s = SimConfig::new(profile, horizon);
        s.label = self.label();
        s.trace_name = self.trace_name();
        s.slo = self.slo.clone();
        s.scaler = ScalerSettings {
            prefill: self.policy.prefill.resolve(Stage::Prefill).expect("validated"),
            decode: self.policy.decode.resolve(Stage::Decode).expect("validated"),
            min_prefillers: self.cluster.min_prefillers,
            damping_ticks: self.cluster.damping_ticks,
        };
        s.scaling_enabled = self.cluster.scaling_enabled;
        s.initial_prefillers = self.cluster.initial_prefillers;
        s.initial_decoders = self.cluster.initial_decoders;
        s.convertible_count = convertibles;
        s.startup_delay_ms = self.cluster.startup_delay_ms;
        s.predictor_accuracy = self.routing.predictor_accuracy;
        s.feasibility = self.routing.feasibility;
        s.exclusion_threshold = self.routing.exclusion_threshold;
        s.tick_ms = self.timing.tick_ms;
        s.metrics_tick_ms = self.timing.metrics_tick_ms;
        s.sliding_window_ms = self.timing.sliding_window_ms;
        s.seed = self.seed;
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dir_with_profile() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        crate::velocity::test_profile().save(&dir.path().join("p.json")).unwrap();
        std::fs::write(dir.path().join("t.csv"), "arrival_ms,input_tokens,output_tokens\n0,10,10\n").unwrap();
        dir
    }

    const MINIMAL: &str = r#"
profile = "p.json"
[trace]
path = "t.csv"
"#;

    #[test]
    fn minimal_config_uses_defaults() {
        let dir = dir_with_profile();
        let cfg = ExperimentConfig::from_toml(MINIMAL, dir.path()).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.label(), "token_velocity/token_velocity");
        assert_eq!(cfg.cluster.convertible_count, ConvertibleSetting::Auto);
        let (p, recs) = cfg.load_inputs().unwrap();
        let s = cfg.sim_config(p, &recs, 0);
        assert_eq!(s.horizon_ms, DEFAULT_DRAIN_MS);
        assert_eq!(s.startup_delay_ms, 5000);
    }

    #[test]
    fn thresholds_must_match_policy() {
        let dir = dir_with_profile();
        let text = format!(
            "{MINIMAL}\n[policy.prefill]\nkind = \"utilization\"\nthreshold_rps = 14\n[policy.decode]\nkind = \"rps\"\nthreshold_rps = 20\n"
        );
        let cfg = ExperimentConfig::from_toml(&text, dir.path()).unwrap();
        let err = cfg.validate().unwrap_err();
        assert_eq!(err.problems().len(), 1, "{err}");
        assert!(err.problems()[0].contains("threshold_rps"));
        let ok = StageSpec { threshold_rps: Some(20.0), ..StageSpec::new(PolicyKind::Rps) };
        assert_eq!(ok.resolve(Stage::Decode).unwrap(), StagePolicy::Rps { threshold_rps: 20.0 });
        assert_eq!(
            StageSpec::new(PolicyKind::Concurrency).resolve(Stage::Prefill).unwrap(),
            StagePolicy::Concurrency { threshold_req: 7.0 }
        );
    }

    #[test]
    fn every_problem_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let text = r#"
profile = "missing.json"
horizon_ms = 0
[trace]
path = "nope.csv"
rescale_rps = -1
[cluster]
initial_decoders = 0
startup_delay_ms = 20000
[routing]
predictor_accuracy = 1.5
[policy.decode]
kind = "utilization"
threshold_util = 2.0
"#;
        let cfg = ExperimentConfig::from_toml(text, dir.path()).unwrap();
        let err = cfg.validate().unwrap_err();
        assert_eq!(err.problems().len(), 8, "{err}");
    }

    #[test]
    fn convertible_setting_parses() {
        let dir = dir_with_profile();
        for (v, want) in [
            ("\"auto\"", Some(ConvertibleSetting::Auto)),
            ("3", Some(ConvertibleSetting::Count(3))),
            ("\"many\"", None),
            ("-1", None),
        ] {
            let text = format!("{MINIMAL}\n[cluster]\nconvertible_count = {v}\n");
            let got = ExperimentConfig::from_toml(&text, dir.path()).ok().map(|c| c.cluster.convertible_count);
            assert_eq!(got, want, "{v}");
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = dir_with_profile();
        assert!(ExperimentConfig::from_toml(&format!("{MINIMAL}\n[cluster]\nprefillers = 2\n"), dir.path()).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let dir = dir_with_profile();
        let mut cfg = ExperimentConfig::from_toml(MINIMAL, dir.path()).unwrap();
        cfg.cluster.convertible_count = ConvertibleSetting::Count(2);
        cfg.policy.decode = StageSpec { threshold_rps: Some(9.0), ..StageSpec::new(PolicyKind::Rps) };
        let back = ExperimentConfig::from_toml(&cfg.to_toml(), dir.path()).unwrap();
        assert_eq!(back, cfg);
    }
}
