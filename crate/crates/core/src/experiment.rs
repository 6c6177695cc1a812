//! Orchestration over whole simulations: single runs, policy comparisons,
//! the ablation ladder, trace analysis, and profiling.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bucket::BucketTable;
use crate::cluster::PerfModel;
use crate::config::{ConvertibleSetting, ExperimentConfig};
use crate::engine::Millis;
use crate::error::{ConfigError, Error};
use crate::metrics::SimReport;
use crate::scaler::{self, PolicyKind, StagePolicy};
use crate::sim::{SimConfig, Simulation};
use crate::trace::{self, BurstReport, TraceRecord};
use crate::velocity::{self, ProfileTargets, ProfilerSettings, VelocityError, VelocityProfile};

/// Window of the running average used for burst and demand estimates.
pub const ANALYSIS_WINDOW_MS: Millis = 60_000;

/// Peak over time of the running-average decoder demand: per 1 s window,
/// each bucket's tokens over its decode velocity, summed.
pub fn peak_decoder_demand(records: &[TraceRecord], v_d: &BucketTable<f64>) -> f64 {
    let series = trace::subwindow_series(records, |r| r.total_tokens() as f64 / v_d[r.bucket()]);
    let span = (ANALYSIS_WINDOW_MS / trace::SUBWINDOW_MS) as usize;
    trace::running_average(&series, span).into_iter().fold(0.0, f64::max)
}

/// Static convertible-decoder pool sized from a trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvertibleSizing {
    pub max_decoders: u32,
    pub burst_ratio: f64,
    pub convertible_count: u32,
}

pub fn size_convertibles(records: &[TraceRecord], profile: &VelocityProfile) -> ConvertibleSizing {
    let demand = peak_decoder_demand(records, &profile.v_d_per_bucket);
    let max_decoders = if demand <= 1e-9 { 0 } else { (demand - 1e-9).ceil() as u32 };
    let burst_ratio = trace::burstiness(records, ANALYSIS_WINDOW_MS, &[1.0]).burst_ratio().clamp(0.0, 1.0);
    ConvertibleSizing {
        max_decoders,
        burst_ratio,
        convertible_count: scaler::convertible_count(max_decoders, burst_ratio),
    }
}

/// A config with its inputs loaded and every derived setting resolved.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub sim: SimConfig,
    pub records: Vec<TraceRecord>,
    pub sizing: ConvertibleSizing,
    pub correlate: bool,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, Error> {
    let (profile, records) = cfg.load_inputs()?;
    let sizing = size_convertibles(&records, &profile);
    let convertibles = match cfg.cluster.convertible_count {
        ConvertibleSetting::Auto => sizing.convertible_count,
        ConvertibleSetting::Count(n) => n,
    };
    let sim = cfg.sim_config(profile, &records, convertibles);
    sim.validate()?;
    Ok(Prepared { sim, records, sizing, correlate: cfg.correlate })
}

pub fn simulate(sim: &SimConfig, records: &[TraceRecord]) -> Result<SimReport, Error> {
    let mut s = Simulation::new(sim.clone(), records)?;
    s.run();
    Ok(s.report())
}

/// Static, generously provisioned twin of a run, used to measure what the
/// traffic actually required.
pub fn companion_config(sim: &SimConfig, main: &SimReport) -> SimConfig {
    let peak_p = main.ticks.iter().map(|t| t.prefillers).max().unwrap_or(0).max(sim.initial_prefillers);
    let peak_d = main.ticks.iter().map(|t| t.regular_decoders).max().unwrap_or(0).max(sim.initial_decoders);
    let mut c = sim.clone();
    c.label = format!("{}:companion", sim.label);
    c.scaling_enabled = false;
    c.initial_prefillers = 2 * peak_p;
    c.initial_decoders = 2 * peak_d;
    c
}

pub fn run_prepared(p: &Prepared) -> Result<SimReport, Error> {
    let mut report = simulate(&p.sim, &p.records)?;
    if p.correlate {
        let companion = simulate(&companion_config(&p.sim, &report), &p.records)?;
        report.correlate_with(&companion)?;
    }
    Ok(report)
}

pub fn run(cfg: &ExperimentConfig) -> Result<SimReport, Error> {
    run_prepared(&prepare(cfg)?)
}

/// Runs configs that share a trace and seed in parallel; reports come back
/// in config order.
pub fn compare(cfgs: &[ExperimentConfig]) -> Result<Vec<SimReport>, Error> {
    if cfgs.len() < 2 {
        return Err(ConfigError::new("compare needs at least two configs").into());
    }
    let prepared = cfgs.iter().map(prepare).collect::<Result<Vec<_>, _>>()?;
    let mut errs = vec![];
    for (i, p) in prepared.iter().enumerate().skip(1) {
        if p.records != prepared[0].records {
            errs.push(format!("config {i} uses a different trace than config 0"));
        }
        if p.sim.seed != prepared[0].sim.seed {
            errs.push(format!("config {i} uses seed {} but config 0 uses {}", p.sim.seed, prepared[0].sim.seed));
        }
    }
    ConfigError::from_list(errs)?;
    prepared.par_iter().map(run_prepared).collect()
}

/// Fixed-width table of attainment and GPU cost, one row per report.
pub fn comparison_table(reports: &[SimReport]) -> String {
    let mut out = String::new();
    let width = reports.iter().map(|r| r.policy.len()).max().unwrap_or(6).max(6);
    let _ = writeln!(out, "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}", "policy", "overall", "ttft", "tpot", "avg_gpus");
    for r in reports {
        let a = r.attainment();
        let _ = writeln!(
            out,
            "{:<width$}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.3}",
            r.policy,
            a.overall,
            a.ttft,
            a.tpot,
            r.avg_gpus()
        );
    }
    out
}

pub const ABLATION_STEPS: [&str; 4] = ["B", "B+P", "B+P+D", "Full"];

/// The four ablation configurations, built from an RPS/RPS base: token
/// velocity replaces the prefill scaler, then the decode scaler, then
/// convertible decoders are added.
pub fn ablation_configs(base: &SimConfig, full_convertibles: u32) -> Result<Vec<SimConfig>, ConfigError> {
    let kinds = (base.scaler.prefill.kind(), base.scaler.decode.kind());
    if kinds != (PolicyKind::Rps, PolicyKind::Rps) {
        return Err(ConfigError::new(format!(
            "ablation base must use the rps policy for both stages, got {}/{}",
            kinds.0, kinds.1
        )));
    }
    let mut out = vec![];
    for (i, name) in ABLATION_STEPS.iter().enumerate() {
        let mut c = base.clone();
        c.label = name.to_string();
        c.convertible_count = 0;
        if i >= 1 {
            c.scaler.prefill = StagePolicy::TokenVelocity;
        }
        if i >= 2 {
            c.scaler.decode = StagePolicy::TokenVelocity;
        }
        if i >= 3 {
            c.convertible_count = full_convertibles.max(1);
        }
        out.push(c);
    }
    Ok(out)
}

/// Runs the ablation ladder. The full step keeps an explicit convertible
/// count from the config and otherwise sizes the pool from the trace.
pub fn ablate(cfg: &ExperimentConfig) -> Result<Vec<SimReport>, Error> {
    let p = prepare(cfg)?;
    let full = match cfg.cluster.convertible_count {
        ConvertibleSetting::Count(n) => n,
        ConvertibleSetting::Auto => p.sizing.convertible_count,
    };
    let configs = ablation_configs(&p.sim, full)?;
    configs.par_iter().map(|c| simulate(c, &p.records)).collect()
}

pub const DEFAULT_FACTORS: [f64; 4] = [1.0, 2.0, 3.0, 4.0];

pub fn analyze(path: &Path, window_ms: Millis, factors: &[f64]) -> Result<BurstReport, Error> {
    check_analysis(window_ms, factors)?;
    analyze_records(&trace::parse_trace(path)?, window_ms, factors)
}

pub fn analyze_records(records: &[TraceRecord], window_ms: Millis, factors: &[f64]) -> Result<BurstReport, Error> {
    check_analysis(window_ms, factors)?;
    Ok(trace::burstiness(records, window_ms, factors))
}

fn check_analysis(window_ms: Millis, factors: &[f64]) -> Result<(), ConfigError> {
    let mut bad: Vec<String> = factors
        .iter()
        .filter(|f| !(**f > 0.0 && f.is_finite()))
        .map(|f| format!("factor {f} must be positive"))
        .collect();
    if window_ms == 0 {
        bad.push("window must be positive".into());
    }
    ConfigError::from_list(bad)
}

/// Input of the `profile` subcommand: the performance model to profile,
/// the SLO targets for convertible sizing, and sweep settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileJob {
    pub perf: PerfModel,
    #[serde(default)]
    pub targets: ProfileTargets,
    #[serde(default)]
    pub profiler: ProfilerSettings,
}

impl ProfileJob {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let job: Self = toml::from_str(&text)
            .map_err(|e| ConfigError::new(format!("{}: {}", path.display(), e.to_string().trim_end())))?;
        job.perf
            .validate()
            .map_err(|e| ConfigError::from_list(e.prefixed(&path.display().to_string())).unwrap_err())?;
        Ok(job)
    }

    pub fn run(&self) -> Result<VelocityProfile, VelocityError> {
        velocity::profile_velocities(&self.perf, &self.targets, &self.profiler)
    }
}
