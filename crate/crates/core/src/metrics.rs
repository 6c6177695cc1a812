//! Latency records, SLO attainment, GPU cost, correlation, and report files.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::Request;
use crate::engine::Millis;
use crate::error::Error;
use crate::router::SloPolicy;
use crate::scaler::ScalingDecision;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("correlation is undefined: {0}")]
    Undefined(&'static str),
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("required-instance series needs an overprovisioned companion run")]
    MissingCompanion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRecord {
    pub id: u64,
    pub arrival_ms: Millis,
    pub input_tokens: u32,
    pub output_tokens: u32,
    pub bucket: String,
    /// Absent when no first token was produced before the horizon.
    pub ttft_ms: Option<Millis>,
    /// Absent for requests still in flight at the horizon.
    pub tpot_ms: Option<f64>,
    pub attained: bool,
    pub placement: String,
    #[serde(skip)]
    pub ttft_ok: bool,
    #[serde(skip)]
    pub tpot_ok: bool,
}

impl LatencyRecord {
    pub fn from_request(r: &Request, slo: &SloPolicy) -> Self {
        let ttft_ms = r.first_token_time.map(|t| t - r.arrival_ms);
        let tpot_ms = match (r.first_token_time, r.completion_time) {
            (Some(f), Some(c)) if r.is_complete() => Some(tpot(c - f, r.output_tokens)),
            _ => None,
        };
        let ttft_ok = ttft_ms.is_some_and(|t| t <= slo.ttft_slo_ms(r.input_tokens));
        let tpot_ok = tpot_ms.is_some_and(|t| t <= slo.tpot_ms);
        Self {
            id: r.id,
            arrival_ms: r.arrival_ms,
            input_tokens: r.input_tokens,
            output_tokens: r.output_tokens,
            bucket: r.true_bucket.label(),
            ttft_ms,
            tpot_ms,
            attained: ttft_ok && tpot_ok,
            placement: r.placement_string(),
            ttft_ok,
            tpot_ok,
        }
    }
}

/// Mean inter-token time after the first token; 0 for single-token outputs.
pub fn tpot(decode_ms: Millis, output_tokens: u32) -> f64 {
    if output_tokens <= 1 {
        0.0
    } else {
        decode_ms as f64 / (output_tokens - 1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Attainment {
    pub overall: f64,
    pub ttft: f64,
    pub tpot: f64,
}

/// Attainment over all arrived requests. Requests unfinished at the horizon
/// count as violations; an empty set attains vacuously.
pub fn slo_attainment(records: &[LatencyRecord]) -> Attainment {
    if records.is_empty() {
        return Attainment { overall: 1.0, ttft: 1.0, tpot: 1.0 };
    }
    let n = records.len() as f64;
    let frac = |f: fn(&LatencyRecord) -> bool| records.iter().filter(|r| f(r)).count() as f64 / n;
    Attainment { overall: frac(|r| r.attained), ttft: frac(|r| r.ttft_ok), tpot: frac(|r| r.tpot_ok) }
}

/// Alive interval of one instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceLifetime {
    pub start_ms: Millis,
    pub end_ms: Option<Millis>,
    pub gpus: u32,
}

/// Time-weighted mean of allocated GPUs over `[0, horizon]`.
pub fn avg_gpu_usage(lifetimes: &[InstanceLifetime], horizon: Millis) -> f64 {
    if horizon == 0 {
        return lifetimes.iter().filter(|l| l.start_ms == 0 && l.end_ms != Some(0)).map(|l| l.gpus as f64).sum();
    }
    let gpu_ms: f64 = lifetimes
        .iter()
        .map(|l| {
            let end = l.end_ms.unwrap_or(horizon).min(horizon);
            end.saturating_sub(l.start_ms.min(horizon)) as f64 * l.gpus as f64
        })
        .sum();
    gpu_ms / horizon as f64
}

/// Cluster state sampled once per scaler tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickSample {
    pub time_ms: Millis,
    /// Starting or ready.
    pub prefillers: u32,
    pub regular_decoders: u32,
    pub convertible_decoders: u32,
    pub ready_prefillers: u32,
    pub ready_decoders: u32,
    /// Busy share of ready prefillers over the past tick.
    pub prefill_busy_fraction: f64,
    /// Mean KV occupancy of ready decoders over the past tick.
    pub decode_mem_utilization: f64,
    pub pending_prefill: u32,
    pub gpus: u32,
}

/// Required prefillers and decoders per tick of an overprovisioned run:
/// utilization times the provisioned count.
pub fn required_instances_series(companion: Option<&[TickSample]>) -> Result<(Vec<f64>, Vec<f64>), MetricsError> {
    let ticks = companion.ok_or(MetricsError::MissingCompanion)?;
    Ok(ticks
        .iter()
        .map(|t| {
            (t.prefill_busy_fraction * t.ready_prefillers as f64, t.decode_mem_utilization * t.ready_decoders as f64)
        })
        .unzip())
}

/// Product-moment correlation coefficient.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(MetricsError::Undefined("fewer than two points"));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return Err(MetricsError::Undefined("zero variance"));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Nearest-rank percentile; `None` for an empty sample.
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    Some(v[rank.min(v.len()) - 1])
}

/// Everything one run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    pub policy: String,
    pub seed: u64,
    pub trace: String,
    pub horizon_ms: Millis,
    pub records: Vec<LatencyRecord>,
    pub lifetimes: Vec<InstanceLifetime>,
    pub ticks: Vec<TickSample>,
    pub decisions: Vec<ScalingDecision>,
    pub convertible_count: u32,
    pub pearson_prefill: Option<f64>,
    pub pearson_decode: Option<f64>,
}

/// Summary file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub slo_attainment_overall: f64,
    pub slo_attainment_ttft: f64,
    pub slo_attainment_tpot: f64,
    pub avg_gpus: f64,
    pub pearson_prefill: Option<f64>,
    pub pearson_decode: Option<f64>,
    pub policy: String,
    pub seed: u64,
    pub trace: String,
    pub horizon_ms: Millis,
    pub requests: usize,
    pub completed: usize,
    pub convertible_count: u32,
    pub ttft_p99_ms: Option<f64>,
    pub tpot_p99_ms: Option<f64>,
}

impl SimReport {
    pub fn attainment(&self) -> Attainment {
        slo_attainment(&self.records)
    }

    pub fn avg_gpus(&self) -> f64 {
        avg_gpu_usage(&self.lifetimes, self.horizon_ms)
    }

    /// Attainment restricted to requests arriving in `[from, to)`.
    pub fn attainment_between(&self, from: Millis, to: Millis) -> Attainment {
        let subset: Vec<_> = self.records.iter().filter(|r| (from..to).contains(&r.arrival_ms)).cloned().collect();
        slo_attainment(&subset)
    }

    pub fn summary(&self) -> Summary {
        let a = self.attainment();
        let ttfts: Vec<f64> = self.records.iter().filter_map(|r| r.ttft_ms.map(|t| t as f64)).collect();
        let tpots: Vec<f64> = self.records.iter().filter_map(|r| r.tpot_ms).collect();
        Summary {
            slo_attainment_overall: a.overall,
            slo_attainment_ttft: a.ttft,
            slo_attainment_tpot: a.tpot,
            avg_gpus: self.avg_gpus(),
            pearson_prefill: self.pearson_prefill,
            pearson_decode: self.pearson_decode,
            policy: self.policy.clone(),
            seed: self.seed,
            trace: self.trace.clone(),
            horizon_ms: self.horizon_ms,
            requests: self.records.len(),
            completed: tpots.len(),
            convertible_count: self.convertible_count,
            ttft_p99_ms: percentile(&ttfts, 99.0),
            tpot_p99_ms: percentile(&tpots, 99.0),
        }
    }

    /// Provisioned counts per tick from this run.
    pub fn provisioned_series(&self) -> (Vec<f64>, Vec<f64>) {
        self.ticks.iter().map(|t| (t.prefillers as f64, (t.regular_decoders + t.convertible_decoders) as f64)).unzip()
    }

    /// Correlates this run's provisioning with the requirement measured in
    /// an overprovisioned companion run of the same trace.
    pub fn correlate_with(&mut self, companion: &SimReport) -> Result<(), MetricsError> {
        let (req_p, req_d) = required_instances_series(Some(&companion.ticks))?;
        let (prov_p, prov_d) = self.provisioned_series();
        let n = prov_p.len().min(req_p.len());
        self.pearson_prefill = pearson(&prov_p[..n], &req_p[..n]).ok();
        self.pearson_decode = pearson(&prov_d[..n], &req_d[..n]).ok();
        Ok(())
    }
}

const REQUEST_HEADER: &str = "id,arrival_ms,input_tokens,output_tokens,bucket,ttft_ms,tpot_ms,attained,placement";

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_requests_csv(records: &[LatencyRecord], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "{REQUEST_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.id,
            r.arrival_ms,
            r.input_tokens,
            r.output_tokens,
            r.bucket,
            opt(r.ttft_ms),
            opt(r.tpot_ms.map(|t| format!("{t:.3}"))),
            r.attained,
            r.placement
        )?;
    }
    Ok(())
}

pub fn write_ticks_csv(ticks: &[TickSample], w: impl Write) -> std::io::Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    for t in ticks {
        w.serialize(t)?;
    }
    w.flush()
}

pub fn write_decisions_csv(decisions: &[ScalingDecision], w: impl Write) -> std::io::Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    for d in decisions {
        w.serialize(d)?;
    }
    w.flush()
}

pub fn summary_json(summary: &Summary) -> String {
    let mut s = serde_json::to_string_pretty(summary).expect("summary serializes");
    s.push('\n');
    s
}

/// Writes `summary.json`, `requests.csv`, `timeseries.csv`, and
/// `decisions.csv` into `dir`.
pub fn emit_report(report: &SimReport, dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, f: &dyn Fn(&mut Vec<u8>) -> std::io::Result<()>| -> Result<(), Error> {
        let path = dir.join(name);
        let mut buf = vec![];
        f(&mut buf).map_err(|e| Error::io(&path, e))?;
        std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))
    };
    write("summary.json", &|b| b.write_all(summary_json(&report.summary()).as_bytes()))?;
    write("requests.csv", &|b| write_requests_csv(&report.records, b))?;
    write("timeseries.csv", &|b| write_ticks_csv(&report.ticks, b))?;
    write("decisions.csv", &|b| write_decisions_csv(&report.decisions, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(input: u32, ttft: Option<Millis>, tpot: Option<f64>) -> LatencyRecord {
        let slo = SloPolicy::default();
        let ttft_ok = ttft.is_some_and(|t| t <= slo.ttft_slo_ms(input));
        let tpot_ok = tpot.is_some_and(|t| t <= slo.tpot_ms);
        LatencyRecord {
            id: 0,
            arrival_ms: 0,
            input_tokens: input,
            output_tokens: 10,
            bucket: "S-S".into(),
            ttft_ms: ttft,
            tpot_ms: tpot,
            attained: ttft_ok && tpot_ok,
            placement: String::new(),
            ttft_ok,
            tpot_ok,
        }
    }

    #[test]
    fn attainment_examples() {
        assert!(rec(200, Some(240), Some(90.0)).attained);
        let r = rec(500, Some(401), Some(50.0));
        assert!(!r.ttft_ok && r.tpot_ok && !r.attained);
        assert_eq!(slo_attainment(&[]), Attainment { overall: 1.0, ttft: 1.0, tpot: 1.0 });
    }

    #[test]
    fn unfinished_requests_violate() {
        let a = slo_attainment(&[rec(100, Some(10), Some(10.0)), rec(100, Some(10), None), rec(100, None, None)]);
        assert!((a.overall - 1.0 / 3.0).abs() < 1e-12);
        assert!((a.ttft - 2.0 / 3.0).abs() < 1e-12);
        assert!(a.overall <= a.ttft.min(a.tpot));
    }

    #[test]
    fn tpot_convention() {
        assert_eq!(tpot(500, 1), 0.0);
        assert_eq!(tpot(500, 6), 100.0);
    }

    #[test]
    fn gpu_usage_examples() {
        let whole = |gpus| InstanceLifetime { start_ms: 0, end_ms: None, gpus };
        assert_eq!(avg_gpu_usage(&[whole(1), whole(1)], 1000), 2.0);
        let half = InstanceLifetime { start_ms: 500, end_ms: None, gpus: 2 };
        assert_eq!(avg_gpu_usage(&[whole(1), half], 1000), 2.0);
        assert_eq!(avg_gpu_usage(&[whole(4)], 1000), 4.0);
    }

    #[test]
    fn gpu_usage_ignores_order() {
        let a = InstanceLifetime { start_ms: 0, end_ms: Some(300), gpus: 1 };
        let b = InstanceLifetime { start_ms: 100, end_ms: None, gpus: 4 };
        assert_eq!(avg_gpu_usage(&[a, b], 1000), avg_gpu_usage(&[b, a], 1000));
    }

    fn tick(busy: f64, ready_p: u32, mem: f64, ready_d: u32) -> TickSample {
        TickSample {
            time_ms: 0,
            prefillers: ready_p,
            regular_decoders: ready_d,
            convertible_decoders: 0,
            ready_prefillers: ready_p,
            ready_decoders: ready_d,
            prefill_busy_fraction: busy,
            decode_mem_utilization: mem,
            pending_prefill: 0,
            gpus: 0,
        }
    }

    #[test]
    fn required_series() {
        let (p, d) = required_instances_series(Some(&[tick(0.5, 4, 0.0, 2), tick(1.0, 4, 1.0, 2)])).unwrap();
        assert_eq!(p, vec![2.0, 4.0]);
        assert_eq!(d, vec![0.0, 2.0]);
        assert_eq!(required_instances_series(None), Err(MetricsError::MissingCompanion));
    }

    #[test]
    fn pearson_examples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((pearson(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        // deviations (-1.5,-.5,.5,1.5)·(-3,-1,0,4) = 11; norms √5, √26
        assert!((pearson(&a, &[2.0, 4.0, 5.0, 9.0]).unwrap() - 11.0 / 130f64.sqrt()).abs() < 1e-12);
        assert!(pearson(&a, &[1.0; 4]).is_err());
        assert!(pearson(&a, &[1.0; 3]).is_err());
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 99.0), Some(99.0));
        assert_eq!(percentile(&v, 100.0), Some(100.0));
        assert_eq!(percentile(&[], 99.0), None);
    }

    use proptest::prelude::*;
    proptest! {
        #[test]
        fn pearson_symmetric_and_affine_invariant(
            pts in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 3..40),
            scale in 0.1f64..10.0,
            shift in -50.0f64..50.0,
        ) {
            let (a, b): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
            if let Ok(r) = pearson(&a, &b) {
                prop_assert!((pearson(&b, &a).unwrap() - r).abs() < 1e-9);
                let a2: Vec<f64> = a.iter().map(|x| x * scale + shift).collect();
                prop_assert!((pearson(&a2, &b).unwrap() - r).abs() < 1e-6);
            }
        }
    }
}
