use std::collections::BTreeMap;

use serde::Serialize;

use crate::platform::EventLog;
use crate::reconfig::STEP_NAMES;

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RegionMetrics {
    pub durations_ms: Vec<f64>,
    pub mean_ms: f64,
    pub sample_std_ms: f64,
}

/// Reconfiguration timing statistics and per-action event counts.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricsSummary {
    /// Durations of every partial reconfiguration, in log order.
    pub durations_ms: Vec<f64>,
    pub mean_ms: f64,
    pub sample_std_ms: f64,
    pub regions: BTreeMap<u8, RegionMetrics>,
    pub counts: BTreeMap<String, u64>,
}

/// Mean and sample standard deviation (n − 1 denominator). Empty input
/// gives zeros and a single sample has zero spread.
pub fn mean_and_sample_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

fn field<'a>(detail: &'a str, key: &str) -> Option<&'a str> {
    detail
        .split_whitespace()
        .find_map(|tok| tok.strip_prefix(key).and_then(|rest| rest.strip_prefix('=')))
}

/// Durations are read from successful programming-step records; reloads
/// and rollbacks are not reconfiguration trials and are excluded.
pub fn collect_metrics(log: &EventLog) -> MetricsSummary {
    let mut m = MetricsSummary::default();
    let step8 = STEP_NAMES[7];
    for r in log.records() {
        *m.counts.entry(r.action.clone()).or_default() += 1;
        if r.action != step8 || r.outcome != "ok" {
            continue;
        }
        let duration = field(&r.detail, "duration_ms").and_then(|v| v.parse::<f64>().ok());
        let region = field(&r.detail, "region").and_then(|v| v.parse::<u8>().ok());
        if let (Some(d), Some(region)) = (duration, region) {
            m.durations_ms.push(d);
            m.regions.entry(region).or_default().durations_ms.push(d);
        }
    }
    (m.mean_ms, m.sample_std_ms) = mean_and_sample_std(&m.durations_ms);
    for r in m.regions.values_mut() {
        (r.mean_ms, r.sample_std_ms) = mean_and_sample_std(&r.durations_ms);
    }
    m
}
