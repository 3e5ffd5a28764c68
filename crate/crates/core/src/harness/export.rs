use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::metrics::MetricsSummary;
use super::runner::{ExpectationResult, ScenarioOutcome};
use super::HarnessError;

pub const EVENTS_FILE: &str = "events.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const TRACE_FILE: &str = "trace.jsonl";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExportedFiles {
    pub events: PathBuf,
    pub metrics: PathBuf,
    pub trace: PathBuf,
}

#[derive(Serialize)]
struct MetricsDocument<'a> {
    scenario: &'a str,
    seed: u64,
    passed: bool,
    metrics: &'a MetricsSummary,
    counters: &'a std::collections::BTreeMap<String, u64>,
    expectations: &'a [ExpectationResult],
}

/// Writes the event log, metrics and delivery traces into `dir`. The
/// output depends only on the outcome, so equal runs give equal bytes.
pub fn export_results(outcome: &ScenarioOutcome, dir: &Path) -> Result<ExportedFiles, HarnessError> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let files = ExportedFiles {
        events: dir.join(EVENTS_FILE),
        metrics: dir.join(METRICS_FILE),
        trace: dir.join(TRACE_FILE),
    };

    let mut events = Vec::new();
    outcome
        .log()
        .write_jsonl(&mut events)
        .map_err(|e| HarnessError::io(&files.events, e))?;
    fs::write(&files.events, events).map_err(|e| HarnessError::io(&files.events, e))?;

    let doc = MetricsDocument {
        scenario: &outcome.name,
        seed: outcome.seed,
        passed: outcome.passed(),
        metrics: &outcome.metrics,
        counters: &outcome.counters,
        expectations: &outcome.expectations,
    };
    let mut text = serde_json::to_string_pretty(&doc).expect("metrics serialize");
    text.push('\n');
    fs::write(&files.metrics, text).map_err(|e| HarnessError::io(&files.metrics, e))?;

    let mut trace = Vec::new();
    let mut seq = 1;
    for (channel, t) in &outcome.channel_traces {
        seq = t
            .write_jsonl(channel, seq, &mut trace)
            .map_err(|e| HarnessError::io(&files.trace, e))?;
    }
    fs::write(&files.trace, trace).map_err(|e| HarnessError::io(&files.trace, e))?;
    Ok(files)
}
