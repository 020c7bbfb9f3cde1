//! Output files. Every table and summary carries `schema_version`.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::Context;
use livepp::coordinator::Outcome;
use livepp::engine::{Flags, Metrics, RunResult};
use serde::Serialize;

pub const SCHEMA_VERSION: u32 = 1;

pub const METRIC_COLUMNS: [&str; 14] = [
    "completed",
    "ttft_mean_s",
    "ttft_p99_s",
    "tpot_mean_s",
    "throughput_tok_s",
    "makespan_s",
    "stop_time_s",
    "migration_time_s",
    "effective_kv_utilization",
    "kv_overflows",
    "preemptions",
    "reconfigurations",
    "outcome",
    "ended",
];

pub fn metric_fields(m: &Metrics, ended: &str) -> Vec<String> {
    vec![
        m.completed.to_string(),
        m.ttft_mean.to_string(),
        m.ttft_p99.to_string(),
        m.tpot_mean.to_string(),
        m.throughput.to_string(),
        m.makespan.to_string(),
        m.stop_time.to_string(),
        m.migration_time.to_string(),
        m.effective_kv_utilization.to_string(),
        m.kv_overflows.to_string(),
        m.preemptions.to_string(),
        m.reconfigurations.to_string(),
        m.outcome.clone(),
        ended.to_string(),
    ]
}

pub fn outcome_text(o: &Outcome) -> String {
    match o {
        Outcome::Success => "success".into(),
        Outcome::Infeasible(r) => format!("infeasible ({r})"),
        Outcome::Failed(r) => format!("failed ({r})"),
    }
}

#[derive(Serialize)]
pub struct FlagSummary {
    kv_resize: bool,
    kv_patch: bool,
    async_weights: bool,
    handshake: bool,
}

impl From<Flags> for FlagSummary {
    fn from(f: Flags) -> Self {
        FlagSummary {
            kv_resize: f.kv_resize,
            kv_patch: f.kv_patch,
            async_weights: f.async_weights,
            handshake: f.handshake,
        }
    }
}

#[derive(Serialize)]
struct OutcomeSummary<'a> {
    trigger: usize,
    outcome: &'a Outcome,
}

#[derive(Serialize)]
struct RunSummary<'a> {
    schema_version: u32,
    scenario: String,
    seed: u64,
    flags: FlagSummary,
    ended: &'a str,
    final_config: String,
    outcomes: Vec<OutcomeSummary<'a>>,
    metrics: &'a Metrics,
    trace_records: usize,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(f), value)?;
    Ok(())
}

pub fn write_run(dir: &Path, scenario: &Path, seed: u64, flags: Flags, res: &RunResult) -> anyhow::Result<()> {
    let trace_path = dir.join("trace.jsonl");
    let f = File::create(&trace_path).with_context(|| format!("creating {}", trace_path.display()))?;
    res.trace.write_jsonl(BufWriter::new(f))?;

    let csv_path = dir.join("metrics.csv");
    let mut w = csv::Writer::from_path(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?;
    let mut header = vec!["schema_version", "config"];
    header.extend(METRIC_COLUMNS);
    w.write_record(&header)?;
    let mut row = vec![SCHEMA_VERSION.to_string(), res.final_config.to_string()];
    row.extend(metric_fields(&res.metrics, res.ended));
    w.write_record(&row)?;
    w.flush()?;

    let summary = RunSummary {
        schema_version: SCHEMA_VERSION,
        scenario: scenario.display().to_string(),
        seed,
        flags: flags.into(),
        ended: res.ended,
        final_config: res.final_config.to_string(),
        outcomes: res
            .outcomes
            .iter()
            .map(|(i, o)| OutcomeSummary { trigger: *i, outcome: o })
            .collect(),
        metrics: &res.metrics,
        trace_records: res.trace.len(),
    };
    write_json(&dir.join("summary.json"), &summary)
}
