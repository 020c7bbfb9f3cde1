//! Metrics derived from a finished trace, and cross-run scoring.

use serde::Serialize;

use super::trace::{Event, Trace};
use crate::units::SimTime;

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Metrics {
    pub completed: usize,
    pub ttft_mean: f64,
    pub ttft_p99: f64,
    /// Macro average of per-request TPOT; requests with one output token are excluded.
    pub tpot_mean: f64,
    /// Input plus output tokens per second of makespan.
    pub throughput: f64,
    pub makespan: f64,
    /// Total commit pause over all reconfigurations.
    pub stop_time: f64,
    /// Trigger to outcome, summed over reconfigurations.
    pub migration_time: f64,
    /// Written KV positions over allocated positions, across completed requests.
    pub effective_kv_utilization: f64,
    pub kv_overflows: usize,
    pub preemptions: usize,
    pub reconfigurations: usize,
    pub outcome: String,
}

/// Per-request TPOT, defined for `output ≥ 2`.
pub fn tpot(first_token: SimTime, completion: SimTime, output: u32) -> Option<f64> {
    (output >= 2).then(|| (completion - first_token).as_secs_f64() / (output - 1) as f64)
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (p * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn compute_metrics(trace: &Trace) -> Metrics {
    let mut m = Metrics::default();
    let mut ttfts = Vec::new();
    let mut tpots = Vec::new();
    let mut tokens = 0u64;
    let mut first_arrival: Option<SimTime> = None;
    let mut last_completion = SimTime::ZERO;
    let mut share = 0u64;
    let (mut written, mut allocated) = (0u64, 0u64);
    let mut outcomes = Vec::new();
    for (t, e) in trace.events() {
        match e {
            Event::RunStart { layer_share, .. } => share = *layer_share as u64,
            Event::Arrival { .. } => {
                first_arrival.get_or_insert(t);
            }
            Event::Complete {
                arrival_ns,
                first_token_ns,
                input,
                output,
                kv_positions,
                kv_blocks,
                ..
            } => {
                m.completed += 1;
                ttfts.push((first_token_ns - arrival_ns) as f64 / 1e9);
                if let Some(x) = tpot(SimTime(*first_token_ns), t, *output) {
                    tpots.push(x);
                }
                tokens += (*input + *output) as u64;
                last_completion = last_completion.max(t);
                written += *kv_positions as u64;
                allocated += *kv_blocks as u64 * share;
            }
            Event::KvOverflow { .. } => m.kv_overflows += 1,
            Event::Preempt { .. } => m.preemptions += 1,
            Event::Pause { duration_ns, .. } => m.stop_time += *duration_ns as f64 / 1e9,
            Event::Outcome {
                outcome, migration_ns, ..
            } => {
                m.reconfigurations += 1;
                m.migration_time += *migration_ns as f64 / 1e9;
                outcomes.push(*outcome);
            }
            Event::Deadlock { .. } => outcomes.push("deadlock"),
            _ => {}
        }
    }
    if !ttfts.is_empty() {
        m.ttft_mean = ttfts.iter().sum::<f64>() / ttfts.len() as f64;
        ttfts.sort_by(f64::total_cmp);
        m.ttft_p99 = percentile(&ttfts, 0.99);
    }
    if !tpots.is_empty() {
        m.tpot_mean = tpots.iter().sum::<f64>() / tpots.len() as f64;
    }
    m.makespan = last_completion
        .saturating_sub(first_arrival.unwrap_or(SimTime::ZERO))
        .as_secs_f64();
    if m.makespan > 0.0 {
        m.throughput = tokens as f64 / m.makespan;
    }
    m.effective_kv_utilization = if allocated == 0 {
        1.0
    } else {
        written as f64 / allocated as f64
    };
    m.outcome = if outcomes.is_empty() {
        "none".into()
    } else {
        outcomes.join("+")
    };
    m
}

/// Composite score per row: min-max normalized TTFT (inverted), TPOT
/// (inverted) and throughput, averaged. A metric with no spread scores 1.0.
pub fn score(rows: &[Metrics]) -> Vec<f64> {
    let norm = |vals: Vec<f64>, lower_better: bool| -> Vec<f64> {
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        vals.iter()
            .map(|&v| {
                if hi == lo {
                    1.0
                } else if lower_better {
                    (hi - v) / (hi - lo)
                } else {
                    (v - lo) / (hi - lo)
                }
            })
            .collect()
    };
    let t = norm(rows.iter().map(|r| r.ttft_mean).collect(), true);
    let p = norm(rows.iter().map(|r| r.tpot_mean).collect(), true);
    let x = norm(rows.iter().map(|r| r.throughput).collect(), false);
    (0..rows.len()).map(|i| (t[i] + p[i] + x[i]) / 3.0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(ttft: f64, tpot: f64, tp: f64) -> Metrics {
        Metrics {
            ttft_mean: ttft,
            tpot_mean: tpot,
            throughput: tp,
            ..Metrics::default()
        }
    }

    #[test]
    fn tpot_definition() {
        assert_eq!(tpot(SimTime::ZERO, SimTime::from_millis(5), 1), None);
        let x = tpot(SimTime::from_millis(2000), SimTime::from_millis(10_000), 17).unwrap();
        assert!((x - 0.5).abs() < 1e-12);
    }

    #[test]
    fn score_extremes() {
        let s = score(&[row(1.0, 0.1, 100.0), row(2.0, 0.2, 50.0), row(1.5, 0.15, 75.0)]);
        assert_eq!(s[0], 1.0);
        assert_eq!(s[1], 0.0);
        assert!((s[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn degenerate_range_scores_one() {
        let s = score(&[row(1.0, 0.1, 10.0), row(1.0, 0.1, 10.0)]);
        assert_eq!(s, vec![1.0, 1.0]);
        assert_eq!(score(&[row(3.0, 0.3, 7.0)]), vec![1.0]);
    }

    #[test]
    fn trace_metrics() {
        let mut tr = Trace::default();
        tr.push(
            SimTime::ZERO,
            Event::RunStart {
                gpus: 1,
                layer_share: 16,
                capacity_blocks: 10,
                config: "4".into(),
            },
        );
        tr.push(SimTime::ZERO, Event::Arrival { req: 0, input: 3, output: 17 });
        tr.push(
            SimTime::from_millis(10_000),
            Event::Complete {
                req: 0,
                arrival_ns: 0,
                first_token_ns: 2_000_000_000,
                input: 3,
                output: 17,
                kv_positions: 20,
                kv_blocks: 2,
            },
        );
        let m = compute_metrics(&tr);
        assert_eq!(m.completed, 1);
        assert!((m.ttft_mean - 2.0).abs() < 1e-12);
        assert!((m.tpot_mean - 0.5).abs() < 1e-12);
        assert!((m.throughput - 2.0).abs() < 1e-12);
        assert!((m.effective_kv_utilization - 20.0 / 32.0).abs() < 1e-12);
        assert_eq!(m.stop_time, 0.0);
    }
}
