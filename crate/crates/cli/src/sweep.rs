//! Grid sweeps: one independent simulation per point, run in parallel.

use std::path::Path;

use anyhow::Context;
use livepp::cluster::enumerate_configs;
use livepp::coordinator::config_budget;
use livepp::engine::{score, Metrics, Scenario, ScenarioError, Simulation};
use livepp::units::parse_rate;
use rayon::prelude::*;
use serde::Serialize;

use crate::output::{metric_fields, write_json, METRIC_COLUMNS, SCHEMA_VERSION};
use crate::{Axis, Failure};

struct Point {
    label: String,
    rate: f64,
    stacking: u32,
    scenario: Result<Scenario, String>,
}

struct Row {
    point: Point,
    result: Option<(Metrics, &'static str)>,
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::ConfigGrid => "config-grid",
            Axis::RateGrid => "rate-grid",
            Axis::StackingGrid => "stacking-grid",
        }
    }
}

fn bad_values(message: String) -> Failure {
    Failure::Validation(ScenarioError {
        field: "--values".into(),
        message,
    })
}

fn point(label: String, sc: Scenario) -> Point {
    let scenario = sc.validate().map(|_| sc.clone()).map_err(|e| e.to_string());
    Point {
        label,
        rate: sc.workload.rate,
        stacking: sc.model.stacking_factor,
        scenario,
    }
}

fn grid(sc: &Scenario, axis: Axis, values: &[String]) -> Result<Vec<Point>, Failure> {
    let mut points = Vec::new();
    match axis {
        Axis::ConfigGrid => {
            if !values.is_empty() {
                return Err(bad_values("config-grid takes no values".into()));
            }
            let k = sc.model.stacking_factor;
            for cfg in enumerate_configs(sc.model.num_layers, sc.cluster.len(), k) {
                let mut s = sc.clone();
                s.initial = cfg.clone();
                s.triggers.clear();
                let feasible = config_budget(&cfg, &s.cluster, &s.model, s.engine.util).is_ok_and(|b| b > 0);
                let mut p = point(cfg.to_string(), s);
                if !feasible {
                    p.scenario = Err("infeasible".into());
                }
                points.push(p);
            }
            if !sc.triggers.is_empty() {
                points.push(point("live".into(), sc.clone()));
            }
        }
        Axis::RateGrid => {
            if values.is_empty() {
                return Err(bad_values("rate-grid needs --values, e.g. \"1 req/s,2 req/s\"".into()));
            }
            for v in values {
                let rate = parse_rate(v).map_err(|e| bad_values(e.to_string()))?;
                let mut s = sc.clone();
                s.workload.rate = rate;
                points.push(point(format!("{rate} req/s"), s));
            }
        }
        Axis::StackingGrid => {
            let ks: Vec<u32> = if values.is_empty() {
                vec![1, 2, 4, 8]
            } else {
                values
                    .iter()
                    .map(|v| v.trim().parse().map_err(|_| bad_values(format!("bad stacking factor {v:?}"))))
                    .collect::<Result<_, _>>()?
            };
            for k in ks {
                let mut s = sc.clone();
                s.model.stacking_factor = k;
                points.push(point(format!("k={k}"), s));
            }
        }
    }
    Ok(points)
}

#[derive(Serialize)]
struct SweepSummary {
    schema_version: u32,
    axis: &'static str,
    points: usize,
    runnable: usize,
    best: Option<String>,
}

pub fn cmd_sweep(sc: Scenario, axis: Axis, values: &[String], dir: &Path) -> Result<(), Failure> {
    let points = grid(&sc, axis, values)?;
    let rows: Vec<Row> = points
        .into_par_iter()
        .map(|p| {
            let result = p.scenario.as_ref().ok().map(|s| {
                let r = Simulation::new(s.clone()).run();
                (r.metrics, r.ended)
            });
            Row { point: p, result }
        })
        .collect();
    let run: Vec<Metrics> = rows.iter().filter_map(|r| r.result.as_ref().map(|x| x.0.clone())).collect();
    let scores = if run.is_empty() { Vec::new() } else { score(&run) };

    let path = dir.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
    let mut header = vec!["schema_version", "axis", "point", "rate_req_s", "stacking", "status"];
    header.extend(METRIC_COLUMNS);
    header.push("score");
    w.write_record(&header).context("writing sweep table")?;
    let mut next_score = scores.iter();
    let mut best: Option<(f64, String)> = None;
    for r in &rows {
        let status = match (&r.point.scenario, &r.result) {
            (_, Some(_)) => "ok".to_string(),
            (Err(e), None) => e.clone(),
            (Ok(_), None) => unreachable!("runnable points are run"),
        };
        let mut rec = vec![
            SCHEMA_VERSION.to_string(),
            axis.name().to_string(),
            r.point.label.clone(),
            r.point.rate.to_string(),
            r.point.stacking.to_string(),
            status,
        ];
        match &r.result {
            Some((m, ended)) => {
                rec.extend(metric_fields(m, ended));
                let s = *next_score.next().expect("one score per run");
                if best.as_ref().is_none_or(|(b, _)| s > *b) {
                    best = Some((s, r.point.label.clone()));
                }
                rec.push(s.to_string());
            }
            None => rec.extend(std::iter::repeat_n(String::new(), METRIC_COLUMNS.len() + 1)),
        }
        w.write_record(&rec).context("writing sweep table")?;
    }
    w.flush().context("writing sweep table")?;
    let summary = SweepSummary {
        schema_version: SCHEMA_VERSION,
        axis: axis.name(),
        points: rows.len(),
        runnable: run.len(),
        best: best.map(|b| b.1),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    eprintln!(
        "{} points ({} runnable); outputs in {}",
        summary.points,
        summary.runnable,
        dir.display()
    );
    Ok(())
}
