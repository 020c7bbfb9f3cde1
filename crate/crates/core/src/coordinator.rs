//! Reconfiguration plans, feasibility, and phase bookkeeping.
//!
//! The effects of each phase (resizing stores, staging weights, running
//! migration pairs, committing) are carried out by the simulation in
//! [`crate::engine`]; this module owns the pure parts and the phase order.

use std::fmt;

use serde::Serialize;

use crate::cluster::{diff_configs, max_blocks, ConfigDiff, GpuId, GpuSpec, ModelSpec, PpConfig, UtilRatio};
use crate::units::SimTime;

pub const DEFAULT_TAU: u64 = 50;

pub fn default_poll_interval() -> SimTime {
    SimTime::from_millis(10)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReconfigPlan {
    pub c_cur: PpConfig,
    pub c_tgt: PpConfig,
    pub diff: ConfigDiff,
    pub b_cur: u64,
    pub b_shrink: u64,
    pub b_new: u64,
    pub tau: u64,
    pub poll_interval: SimTime,
}

impl ReconfigPlan {
    pub fn shrinks(&self) -> bool {
        self.b_shrink < self.b_cur
    }

    pub fn is_noop(&self) -> bool {
        self.diff.is_noop()
    }

    /// Destinations polled for convergence.
    pub fn destinations(&self) -> impl Iterator<Item = GpuId> + '_ {
        self.diff.m_add.keys().copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum InfeasibleReason {
    #[error("{gpu}: layer weights exceed the memory budget by {shortfall} bytes")]
    WeightsDoNotFit { gpu: GpuId, shortfall: u64 },
    #[error("insufficient memory for reconfiguration: {b_used} blocks in use, intermediate budget {b_shrink}")]
    InsufficientBlocks { b_used: u64, b_shrink: u64 },
    #[error("current and target configurations use different GPUs")]
    GpuSetMismatch,
}

fn budget(config_sets: &crate::cluster::LayerAssignmentMap, cluster: &[GpuSpec], model: &ModelSpec, u: UtilRatio) -> Result<u64, InfeasibleReason> {
    let mut b = u64::MAX;
    for (gpu, layers) in config_sets {
        if layers.is_empty() {
            continue;
        }
        let spec = cluster
            .iter()
            .find(|g| g.id == *gpu)
            .expect("configuration validated against cluster");
        let m = max_blocks(spec, layers.len() as u32, model, u).map_err(|e| InfeasibleReason::WeightsDoNotFit {
            gpu: *gpu,
            shortfall: e.shortfall,
        })?;
        b = b.min(m);
    }
    Ok(b)
}

/// Uniform block budget for running `config`.
pub fn config_budget(config: &PpConfig, cluster: &[GpuSpec], model: &ModelSpec, u: UtilRatio) -> Result<u64, InfeasibleReason> {
    budget(&config.layer_sets(), cluster, model, u)
}

/// Phase 1: derived maps and block budgets, or the reason to abort.
#[allow(clippy::too_many_arguments)]
pub fn feasibility(
    c_cur: &PpConfig,
    c_tgt: &PpConfig,
    cluster: &[GpuSpec],
    model: &ModelSpec,
    u: UtilRatio,
    b_used: u64,
    b_cur: u64,
    tau: u64,
    poll_interval: SimTime,
) -> Result<ReconfigPlan, InfeasibleReason> {
    let cur_gpus: std::collections::BTreeSet<GpuId> = c_cur.gpus().collect();
    let tgt_gpus: std::collections::BTreeSet<GpuId> = c_tgt.gpus().collect();
    if cur_gpus != tgt_gpus {
        return Err(InfeasibleReason::GpuSetMismatch);
    }
    let diff = diff_configs(c_cur, c_tgt);
    let b_shrink = budget(&diff.c_int, cluster, model, u)?;
    if b_used > b_shrink {
        return Err(InfeasibleReason::InsufficientBlocks { b_used, b_shrink });
    }
    let b_new = config_budget(c_tgt, cluster, model, u)?;
    Ok(ReconfigPlan {
        c_cur: c_cur.clone(),
        c_tgt: c_tgt.clone(),
        diff,
        b_cur,
        b_shrink,
        b_new,
        tau,
        poll_interval,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Idle,
    Feasibility,
    Resizing,
    Migrating,
    Converging,
    Committing,
    Done,
    Aborted,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Idle => "idle",
            Phase::Feasibility => "feasibility",
            Phase::Resizing => "resizing",
            Phase::Migrating => "migrating",
            Phase::Converging => "converging",
            Phase::Committing => "committing",
            Phase::Done => "done",
            Phase::Aborted => "aborted",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "outcome", content = "reason", rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Infeasible(String),
    Failed(String),
}

impl Outcome {
    pub fn label(&self) -> &'static str {
        match self {
            Outcome::Success => "success",
            Outcome::Infeasible(_) => "infeasible",
            Outcome::Failed(_) => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReconfigStatus {
    pub phase: Phase,
    pub timestamps: Vec<(Phase, SimTime)>,
    pub outcome: Option<Outcome>,
}

impl Default for ReconfigStatus {
    fn default() -> Self {
        ReconfigStatus {
            phase: Phase::Idle,
            timestamps: Vec::new(),
            outcome: None,
        }
    }
}

impl ReconfigStatus {
    /// Moves to `next`. Phases only move forward; `Aborted` is reachable
    /// from any unfinished phase.
    pub fn advance(&mut self, next: Phase, now: SimTime) {
        let ok = match next {
            Phase::Aborted => !matches!(self.phase, Phase::Done | Phase::Aborted),
            _ => next > self.phase && self.phase != Phase::Aborted,
        };
        assert!(ok, "illegal phase transition {} -> {}", self.phase, next);
        self.phase = next;
        self.timestamps.push((next, now));
    }

    pub fn entered(&self, phase: Phase) -> Option<SimTime> {
        self.timestamps.iter().find(|(p, _)| *p == phase).map(|(_, t)| *t)
    }

    pub fn is_active(&self) -> bool {
        !matches!(self.phase, Phase::Idle | Phase::Done | Phase::Aborted)
    }
}
