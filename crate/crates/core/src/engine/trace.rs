//! Event trace: one typed record per simulator state change.

use std::io::{self, Write};

use serde::Serialize;

use crate::cluster::GpuId;
use crate::fabric::FabricRecord;
use crate::kv::RequestId;
use crate::units::SimTime;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind")]
pub enum Event {
    RunStart {
        gpus: u32,
        layer_share: u32,
        capacity_blocks: u64,
        config: String,
    },
    Arrival {
        req: RequestId,
        input: u32,
        output: u32,
    },
    Admit {
        req: RequestId,
        incarnation: u32,
    },
    FirstToken {
        req: RequestId,
    },
    Complete {
        req: RequestId,
        arrival_ns: u64,
        first_token_ns: u64,
        input: u32,
        output: u32,
        kv_positions: u32,
        kv_blocks: u32,
    },
    KvOverflow {
        req: RequestId,
        needed: u64,
        free: u64,
    },
    Preempt {
        req: RequestId,
    },
    StageStart {
        mb: u64,
        stage: u32,
        gpu: GpuId,
        epoch: u32,
        first_layer: u32,
        last_layer: u32,
        tokens: u32,
    },
    StageEnd {
        mb: u64,
        stage: u32,
        gpu: GpuId,
        epoch: u32,
    },
    Transfer {
        xfer: u64,
        src: GpuId,
        dst: GpuId,
        group: &'static str,
        bytes: u64,
    },
    TransferEnd {
        xfer: u64,
    },
    Lock {
        op: u64,
        gpu: GpuId,
        acquired: bool,
    },
    Handshake {
        op: u64,
        phase: &'static str,
        attempt: u32,
    },
    Trigger {
        index: usize,
        target: String,
    },
    Phase {
        phase: &'static str,
    },
    Plan {
        b_cur: u64,
        b_shrink: u64,
        b_new: u64,
        b_used: u64,
    },
    CompactKV {
        gpu: GpuId,
        free_blocks: u64,
    },
    ResizeKV {
        gpu: GpuId,
        blocks: u64,
    },
    AddLayerWeights {
        gpu: GpuId,
        layers: Vec<u32>,
    },
    WeightStaged {
        gpu: GpuId,
        layer: u32,
    },
    StartKVMigration {
        src: GpuId,
        dst: GpuId,
        layers: Vec<u32>,
        seeded_tokens: u64,
    },
    PatchSent {
        src: GpuId,
        dst: GpuId,
        seq: u64,
        tokens: u64,
        bytes: u64,
    },
    PatchApplied {
        src: GpuId,
        dst: GpuId,
        seq: u64,
        tokens: u64,
        t_applied: u64,
    },
    Lag {
        dst: GpuId,
        t_sched: u64,
        t_applied: u64,
    },
    CommitStart {
        gate_lag: u64,
        tau: u64,
    },
    FinalSync {
        gate_lag: u64,
        residual_tokens: u64,
        flush_tokens: u64,
        tau: u64,
    },
    SyncAndCommit {
        m_del: Vec<(GpuId, Vec<u32>)>,
        b_new: u64,
        config: String,
    },
    Pause {
        start_ns: u64,
        duration_ns: u64,
        drain_wait_ns: u64,
    },
    WeightEvicted {
        gpu: GpuId,
        layers: Vec<u32>,
        bytes: u64,
    },
    DropKV {
        gpu: GpuId,
        groups: Vec<u32>,
        freed_tokens: u64,
    },
    Rollback {
        reason: String,
        state_before: u64,
        state_after: u64,
    },
    Outcome {
        index: usize,
        outcome: &'static str,
        reason: String,
        migration_ns: u64,
    },
    Deadlock {
        cycle: Vec<(GpuId, u64)>,
    },
    RunEnd {
        completed: usize,
        pending: usize,
    },
}

impl Event {
    pub fn actor(&self) -> String {
        match self {
            Event::Arrival { req, .. }
            | Event::Admit { req, .. }
            | Event::FirstToken { req }
            | Event::Complete { req, .. }
            | Event::KvOverflow { req, .. }
            | Event::Preempt { req } => format!("req{req}"),
            Event::StageStart { gpu, .. }
            | Event::StageEnd { gpu, .. }
            | Event::CompactKV { gpu, .. }
            | Event::ResizeKV { gpu, .. }
            | Event::AddLayerWeights { gpu, .. }
            | Event::WeightStaged { gpu, .. }
            | Event::WeightEvicted { gpu, .. }
            | Event::DropKV { gpu, .. }
            | Event::Lock { gpu, .. } => gpu.to_string(),
            Event::StartKVMigration { src, .. } | Event::PatchSent { src, .. } => src.to_string(),
            Event::PatchApplied { dst, .. } | Event::Lag { dst, .. } => dst.to_string(),
            Event::Transfer { .. } | Event::TransferEnd { .. } | Event::Handshake { .. } | Event::Deadlock { .. } => {
                "fabric".into()
            }
            Event::RunStart { .. } | Event::RunEnd { .. } => "sim".into(),
            _ => "coordinator".into(),
        }
    }

    pub(crate) fn from_fabric(r: &FabricRecord) -> Option<(SimTime, Event)> {
        Some(match *r {
            FabricRecord::Posted { .. } => return None,
            FabricRecord::LockAcquired { at, op, gpu } => (at, Event::Lock { op, gpu, acquired: true }),
            FabricRecord::LockReleased { at, op, gpu } => (at, Event::Lock { op, gpu, acquired: false }),
            FabricRecord::Handshake { at, op, phase, attempt } => (
                at,
                Event::Handshake {
                    op,
                    phase: phase.as_str(),
                    attempt,
                },
            ),
            FabricRecord::TransferStart {
                at,
                xfer,
                src,
                dst,
                group,
                bytes,
            } => (
                at,
                Event::Transfer {
                    xfer,
                    src,
                    dst,
                    group: group.as_str(),
                    bytes,
                },
            ),
            FabricRecord::TransferEnd { at, xfer } => (at, Event::TransferEnd { xfer }),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Record {
    pub t_ns: u64,
    pub actor: String,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Debug, Clone, Default)]
pub struct Trace {
    records: Vec<Record>,
}

impl Trace {
    pub fn push(&mut self, t: SimTime, event: Event) {
        debug_assert!(self.records.last().is_none_or(|r| r.t_ns <= t.0), "trace time went backwards");
        self.records.push(Record {
            t_ns: t.0,
            actor: event.actor(),
            event,
        });
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn events(&self) -> impl Iterator<Item = (SimTime, &Event)> {
        self.records.iter().map(|r| (SimTime(r.t_ns), &r.event))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Writes one JSON object per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("JSON is UTF-8")
    }
}
