//! Scripted driver for the fabric alone.
//!
//! A script is a set of streams. Each stream issues its steps in order: it
//! waits `delay` after the previous step completed (or after t=0 for the
//! first step), posts the operation, and blocks until it completes.

use std::collections::BTreeMap;

use super::{Fabric, FabricConfig, FabricEvent, FabricRecord, OpId, OpKind};
use crate::cluster::GpuId;
use crate::fabric::GroupKind;
use crate::queue::EventQueue;
use crate::units::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    /// Inference half-operation on the stream's GPU.
    Half { kind: OpKind, peer: GpuId, bytes: u64 },
    /// Migration transfer from the stream's GPU to `dst`.
    Migrate { dst: GpuId, bytes: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Step {
    pub delay: SimTime,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stream {
    pub gpu: GpuId,
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, Default)]
pub struct Script {
    pub streams: Vec<Stream>,
}

impl Script {
    pub fn stream(&mut self, gpu: GpuId) -> &mut Stream {
        self.streams.push(Stream { gpu, steps: Vec::new() });
        self.streams.last_mut().unwrap()
    }
}

impl Stream {
    pub fn then(&mut self, delay: SimTime, action: Action) -> &mut Self {
        self.steps.push(Step { delay, action });
        self
    }
}

#[derive(Debug, Clone)]
pub struct ScriptOutcome {
    /// `(stream, step, completion time)` in completion order.
    pub completions: Vec<(usize, usize, SimTime)>,
    pub deadlock: Option<Vec<(GpuId, OpId)>>,
    pub records: Vec<FabricRecord>,
    pub end_time: SimTime,
    pub finished: bool,
    pub max_inference_wait_on_unaccepted: SimTime,
}

#[derive(Debug, Clone, Copy)]
enum Ev {
    Fabric(FabricEvent),
    Wake(usize),
}

/// Runs `script` to quiescence or until `horizon`.
pub fn run_script(cfg: FabricConfig, script: &Script, horizon: SimTime) -> ScriptOutcome {
    let mut fabric = Fabric::new(cfg);
    let mut q: EventQueue<Ev> = EventQueue::new();
    let mut cursor = vec![0usize; script.streams.len()];
    let mut waiting: BTreeMap<OpId, usize> = BTreeMap::new();
    let mut completions = Vec::new();
    let mut records = Vec::new();
    for (i, s) in script.streams.iter().enumerate() {
        if let Some(step) = s.steps.first() {
            q.push(step.delay, Ev::Wake(i));
        }
    }
    let mut now = SimTime::ZERO;
    loop {
        let out = fabric.take_outbox();
        for (at, ev) in out.schedule {
            q.push(at, Ev::Fabric(ev));
        }
        records.extend(out.records);
        for c in out.completions {
            if let Some(stream) = waiting.remove(&c.op) {
                let step = cursor[stream];
                completions.push((stream, step, c.at));
                cursor[stream] += 1;
                if let Some(next) = script.streams[stream].steps.get(cursor[stream]) {
                    q.push(c.at + next.delay, Ev::Wake(stream));
                }
            }
        }
        let Some(t) = q.peek_time() else { break };
        if t > horizon {
            break;
        }
        let (t, ev) = q.pop().unwrap();
        now = t;
        match ev {
            Ev::Fabric(fe) => fabric.handle(t, fe),
            Ev::Wake(i) => {
                let stream = &script.streams[i];
                let step = stream.steps[cursor[i]];
                let op = match step.action {
                    Action::Half { kind, peer, bytes } => {
                        fabric.post_half(t, stream.gpu, kind, peer, GroupKind::Inference, bytes, i as u64)
                    }
                    Action::Migrate { dst, bytes } => fabric.post_migration(t, stream.gpu, dst, bytes, i as u64),
                };
                waiting.insert(op, i);
            }
        }
    }
    let finished = cursor
        .iter()
        .zip(&script.streams)
        .all(|(&c, s)| c == s.steps.len());
    let deadlock = if q.is_empty() && !finished {
        fabric.detect_deadlock()
    } else {
        None
    };
    ScriptOutcome {
        completions,
        deadlock,
        records,
        end_time: now,
        finished,
        max_inference_wait_on_unaccepted: fabric.max_inference_wait_on_unaccepted(),
    }
}

/// Two GPUs: GPU 0 receives an activation from GPU 1 at t=0, GPU 1 starts a
/// KV migration to GPU 0 at 0.5 ms, and GPU 1 only posts the matching
/// activation send at 1 ms.
pub fn crossed_groups_script(activation_bytes: u64, kv_bytes: u64) -> Script {
    let mut s = Script::default();
    s.stream(GpuId(0)).then(
        SimTime::ZERO,
        Action::Half {
            kind: OpKind::Recv,
            peer: GpuId(1),
            bytes: activation_bytes,
        },
    );
    s.stream(GpuId(1)).then(
        SimTime::from_micros(500),
        Action::Migrate {
            dst: GpuId(0),
            bytes: kv_bytes,
        },
    );
    s.stream(GpuId(1)).then(
        SimTime::from_millis(1),
        Action::Half {
            kind: OpKind::Send,
            peer: GpuId(0),
            bytes: activation_bytes,
        },
    );
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::HandshakePhase;

    fn cfg(handshake: bool) -> FabricConfig {
        FabricConfig {
            handshake,
            ..FabricConfig::new(2)
        }
    }

    #[test]
    fn naive_crossed_groups_deadlock() {
        let out = run_script(cfg(false), &crossed_groups_script(1 << 20, 8 << 20), SimTime::from_millis(100));
        assert!(!out.finished);
        let cycle = out.deadlock.expect("cycle");
        let gpus: std::collections::BTreeSet<_> = cycle.iter().map(|c| c.0).collect();
        assert_eq!(gpus.len(), 2);
    }

    #[test]
    fn handshake_crossed_groups_complete() {
        let out = run_script(cfg(true), &crossed_groups_script(1 << 20, 8 << 20), SimTime::from_millis(100));
        assert!(out.finished);
        assert!(out.deadlock.is_none());
        let phases: Vec<_> = out
            .records
            .iter()
            .filter_map(|r| match r {
                FabricRecord::Handshake { phase, .. } => Some(*phase),
                _ => None,
            })
            .collect();
        assert!(phases.contains(&HandshakePhase::Rejected));
        assert_eq!(phases.last(), Some(&HandshakePhase::Accepted));
    }
}
