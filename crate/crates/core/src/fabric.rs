//! Simulated inter-GPU transport.
//!
//! Every GPU has one device lock that serializes all of its communication
//! operations, whichever group they belong to. An operation on one group
//! therefore stalls every other operation on that GPU until it completes,
//! which is what makes two concurrently used groups prone to circular waits.
//!
//! Inference (stage forwarding) operations are half-operations: a send posted
//! on the source and a recv posted on the destination. Each half blocks until
//! it owns its local lock, then holds it until the peer half matches and the
//! transfer finishes.
//!
//! Migration transfers use the two-phase handshake when enabled: the sender
//! takes its own lock and sends ACK over the control channel; the receiver
//! try-acquires its lock and answers ACCEPT (transfer proceeds with both locks
//! held) or REJECT (sender releases, waits `retry_timeout`, retries). From the
//! second rejection on, the wait gains a deterministic jitter below
//! `retry_timeout`; with fixed waits, two migrations crossing between the same
//! pair of GPUs reject each other in lockstep forever. With the
//! handshake disabled, migrations degrade to plain half-operations on the
//! migration group.
//!
//! The fabric is a passive state machine. Drivers call the `post_*` methods and
//! [`Fabric::handle`], then drain [`Fabric::take_outbox`] for events to
//! schedule, completions, and trace records.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::cluster::GpuId;
use crate::units::{Bandwidth, SimTime};

pub type OpId = u64;
pub type TransferId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GroupKind {
    Inference,
    Migration,
}

impl GroupKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GroupKind::Inference => "inference",
            GroupKind::Migration => "migration",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommGroup {
    pub group_id: u32,
    pub members: BTreeSet<GpuId>,
    pub priority: GroupKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Send,
    Recv,
}

/// How concurrent flows on one link divide its bandwidth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SharingMode {
    /// Migration flows get bandwidth only while no inference flow is active.
    Strict,
    Weighted { inference: f64, migration: f64 },
}

impl SharingMode {
    pub const DEFAULT_WEIGHTED: SharingMode = SharingMode::Weighted {
        inference: 1.0,
        migration: 0.2,
    };

    /// Rates for `(inference_flows, migration_flows)` sharing `capacity`.
    /// Returns per-flow rates `(inference_rate, migration_rate)`.
    pub fn split(self, capacity: f64, inference: usize, migration: usize) -> (f64, f64) {
        match self {
            SharingMode::Strict => {
                if inference > 0 {
                    (capacity / inference as f64, 0.0)
                } else if migration > 0 {
                    (0.0, capacity / migration as f64)
                } else {
                    (0.0, 0.0)
                }
            }
            SharingMode::Weighted {
                inference: wi,
                migration: wm,
            } => {
                let total = wi * inference as f64 + wm * migration as f64;
                if total <= 0.0 {
                    (0.0, 0.0)
                } else {
                    (capacity * wi / total, capacity * wm / total)
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct FabricConfig {
    pub num_gpus: u32,
    pub link_bandwidth: Bandwidth,
    pub link_overrides: BTreeMap<(GpuId, GpuId), Bandwidth>,
    pub control_latency: SimTime,
    pub retry_timeout: SimTime,
    pub handshake: bool,
    pub sharing: SharingMode,
}

impl FabricConfig {
    pub fn new(num_gpus: u32) -> Self {
        FabricConfig {
            num_gpus,
            link_bandwidth: Bandwidth::gbps(100.0),
            link_overrides: BTreeMap::new(),
            control_latency: SimTime::from_micros(100),
            retry_timeout: SimTime::from_millis(1),
            handshake: true,
            sharing: SharingMode::Strict,
        }
    }

    pub fn bandwidth(&self, a: GpuId, b: GpuId) -> Bandwidth {
        let key = (a.min(b), a.max(b));
        self.link_overrides
            .get(&key)
            .copied()
            .unwrap_or(self.link_bandwidth)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HandshakePhase {
    Idle,
    LockHeld,
    AwaitingReply,
    Accepted,
    Rejected,
}

impl HandshakePhase {
    pub fn as_str(self) -> &'static str {
        match self {
            HandshakePhase::Idle => "idle",
            HandshakePhase::LockHeld => "lock_held",
            HandshakePhase::AwaitingReply => "awaiting_reply",
            HandshakePhase::Accepted => "accepted",
            HandshakePhase::Rejected => "rejected",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HandshakeState {
    pub phase: HandshakePhase,
    pub retry_deadline: Option<SimTime>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlMsg {
    Ack,
    Accept,
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FabricEvent {
    Control { op: OpId, msg: ControlMsg },
    Retry { op: OpId },
    TransferDone { xfer: TransferId, generation: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum HalfPhase {
    WaitingLock,
    Holding,
    Transferring,
    Done,
}

/// One posted send or recv.
#[derive(Debug, Clone)]
pub struct TransferOp {
    pub op_id: OpId,
    pub gpu: GpuId,
    pub kind: OpKind,
    pub group: GroupKind,
    pub peer: GpuId,
    pub bytes: u64,
    pub issue_time: SimTime,
    pub complete_time: Option<SimTime>,
    pub tag: u64,
    phase: HalfPhase,
}

#[derive(Debug, Clone)]
struct HandshakeOp {
    src: GpuId,
    dst: GpuId,
    bytes: u64,
    tag: u64,
    issue_time: SimTime,
    state: HandshakeState,
    attempts: u32,
    done: bool,
}

#[derive(Debug, Clone)]
enum Op {
    Half(TransferOp),
    Mig(HandshakeOp),
}

impl Op {
    fn is_done(&self) -> bool {
        match self {
            Op::Half(h) => h.phase == HalfPhase::Done,
            Op::Mig(m) => m.done,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct DeviceLock {
    holder: Option<OpId>,
    queue: VecDeque<OpId>,
}

#[derive(Debug, Clone)]
struct Transfer {
    src: GpuId,
    dst: GpuId,
    group: GroupKind,
    ops: Vec<OpId>,
    remaining: f64,
    rate: f64,
    last_update: SimTime,
    generation: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Completion {
    pub op: OpId,
    pub tag: u64,
    pub at: SimTime,
}

/// Trace-level record of a fabric state change.
#[derive(Debug, Clone, PartialEq)]
pub enum FabricRecord {
    Posted { at: SimTime, op: OpId, gpu: GpuId, peer: GpuId, group: GroupKind, bytes: u64 },
    LockAcquired { at: SimTime, op: OpId, gpu: GpuId },
    LockReleased { at: SimTime, op: OpId, gpu: GpuId },
    Handshake { at: SimTime, op: OpId, phase: HandshakePhase, attempt: u32 },
    TransferStart { at: SimTime, xfer: TransferId, src: GpuId, dst: GpuId, group: GroupKind, bytes: u64 },
    TransferEnd { at: SimTime, xfer: TransferId },
}

#[derive(Debug, Default)]
pub struct Outbox {
    pub schedule: Vec<(SimTime, FabricEvent)>,
    pub completions: Vec<Completion>,
    pub records: Vec<FabricRecord>,
}

#[derive(Debug, Clone)]
pub struct Fabric {
    cfg: FabricConfig,
    locks: Vec<DeviceLock>,
    ops: BTreeMap<OpId, Op>,
    transfers: BTreeMap<TransferId, Transfer>,
    next_op: OpId,
    next_xfer: TransferId,
    outstanding_events: usize,
    outbox_schedule: Vec<(SimTime, FabricEvent)>,
    outbox_completions: Vec<Completion>,
    outbox_records: Vec<FabricRecord>,
    /// Longest time any inference half waited on a lock held by a
    /// migration handshake that had not reached the accepted state.
    max_inference_wait_on_unaccepted: SimTime,
    wait_started: BTreeMap<OpId, SimTime>,
}

impl Fabric {
    pub fn new(cfg: FabricConfig) -> Self {
        let n = cfg.num_gpus as usize;
        Fabric {
            cfg,
            locks: vec![DeviceLock::default(); n],
            ops: BTreeMap::new(),
            transfers: BTreeMap::new(),
            next_op: 0,
            next_xfer: 0,
            outstanding_events: 0,
            outbox_schedule: Vec::new(),
            outbox_completions: Vec::new(),
            outbox_records: Vec::new(),
            max_inference_wait_on_unaccepted: SimTime::ZERO,
            wait_started: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &FabricConfig {
        &self.cfg
    }

    pub fn groups(&self) -> [CommGroup; 2] {
        let members: BTreeSet<GpuId> = (0..self.cfg.num_gpus).map(GpuId).collect();
        [
            CommGroup {
                group_id: 0,
                members: members.clone(),
                priority: GroupKind::Inference,
            },
            CommGroup {
                group_id: 1,
                members,
                priority: GroupKind::Migration,
            },
        ]
    }

    pub fn take_outbox(&mut self) -> Outbox {
        Outbox {
            schedule: std::mem::take(&mut self.outbox_schedule),
            completions: std::mem::take(&mut self.outbox_completions),
            records: std::mem::take(&mut self.outbox_records),
        }
    }

    /// No fabric event is pending; combined with an idle driver this means
    /// nothing can ever fire again.
    pub fn has_pending_events(&self) -> bool {
        self.outstanding_events > 0
    }

    pub fn pending_ops(&self) -> usize {
        self.ops.values().filter(|o| !o.is_done()).count()
    }

    pub fn lock_holder(&self, gpu: GpuId) -> Option<OpId> {
        self.locks[gpu.0 as usize].holder
    }

    pub fn handshake_state(&self, op: OpId) -> Option<HandshakeState> {
        match self.ops.get(&op) {
            Some(Op::Mig(m)) => Some(m.state),
            _ => None,
        }
    }

    pub fn handshake_attempts(&self, op: OpId) -> Option<u32> {
        match self.ops.get(&op) {
            Some(Op::Mig(m)) => Some(m.attempts),
            _ => None,
        }
    }

    pub fn op(&self, op: OpId) -> Option<&TransferOp> {
        match self.ops.get(&op) {
            Some(Op::Half(h)) => Some(h),
            _ => None,
        }
    }

    pub fn max_inference_wait_on_unaccepted(&self) -> SimTime {
        self.max_inference_wait_on_unaccepted
    }

    /// Per-link allocated bandwidth right now, for conservation audits.
    pub fn link_allocations(&self) -> BTreeMap<(GpuId, GpuId), (f64, f64)> {
        let mut out: BTreeMap<(GpuId, GpuId), (f64, f64)> = BTreeMap::new();
        for t in self.transfers.values() {
            let key = (t.src.min(t.dst), t.src.max(t.dst));
            let cap = self.cfg.bandwidth(t.src, t.dst).0;
            let e = out.entry(key).or_insert((0.0, cap));
            e.0 += t.rate;
        }
        out
    }

    fn schedule(&mut self, at: SimTime, ev: FabricEvent) {
        self.outstanding_events += 1;
        self.outbox_schedule.push((at, ev));
    }

    fn alloc_op(&mut self) -> OpId {
        let id = self.next_op;
        self.next_op += 1;
        id
    }

    /// Posts one half of a point-to-point operation on `gpu`.
    #[allow(clippy::too_many_arguments)]
    pub fn post_half(
        &mut self,
        now: SimTime,
        gpu: GpuId,
        kind: OpKind,
        peer: GpuId,
        group: GroupKind,
        bytes: u64,
        tag: u64,
    ) -> OpId {
        assert_ne!(gpu, peer, "self transfers are not modeled");
        let id = self.alloc_op();
        self.ops.insert(
            id,
            Op::Half(TransferOp {
                op_id: id,
                gpu,
                kind,
                group,
                peer,
                bytes,
                issue_time: now,
                complete_time: None,
                tag,
                phase: HalfPhase::WaitingLock,
            }),
        );
        self.outbox_records.push(FabricRecord::Posted {
            at: now,
            op: id,
            gpu,
            peer,
            group,
            bytes,
        });
        self.request_lock(now, id, gpu);
        id
    }

    /// Posts a stage-forwarding transfer as a matched send/recv pair.
    /// Returns `(send_op, recv_op)`.
    pub fn post_inference_transfer(
        &mut self,
        now: SimTime,
        src: GpuId,
        dst: GpuId,
        bytes: u64,
        tag: u64,
    ) -> (OpId, OpId) {
        let s = self.post_half(now, src, OpKind::Send, dst, GroupKind::Inference, bytes, tag);
        let r = self.post_half(now, dst, OpKind::Recv, src, GroupKind::Inference, bytes, tag);
        (s, r)
    }

    /// Posts a KV migration transfer. Returns the op whose completion marks
    /// the end of the transfer (the handshake op, or the send half).
    pub fn post_migration(&mut self, now: SimTime, src: GpuId, dst: GpuId, bytes: u64, tag: u64) -> OpId {
        if !self.cfg.handshake {
            let s = self.post_half(now, src, OpKind::Send, dst, GroupKind::Migration, bytes, tag);
            self.post_half(now, dst, OpKind::Recv, src, GroupKind::Migration, bytes, tag);
            return s;
        }
        assert_ne!(src, dst);
        let id = self.alloc_op();
        self.ops.insert(
            id,
            Op::Mig(HandshakeOp {
                src,
                dst,
                bytes,
                tag,
                issue_time: now,
                state: HandshakeState {
                    phase: HandshakePhase::Idle,
                    retry_deadline: None,
                },
                attempts: 1,
                done: false,
            }),
        );
        self.outbox_records.push(FabricRecord::Posted {
            at: now,
            op: id,
            gpu: src,
            peer: dst,
            group: GroupKind::Migration,
            bytes,
        });
        self.request_lock(now, id, src);
        id
    }

    fn request_lock(&mut self, now: SimTime, op: OpId, gpu: GpuId) {
        let lock = &mut self.locks[gpu.0 as usize];
        if lock.holder.is_none() && lock.queue.is_empty() {
            lock.holder = Some(op);
            self.on_granted(now, op, gpu);
        } else {
            lock.queue.push_back(op);
            self.wait_started.insert(op, now);
        }
    }

    fn release_lock(&mut self, now: SimTime, op: OpId, gpu: GpuId) {
        let lock = &mut self.locks[gpu.0 as usize];
        debug_assert_eq!(lock.holder, Some(op));
        lock.holder = None;
        self.outbox_records.push(FabricRecord::LockReleased { at: now, op, gpu });
        if let Some(next) = self.locks[gpu.0 as usize].queue.pop_front() {
            self.locks[gpu.0 as usize].holder = Some(next);
            if let Some(start) = self.wait_started.remove(&next) {
                if matches!(self.ops.get(&next), Some(Op::Half(h)) if h.group == GroupKind::Inference)
                    && matches!(self.ops.get(&op), Some(Op::Mig(_)))
                {
                    // Only waits behind handshake ops that released without transferring count.
                    if let Some(Op::Mig(m)) = self.ops.get(&op) {
                        if !m.done {
                            let w = now.saturating_sub(start);
                            self.max_inference_wait_on_unaccepted = self.max_inference_wait_on_unaccepted.max(w);
                        }
                    }
                }
            }
            self.on_granted(now, next, gpu);
        }
    }

    fn on_granted(&mut self, now: SimTime, op: OpId, gpu: GpuId) {
        self.outbox_records.push(FabricRecord::LockAcquired { at: now, op, gpu });
        match self.ops.get_mut(&op).expect("granted op exists") {
            Op::Half(h) => {
                h.phase = HalfPhase::Holding;
                self.try_match(now, op);
            }
            Op::Mig(m) => {
                debug_assert_eq!(gpu, m.src);
                m.state.phase = HandshakePhase::LockHeld;
                let attempt = m.attempts;
                self.outbox_records.push(FabricRecord::Handshake {
                    at: now,
                    op,
                    phase: HandshakePhase::LockHeld,
                    attempt,
                });
                if let Some(Op::Mig(m)) = self.ops.get_mut(&op) {
                    m.state.phase = HandshakePhase::AwaitingReply;
                }
                self.outbox_records.push(FabricRecord::Handshake {
                    at: now,
                    op,
                    phase: HandshakePhase::AwaitingReply,
                    attempt,
                });
                let at = now + self.cfg.control_latency;
                self.schedule(at, FabricEvent::Control { op, msg: ControlMsg::Ack });
            }
        }
    }

    fn try_match(&mut self, now: SimTime, op: OpId) {
        let Some(Op::Half(me)) = self.ops.get(&op) else {
            return;
        };
        let (gpu, peer, group, kind) = (me.gpu, me.peer, me.group, me.kind);
        let other = self.ops.iter().find_map(|(&id, o)| match o {
            Op::Half(h)
                if h.phase == HalfPhase::Holding
                    && h.gpu == peer
                    && h.peer == gpu
                    && h.group == group
                    && h.kind != kind =>
            {
                Some(id)
            }
            _ => None,
        });
        let Some(other) = other else {
            return;
        };
        let (send, recv) = if kind == OpKind::Send { (op, other) } else { (other, op) };
        let bytes = match &self.ops[&send] {
            Op::Half(h) => h.bytes,
            Op::Mig(_) => unreachable!(),
        };
        for id in [send, recv] {
            if let Some(Op::Half(h)) = self.ops.get_mut(&id) {
                h.phase = HalfPhase::Transferring;
            }
        }
        let (src, dst) = if kind == OpKind::Send { (gpu, peer) } else { (peer, gpu) };
        self.start_transfer(now, src, dst, group, bytes, vec![send, recv]);
    }

    fn start_transfer(&mut self, now: SimTime, src: GpuId, dst: GpuId, group: GroupKind, bytes: u64, ops: Vec<OpId>) {
        let id = self.next_xfer;
        self.next_xfer += 1;
        self.outbox_records.push(FabricRecord::TransferStart {
            at: now,
            xfer: id,
            src,
            dst,
            group,
            bytes,
        });
        self.transfers.insert(
            id,
            Transfer {
                src,
                dst,
                group,
                ops,
                remaining: bytes as f64,
                rate: 0.0,
                last_update: now,
                generation: 0,
            },
        );
        self.rebalance(now, src, dst);
    }

    /// Recomputes rates for every flow on the link between `a` and `b` and
    /// reschedules their completions.
    fn rebalance(&mut self, now: SimTime, a: GpuId, b: GpuId) {
        let key = (a.min(b), a.max(b));
        let ids: Vec<TransferId> = self
            .transfers
            .iter()
            .filter(|(_, t)| (t.src.min(t.dst), t.src.max(t.dst)) == key)
            .map(|(&id, _)| id)
            .collect();
        let n_inf = ids
            .iter()
            .filter(|id| self.transfers[id].group == GroupKind::Inference)
            .count();
        let n_mig = ids.len() - n_inf;
        let cap = self.cfg.bandwidth(a, b).0;
        let (r_inf, r_mig) = self.cfg.sharing.split(cap, n_inf, n_mig);
        let mut to_schedule = Vec::new();
        for id in ids {
            let t = self.transfers.get_mut(&id).unwrap();
            let dt = now.saturating_sub(t.last_update).as_secs_f64();
            t.remaining = (t.remaining - t.rate * dt).max(0.0);
            t.last_update = now;
            let new_rate = if t.group == GroupKind::Inference { r_inf } else { r_mig };
            t.rate = new_rate;
            t.generation += 1;
            if t.remaining <= 0.0 {
                to_schedule.push((now, id, t.generation));
            } else if new_rate > 0.0 {
                let ns = (t.remaining / new_rate * 1e9).ceil() as u64;
                to_schedule.push((now + SimTime(ns), id, t.generation));
            }
        }
        for (at, xfer, generation) in to_schedule {
            self.schedule(at, FabricEvent::TransferDone { xfer, generation });
        }
    }

    /// Advances the fabric state machine by one of its own events.
    pub fn handle(&mut self, now: SimTime, ev: FabricEvent) {
        self.outstanding_events = self.outstanding_events.saturating_sub(1);
        match ev {
            FabricEvent::TransferDone { xfer, generation } => {
                let Some(t) = self.transfers.get(&xfer) else {
                    return;
                };
                if t.generation != generation {
                    return;
                }
                let t = self.transfers.remove(&xfer).unwrap();
                self.outbox_records.push(FabricRecord::TransferEnd { at: now, xfer });
                for op in &t.ops {
                    self.finish_op(now, *op);
                }
                self.rebalance(now, t.src, t.dst);
            }
            FabricEvent::Control { op, msg } => self.on_control(now, op, msg),
            FabricEvent::Retry { op } => {
                let src = match self.ops.get_mut(&op) {
                    Some(Op::Mig(m)) => {
                        m.state = HandshakeState {
                            phase: HandshakePhase::Idle,
                            retry_deadline: None,
                        };
                        m.attempts += 1;
                        m.src
                    }
                    _ => return,
                };
                self.request_lock(now, op, src);
            }
        }
    }

    fn on_control(&mut self, now: SimTime, op: OpId, msg: ControlMsg) {
        let Some(Op::Mig(m)) = self.ops.get(&op) else {
            return;
        };
        let (src, dst, bytes, attempt) = (m.src, m.dst, m.bytes, m.attempts);
        match msg {
            ControlMsg::Ack => {
                let lock = &mut self.locks[dst.0 as usize];
                let reply = if lock.holder.is_none() && lock.queue.is_empty() {
                    lock.holder = Some(op);
                    self.outbox_records.push(FabricRecord::LockAcquired { at: now, op, gpu: dst });
                    ControlMsg::Accept
                } else {
                    ControlMsg::Reject
                };
                let at = now + self.cfg.control_latency;
                self.schedule(at, FabricEvent::Control { op, msg: reply });
            }
            ControlMsg::Accept => {
                if let Some(Op::Mig(m)) = self.ops.get_mut(&op) {
                    m.state.phase = HandshakePhase::Accepted;
                }
                self.outbox_records.push(FabricRecord::Handshake {
                    at: now,
                    op,
                    phase: HandshakePhase::Accepted,
                    attempt,
                });
                self.start_transfer(now, src, dst, GroupKind::Migration, bytes, vec![op]);
            }
            ControlMsg::Reject => {
                let deadline = now + self.retry_wait(op, attempt);
                if let Some(Op::Mig(m)) = self.ops.get_mut(&op) {
                    m.state = HandshakeState {
                        phase: HandshakePhase::Rejected,
                        retry_deadline: Some(deadline),
                    };
                }
                self.outbox_records.push(FabricRecord::Handshake {
                    at: now,
                    op,
                    phase: HandshakePhase::Rejected,
                    attempt,
                });
                self.release_lock(now, op, src);
                self.schedule(deadline, FabricEvent::Retry { op });
            }
        }
    }

    fn retry_wait(&self, op: OpId, attempt: u32) -> SimTime {
        let base = self.cfg.retry_timeout.as_nanos();
        if attempt < 2 || base == 0 {
            return SimTime(base);
        }
        let mut z = op.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(attempt as u64);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        SimTime(base + (z ^ (z >> 31)) % base)
    }

    fn finish_op(&mut self, now: SimTime, op: OpId) {
        let (tag, locks) = match self.ops.get_mut(&op).expect("op exists") {
            Op::Half(h) => {
                h.phase = HalfPhase::Done;
                h.complete_time = Some(now);
                (h.tag, vec![h.gpu])
            }
            Op::Mig(m) => {
                m.done = true;
                (m.tag, vec![m.src, m.dst])
            }
        };
        self.outbox_completions.push(Completion { op, tag, at: now });
        for gpu in locks {
            self.release_lock(now, op, gpu);
        }
    }

    /// Issue time of an op, for latency accounting.
    pub fn issue_time(&self, op: OpId) -> Option<SimTime> {
        match self.ops.get(&op)? {
            Op::Half(h) => Some(h.issue_time),
            Op::Mig(m) => Some(m.issue_time),
        }
    }

    /// Drops bookkeeping for finished ops.
    pub fn gc(&mut self) {
        self.ops.retain(|_, o| !o.is_done());
    }

    /// Builds the wait-for graph over pending ops and returns a cycle if one
    /// exists. Meaningful when the driver is quiescent.
    pub fn detect_deadlock(&self) -> Option<Vec<(GpuId, OpId)>> {
        let mut edges: BTreeMap<OpId, Vec<OpId>> = BTreeMap::new();
        let pending: Vec<(&OpId, &Op)> = self.ops.iter().filter(|(_, o)| !o.is_done()).collect();
        for (gpu_idx, lock) in self.locks.iter().enumerate() {
            if let Some(holder) = lock.holder {
                for &w in &lock.queue {
                    edges.entry(w).or_default().push(holder);
                }
            }
            let _ = gpu_idx;
        }
        for &(&id, op) in &pending {
            if let Op::Half(h) = op {
                if h.phase != HalfPhase::Holding {
                    continue;
                }
                let counterpart: Vec<OpId> = pending
                    .iter()
                    .filter_map(|&(&oid, o)| match o {
                        Op::Half(p)
                            if p.gpu == h.peer && p.peer == h.gpu && p.group == h.group && p.kind != h.kind =>
                        {
                            Some(oid)
                        }
                        _ => None,
                    })
                    .collect();
                let targets = if counterpart.is_empty() {
                    // The peer half is not posted yet: whatever its stream is blocked on.
                    pending
                        .iter()
                        .filter_map(|&(&oid, o)| match o {
                            Op::Half(p) if p.gpu == h.peer && p.group == h.group => Some(oid),
                            _ => None,
                        })
                        .collect()
                } else {
                    counterpart
                };
                edges.entry(id).or_default().extend(targets);
            }
        }
        let gpu_of = |id: OpId| match &self.ops[&id] {
            Op::Half(h) => h.gpu,
            Op::Mig(m) => m.src,
        };
        // Iterative DFS with colouring.
        let mut colour: BTreeMap<OpId, u8> = BTreeMap::new();
        for &(&start, _) in &pending {
            if colour.get(&start).copied().unwrap_or(0) != 0 {
                continue;
            }
            let mut stack: Vec<(OpId, usize)> = vec![(start, 0)];
            let mut path: Vec<OpId> = vec![start];
            colour.insert(start, 1);
            while let Some((node, idx)) = stack.pop() {
                let next = edges.get(&node).and_then(|v| v.get(idx)).copied();
                match next {
                    Some(n) => {
                        stack.push((node, idx + 1));
                        match colour.get(&n).copied().unwrap_or(0) {
                            0 => {
                                colour.insert(n, 1);
                                stack.push((n, 0));
                                path.push(n);
                            }
                            1 => {
                                let pos = path.iter().position(|&p| p == n).unwrap();
                                return Some(path[pos..].iter().map(|&o| (gpu_of(o), o)).collect());
                            }
                            _ => {}
                        }
                    }
                    None => {
                        colour.insert(node, 2);
                        path.pop();
                    }
                }
            }
        }
        None
    }
}

pub mod script;
