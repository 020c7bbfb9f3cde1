//! Live KV migration by dirty-bitmap patching.
//!
//! A [`MigrationPair`] tracks one `(src, dst)` direction. Every write to a
//! migrating group on the source marks the written position's slot dirty.
//! Draining snapshots and clears the bitmap and turns the dirty set into a
//! [`KvPatch`], which the destination's [`Receiver`] applies in sequence order.
//!
//! Slots are identified by the source store's slot index, so one bit covers a
//! token position across every migrating group of the pair.

use std::collections::{BTreeMap, BTreeSet};

use crate::cluster::{GpuId, LayerGroup, LayerSet, ModelSpec};
use crate::kv::{KvError, KvStore, RequestId};
use crate::units::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("slot {slot} outside bitmap of {len} slots")]
pub struct SlotOutOfRange {
    pub slot: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirtyBitmap {
    words: Vec<u64>,
    len: u64,
    set: u64,
}

impl DirtyBitmap {
    pub fn new(len: u64) -> Self {
        DirtyBitmap {
            words: vec![0; len.div_ceil(64) as usize],
            len,
            set: 0,
        }
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn count(&self) -> u64 {
        self.set
    }

    pub fn is_empty(&self) -> bool {
        self.set == 0
    }

    pub fn get(&self, slot: u64) -> bool {
        slot < self.len && self.words[(slot / 64) as usize] & (1 << (slot % 64)) != 0
    }

    /// Sets one bit; returns whether it was newly set.
    pub fn mark(&mut self, slot: u64) -> Result<bool, SlotOutOfRange> {
        if slot >= self.len {
            return Err(SlotOutOfRange { slot, len: self.len });
        }
        let w = &mut self.words[(slot / 64) as usize];
        let bit = 1u64 << (slot % 64);
        let fresh = *w & bit == 0;
        *w |= bit;
        self.set += fresh as u64;
        Ok(fresh)
    }

    /// Snapshot of the set bits in ascending order, clearing the bitmap.
    pub fn drain(&mut self) -> Vec<u64> {
        let mut out = Vec::with_capacity(self.set as usize);
        for (i, w) in self.words.iter_mut().enumerate() {
            let mut x = *w;
            while x != 0 {
                let b = x.trailing_zeros() as u64;
                out.push(i as u64 * 64 + b);
                x &= x - 1;
            }
            *w = 0;
        }
        self.set = 0;
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PatchEntry {
    /// Current contents of one position of a live request, per migrating group.
    Slot {
        request: RequestId,
        token: u32,
        slot: u64,
        checksums: Vec<(LayerGroup, u64)>,
    },
    /// The slot was dirty but holds no data any more.
    Vacated { slot: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KvPatch {
    pub src: GpuId,
    pub dst: GpuId,
    pub seq: u64,
    pub groups: BTreeSet<LayerGroup>,
    /// Requests freed on the source since the previous patch; applied first.
    pub tombstones: Vec<RequestId>,
    pub entries: Vec<PatchEntry>,
    pub token_count: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone)]
pub struct MigrationPair {
    pub src: GpuId,
    pub dst: GpuId,
    pub layers: LayerSet,
    pub groups: BTreeSet<LayerGroup>,
    bitmap: DirtyBitmap,
    token_bytes: u64,
    next_seq: u64,
    pub in_flight: Option<u64>,
    pub last_drain: SimTime,
    tombstones: Vec<RequestId>,
    pub marked_total: u64,
    pub drained_total: u64,
}

impl MigrationPair {
    /// `slots` must bound every slot index of the source store.
    pub fn new(src: GpuId, dst: GpuId, layers: LayerSet, model: &ModelSpec, slots: u64) -> Self {
        let groups = model.groups_of(&layers);
        MigrationPair {
            src,
            dst,
            token_bytes: model.token_kv_bytes_per_layer * layers.len() as u64,
            layers,
            groups,
            bitmap: DirtyBitmap::new(slots),
            next_seq: 0,
            in_flight: None,
            last_drain: SimTime::ZERO,
            tombstones: Vec::new(),
            marked_total: 0,
            drained_total: 0,
        }
    }

    pub fn bitmap(&self) -> &DirtyBitmap {
        &self.bitmap
    }

    pub fn bytes_per_token(&self) -> u64 {
        self.token_bytes
    }

    /// Marks every occupied position of the migrating groups dirty.
    pub fn seed(&mut self, src: &KvStore) -> u64 {
        let requests: Vec<RequestId> = src.requests().collect();
        let mut slots = BTreeSet::new();
        for r in requests {
            for &g in &self.groups {
                slots.extend(src.slots_of(r, g));
            }
        }
        self.mark_dirty(slots).expect("source slots are in range")
    }

    /// Returns the number of newly dirtied slots.
    pub fn mark_dirty(&mut self, slots: impl IntoIterator<Item = u64>) -> Result<u64, SlotOutOfRange> {
        let mut fresh = 0;
        for s in slots {
            fresh += self.bitmap.mark(s)? as u64;
        }
        self.marked_total += fresh;
        Ok(fresh)
    }

    pub fn record_tombstone(&mut self, request: RequestId) {
        self.tombstones.push(request);
    }

    pub fn has_work(&self) -> bool {
        !self.bitmap.is_empty() || !self.tombstones.is_empty()
    }

    /// Snapshot-and-clear of the dirty set. `None` when nothing is pending.
    pub fn drain(&mut self, now: SimTime, src: &KvStore) -> Option<KvPatch> {
        if !self.has_work() {
            return None;
        }
        self.last_drain = now;
        let slots = self.bitmap.drain();
        let mut entries = Vec::with_capacity(slots.len());
        for slot in slots {
            let entry = src.resolve_slot(slot).and_then(|(request, token)| {
                let checksums: Vec<(LayerGroup, u64)> = self
                    .groups
                    .iter()
                    .filter_map(|&g| src.read_slot(request, g, token).ok().map(|c| (g, c)))
                    .collect();
                (!checksums.is_empty()).then_some(PatchEntry::Slot {
                    request,
                    token,
                    slot,
                    checksums,
                })
            });
            entries.push(entry.unwrap_or(PatchEntry::Vacated { slot }));
        }
        let token_count = entries.len() as u64;
        self.drained_total += token_count;
        let seq = self.next_seq;
        self.next_seq += 1;
        Some(KvPatch {
            src: self.src,
            dst: self.dst,
            seq,
            groups: self.groups.clone(),
            tombstones: std::mem::take(&mut self.tombstones),
            entries,
            token_count,
            bytes: token_count * self.token_bytes,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum MigrationError {
    #[error("destination {dst} ran out of KV capacity during migration")]
    MigrationOverflow { dst: GpuId },
}

/// Destination side of one pair: in-order application with reorder buffer.
#[derive(Debug, Clone, Default)]
pub struct Receiver {
    expected: u64,
    buffer: BTreeMap<u64, KvPatch>,
    pub applied_tokens: u64,
}

impl Receiver {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    /// Accepts a patch and applies every patch that is now in order.
    /// Returns the applied patches' `(seq, token_count)`.
    pub fn receive(&mut self, patch: KvPatch, dst: &mut KvStore) -> Result<Vec<(u64, u64)>, MigrationError> {
        self.buffer.insert(patch.seq, patch);
        let mut applied = Vec::new();
        while let Some(p) = self.buffer.remove(&self.expected) {
            apply_patch(dst, &p)?;
            self.applied_tokens += p.token_count;
            self.expected += 1;
            applied.push((p.seq, p.token_count));
        }
        Ok(applied)
    }
}

/// Writes a patch into the destination store. Entries for requests that no
/// longer hold blocks on the destination are skipped.
pub fn apply_patch(dst: &mut KvStore, patch: &KvPatch) -> Result<(), MigrationError> {
    let overflow = |e: KvError| match e {
        KvError::Overflow { .. } => MigrationError::MigrationOverflow { dst: patch.dst },
        other => panic!("patch application failed: {other}"),
    };
    for &r in &patch.tombstones {
        dst.drop_request_groups(r, &patch.groups);
    }
    for e in &patch.entries {
        if let PatchEntry::Slot {
            request,
            token,
            checksums,
            ..
        } = e
        {
            if dst.table(*request).is_none() {
                continue;
            }
            for &(g, c) in checksums {
                dst.write_slot(*request, g, *token, c).map_err(overflow)?;
            }
        }
    }
    Ok(())
}

/// `T_sched` and `T_applied`, both tracked per destination.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConvergenceCounters {
    t_sched: BTreeMap<GpuId, u64>,
    t_applied: BTreeMap<GpuId, u64>,
}

impl ConvergenceCounters {
    pub fn new(dsts: impl IntoIterator<Item = GpuId>) -> Self {
        let mut c = Self::default();
        for d in dsts {
            c.t_sched.insert(d, 0);
            c.t_applied.insert(d, 0);
        }
        c
    }

    pub fn schedule(&mut self, dst: GpuId, tokens: u64) {
        *self.t_sched.entry(dst).or_default() += tokens;
    }

    pub fn apply(&mut self, dst: GpuId, tokens: u64) {
        let a = self.t_applied.entry(dst).or_default();
        *a += tokens;
        debug_assert!(*a <= self.t_sched.get(&dst).copied().unwrap_or(0));
    }

    pub fn t_sched(&self, dst: GpuId) -> u64 {
        self.t_sched.get(&dst).copied().unwrap_or(0)
    }

    pub fn t_applied(&self, dst: GpuId) -> u64 {
        self.t_applied.get(&dst).copied().unwrap_or(0)
    }

    pub fn lag(&self, dst: GpuId) -> u64 {
        self.t_sched(dst).saturating_sub(self.t_applied(dst))
    }

    pub fn destinations(&self) -> impl Iterator<Item = GpuId> + '_ {
        self.t_sched.keys().copied()
    }

    pub fn max_lag(&self) -> u64 {
        self.destinations().map(|d| self.lag(d)).max().unwrap_or(0)
    }

    /// Every destination's lag is strictly below `tau`.
    pub fn converged(&self, tau: u64) -> bool {
        self.destinations().all(|d| self.lag(d) < tau)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{GpuSpec, ModelSpec};
    use crate::units::{Bandwidth, GIB, KIB, MIB};

    fn model() -> ModelSpec {
        ModelSpec {
            num_layers: 8,
            layer_weight_bytes: MIB,
            token_kv_bytes_per_layer: 32 * KIB,
            stacking_factor: 4,
        }
    }

    fn gpu(id: u32) -> GpuSpec {
        GpuSpec {
            id: GpuId(id),
            name: "t".into(),
            mem_total: 8 * GIB,
            mem_bandwidth: Bandwidth(1e12),
            prefill_cost: 1e-6,
            decode_cost: 1e-5,
            alloc_granularity: 2 * MIB,
        }
    }

    #[test]
    fn bitmap_mark_is_idempotent() {
        let mut b = DirtyBitmap::new(16);
        assert_eq!(b.mark(3), Ok(true));
        assert_eq!(b.mark(7), Ok(true));
        assert_eq!(b.mark(3), Ok(false));
        assert_eq!(b.count(), 2);
        assert!(b.mark(16).is_err());
        assert_eq!(b.drain(), vec![3, 7]);
        assert!(b.is_empty());
        b.mark(3).unwrap();
        assert_eq!(b.drain(), vec![3]);
    }

    #[test]
    fn drain_and_apply_round_trip() {
        let m = model();
        let mut src = KvStore::init(&gpu(0), &m, [0, 1], 8, u64::MAX).unwrap();
        let mut dst = KvStore::init(&gpu(1), &m, [1], 8, u64::MAX).unwrap();
        src.reserve(1, 20).unwrap();
        dst.reserve(1, 20).unwrap();
        let written = src.append(1, 1, &(0..20).map(|t| 100 + t).collect::<Vec<_>>()).unwrap();
        let layers: LayerSet = (5..=8).collect();
        let mut pair = MigrationPair::new(GpuId(0), GpuId(1), layers, &m, src.block_id_bound() as u64 * 16);
        let mut counters = ConvergenceCounters::new([GpuId(1)]);
        let fresh = pair.seed(&src);
        assert_eq!(fresh, written.len() as u64);
        counters.schedule(GpuId(1), fresh);
        assert_eq!(counters.lag(GpuId(1)), 20);

        let patch = pair.drain(SimTime::ZERO, &src).unwrap();
        assert_eq!(patch.token_count, 20);
        assert_eq!(patch.bytes, 20 * 32 * KIB * 4);
        assert!(pair.bitmap().is_empty());
        let mut rx = Receiver::new();
        let applied = rx.receive(patch, &mut dst).unwrap();
        counters.apply(GpuId(1), applied.iter().map(|a| a.1).sum());
        assert_eq!(counters.lag(GpuId(1)), 0);
        for t in 0..20 {
            assert_eq!(dst.read_slot(1, 1, t), src.read_slot(1, 1, t));
        }
        assert!(pair.drain(SimTime::ZERO, &src).is_none());
    }

    #[test]
    fn out_of_order_patches_are_buffered() {
        let m = model();
        let mut src = KvStore::init(&gpu(0), &m, [0], 4, u64::MAX).unwrap();
        let mut dst = KvStore::init(&gpu(1), &m, [0], 4, u64::MAX).unwrap();
        src.reserve(1, 2).unwrap();
        dst.reserve(1, 2).unwrap();
        let layers: LayerSet = (1..=4).collect();
        let mut pair = MigrationPair::new(GpuId(0), GpuId(1), layers, &m, 64);
        let s0 = src.append(1, 0, &[1]).unwrap();
        pair.mark_dirty(s0.iter().map(|s| src.slot_index(s.block_id, s.offset))).unwrap();
        let p0 = pair.drain(SimTime::ZERO, &src).unwrap();
        let s1 = src.append(1, 0, &[2]).unwrap();
        pair.mark_dirty(s1.iter().map(|s| src.slot_index(s.block_id, s.offset))).unwrap();
        let p1 = pair.drain(SimTime::ZERO, &src).unwrap();
        let mut rx = Receiver::new();
        assert!(rx.receive(p1, &mut dst).unwrap().is_empty());
        assert_eq!(rx.buffered(), 1);
        assert_eq!(rx.receive(p0, &mut dst).unwrap(), vec![(0, 1), (1, 1)]);
        assert_eq!(rx.applied_tokens, 2);
    }

    #[test]
    fn freed_request_drains_as_vacated() {
        let m = model();
        let mut src = KvStore::init(&gpu(0), &m, [0], 4, u64::MAX).unwrap();
        src.reserve(1, 3).unwrap();
        src.append(1, 0, &[1, 2, 3]).unwrap();
        let mut pair = MigrationPair::new(GpuId(0), GpuId(1), (1..=4).collect(), &m, 64);
        pair.seed(&src);
        src.free_request(1);
        pair.record_tombstone(1);
        let p = pair.drain(SimTime::ZERO, &src).unwrap();
        assert_eq!(p.token_count, 3);
        assert_eq!(p.tombstones, vec![1]);
        assert!(p.entries.iter().all(|e| matches!(e, PatchEntry::Vacated { .. })));
    }

    #[test]
    fn lag_examples() {
        let mut c = ConvergenceCounters::new([GpuId(2)]);
        c.schedule(GpuId(2), 500);
        assert_eq!(c.lag(GpuId(2)), 500);
        c.apply(GpuId(2), 58);
        c.apply(GpuId(2), 2);
        assert_eq!(c.t_applied(GpuId(2)), 60);
        assert!(!c.converged(50));
        c.apply(GpuId(2), 400);
        assert_eq!(c.lag(GpuId(2)), 40);
        assert!(c.converged(50));
    }
}
