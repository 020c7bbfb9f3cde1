//! The reconfiguration protocol as driven by the simulation.

use std::collections::{BTreeMap, BTreeSet};

use super::{Event, Ev, Fault, Purpose, Simulation, SyncSnapshot};
use crate::cluster::{GpuId, LayerGroup};
use crate::coordinator::{feasibility, Outcome, Phase, ReconfigPlan, ReconfigStatus};
use crate::kv::KvStore;
use crate::migrator::{ConvergenceCounters, KvPatch, MigrationError, MigrationPair, Receiver};
use crate::units::SimTime;

#[derive(Debug, Clone)]
pub(super) struct CommitState {
    began: SimTime,
    sync_start: Option<SimTime>,
    gate_lag: u64,
    weights_ready_at: SimTime,
    barrier: bool,
}

#[derive(Debug, Clone)]
pub(super) struct ActiveReconfig {
    id: u32,
    index: usize,
    plan: ReconfigPlan,
    status: ReconfigStatus,
    started: SimTime,
    pairs: Vec<MigrationPair>,
    receivers: Vec<Receiver>,
    counters: ConvergenceCounters,
    added_groups: BTreeMap<GpuId, BTreeSet<LayerGroup>>,
    kv_patch: bool,
    fault: Option<Fault>,
    applied_patches: u64,
    state_before: u64,
    commit: Option<CommitState>,
    flush_tokens: u64,
}

impl ActiveReconfig {
    pub(super) fn on_request_freed(&mut self, key: u64) {
        if self.kv_patch {
            for p in &mut self.pairs {
                p.record_tombstone(key);
            }
        }
    }

    /// Dirties the slots just written on `gpu` for every pair sourced there.
    pub(super) fn on_kv_written(&mut self, gpu: GpuId, _groups: &BTreeSet<LayerGroup>, written: &[(u64, u32, u32)], store: &KvStore) {
        if !self.kv_patch {
            return;
        }
        for p in self.pairs.iter_mut().filter(|p| p.src == gpu) {
            let slots = written
                .iter()
                .flat_map(|&(key, start, n)| (start..start + n).filter_map(move |t| store.slot_of(key, t)));
            let fresh = p.mark_dirty(slots).expect("source slots stay below the seeded bound");
            self.counters.schedule(p.dst, fresh);
            if self.commit.is_some() {
                self.flush_tokens += fresh;
            }
        }
    }
}

fn fnv(h: &mut u64, x: u64) {
    for b in x.to_le_bytes() {
        *h ^= b as u64;
        *h = h.wrapping_mul(0x100_0000_01b3);
    }
}

impl Simulation {
    /// Digest of configuration, capacities, resident groups and resident weights.
    pub fn structural_checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for st in &self.config.stages {
            fnv(&mut h, st.gpu.0 as u64);
            fnv(&mut h, st.first as u64);
            fnv(&mut h, st.last as u64);
        }
        fnv(&mut h, self.capacity);
        for (gpu, s) in &self.stores {
            fnv(&mut h, gpu.0 as u64);
            fnv(&mut h, s.capacity_blocks());
            for &g in s.groups() {
                fnv(&mut h, g as u64);
            }
            for l in self.weights.resident(*gpu) {
                fnv(&mut h, 1 << 40 | l as u64);
            }
        }
        h
    }

    fn set_phase(&mut self, phase: Phase) {
        let now = self.now;
        if let Some(rc) = self.reconf.as_mut() {
            rc.status.advance(phase, now);
        }
        self.push_trace(Event::Phase { phase: phase.as_str() });
    }

    fn record_outcome(&mut self, index: usize, outcome: Outcome, migration: SimTime) {
        let reason = match &outcome {
            Outcome::Success => String::new(),
            Outcome::Infeasible(r) | Outcome::Failed(r) => r.clone(),
        };
        self.push_trace(Event::Outcome {
            index,
            outcome: outcome.label(),
            reason,
            migration_ns: migration.0,
        });
        self.outcomes.push((index, outcome));
    }

    fn memory_budget(&self, gpu: GpuId) -> u64 {
        let m = self.specs[&gpu].mem_total as u128;
        (m * self.sc.engine.util.ppm() as u128 / 1_000_000) as u64
    }

    pub(super) fn on_trigger(&mut self, index: usize) {
        let t = self.sc.triggers[index].clone();
        self.push_trace(Event::Trigger {
            index,
            target: t.target.to_string(),
        });
        if self.reconf.is_some() {
            self.record_outcome(index, Outcome::Infeasible("reconfiguration in flight".into()), SimTime::ZERO);
            return;
        }
        self.push_trace(Event::Phase {
            phase: Phase::Feasibility.as_str(),
        });
        let b_used = self.stores.values().next().map_or(0, |s| s.used_blocks());
        let plan = feasibility(
            &self.config,
            &t.target,
            &self.sc.cluster,
            &self.sc.model,
            self.sc.engine.util,
            b_used,
            self.capacity,
            t.tau,
            t.poll_interval,
        );
        let plan = match plan {
            Ok(p) => p,
            Err(e) => {
                self.push_trace(Event::Phase {
                    phase: Phase::Aborted.as_str(),
                });
                self.record_outcome(index, Outcome::Infeasible(e.to_string()), SimTime::ZERO);
                return;
            }
        };
        self.push_trace(Event::Plan {
            b_cur: plan.b_cur,
            b_shrink: plan.b_shrink,
            b_new: plan.b_new,
            b_used,
        });
        if !self.sc.flags.kv_resize && self.capacity > plan.b_shrink {
            self.push_trace(Event::Phase {
                phase: Phase::Aborted.as_str(),
            });
            let reason = format!(
                "static KV capacity {} exceeds intermediate budget {}",
                self.capacity, plan.b_shrink
            );
            self.record_outcome(index, Outcome::Infeasible(reason), SimTime::ZERO);
            return;
        }
        if plan.is_noop() {
            self.push_trace(Event::Phase {
                phase: Phase::Done.as_str(),
            });
            self.record_outcome(index, Outcome::Success, SimTime::ZERO);
            return;
        }
        let mut status = ReconfigStatus::default();
        status.advance(Phase::Feasibility, self.now);
        let id = self.next_reconf_id;
        self.next_reconf_id += 1;
        self.reconf = Some(ActiveReconfig {
            id,
            index,
            counters: ConvergenceCounters::new(plan.destinations()),
            plan,
            status,
            started: self.now,
            pairs: Vec::new(),
            receivers: Vec::new(),
            added_groups: BTreeMap::new(),
            kv_patch: self.sc.flags.kv_patch,
            fault: t.fault,
            applied_patches: 0,
            state_before: self.structural_checksum(),
            commit: None,
            flush_tokens: 0,
        });
        self.resize_phase();
        self.migrate_phase();
        self.set_phase(Phase::Converging);
        let poll = self.reconf.as_ref().expect("active").plan.poll_interval;
        self.q.push(self.now + poll, Ev::Poll { id });
        debug_assert_eq!(self.memory_audit(), Ok(()));
    }

    fn resize_phase(&mut self) {
        self.set_phase(Phase::Resizing);
        let plan = self.reconf.as_ref().expect("active").plan.clone();
        let shrink = self.sc.flags.kv_resize && plan.shrinks();
        let gpus: Vec<GpuId> = self.stores.keys().copied().collect();
        for gpu in gpus {
            let store = self.stores.get_mut(&gpu).expect("known GPU");
            let moved = store.compact() as u64;
            self.push_trace(Event::CompactKV { gpu, free_blocks: moved });
            if shrink {
                let store = self.stores.get_mut(&gpu).expect("known GPU");
                store.resize(plan.b_shrink).expect("feasibility bounds live blocks");
                self.push_trace(Event::ResizeKV {
                    gpu,
                    blocks: plan.b_shrink,
                });
            }
        }
        if shrink {
            self.capacity = plan.b_shrink;
        }
    }

    fn migrate_phase(&mut self) {
        self.set_phase(Phase::Migrating);
        let plan = self.reconf.as_ref().expect("active").plan.clone();
        let share = self.model().layer_share(self.sc.cluster[0].alloc_granularity) as u64;
        let mut pairs = Vec::new();
        let mut added: BTreeMap<GpuId, BTreeSet<LayerGroup>> = BTreeMap::new();
        for (&(src, dst), layers) in &plan.diff.m_mig {
            let groups = self.sc.model.groups_of(layers);
            let d = self.stores.get_mut(&dst).expect("known GPU");
            for &g in &groups {
                d.add_group(g);
            }
            added.entry(dst).or_default().extend(groups.iter().copied());
            let s = &self.stores[&src];
            let pair = MigrationPair::new(src, dst, layers.clone(), &self.sc.model, s.block_id_bound() as u64 * share);
            pairs.push(pair);
        }
        for (gpu, layers) in &plan.diff.m_add {
            self.push_trace(Event::AddLayerWeights {
                gpu: *gpu,
                layers: layers.iter().copied().collect(),
            });
            if self.sc.flags.async_weights {
                let headroom = self
                    .memory_budget(*gpu)
                    .saturating_sub(self.weights.resident_bytes(*gpu))
                    .saturating_sub(self.stores[gpu].footprint_bytes());
                match self.weights.stage(self.now, *gpu, layers, headroom) {
                    Ok(Some((t, e))) => self.q.push(t, Ev::Weight(e)),
                    Ok(None) => {}
                    Err(e) => panic!("weight staging violates the memory budget: {e}"),
                }
            }
        }
        let kv_patch = self.sc.flags.kv_patch;
        let mut seeded = Vec::new();
        for p in &mut pairs {
            let n = if kv_patch { p.seed(&self.stores[&p.src]) } else { 0 };
            seeded.push(n);
        }
        let rc = self.reconf.as_mut().expect("active");
        for (p, &n) in pairs.iter().zip(&seeded) {
            rc.counters.schedule(p.dst, n);
        }
        rc.receivers = pairs.iter().map(|_| Receiver::new()).collect();
        rc.added_groups = added;
        let id = rc.id;
        let events: Vec<Event> = pairs
            .iter()
            .zip(&seeded)
            .map(|(p, &n)| Event::StartKVMigration {
                src: p.src,
                dst: p.dst,
                layers: p.layers.iter().copied().collect(),
                seeded_tokens: n,
            })
            .collect();
        let n_pairs = pairs.len();
        rc.pairs = pairs;
        for e in events {
            self.push_trace(e);
        }
        if kv_patch {
            for pair in 0..n_pairs {
                self.q.push(self.now, Ev::Drain { id, pair });
            }
        }
    }

    fn active(&self, id: u32) -> bool {
        self.reconf.as_ref().is_some_and(|rc| rc.id == id)
    }

    pub(super) fn on_drain_tick(&mut self, id: u32, pair: usize) {
        if !self.active(id) || self.reconf.as_ref().expect("active").status.phase != Phase::Converging {
            return;
        }
        self.send_patch(pair);
        self.q.push(self.now + self.sc.engine.drain_period, Ev::Drain { id, pair });
    }

    fn send_patch(&mut self, p: usize) {
        let now = self.now;
        let rc = self.reconf.as_mut().expect("active");
        let pair = &mut rc.pairs[p];
        if pair.in_flight.is_some() {
            return;
        }
        let Some(patch) = pair.drain(now, &self.stores[&pair.src]) else {
            return;
        };
        pair.in_flight = Some(patch.seq);
        let id = rc.id;
        self.push_trace(Event::PatchSent {
            src: patch.src,
            dst: patch.dst,
            seq: patch.seq,
            tokens: patch.token_count,
            bytes: patch.bytes,
        });
        let op = self.fabric.post_migration(now, patch.src, patch.dst, patch.bytes, patch.seq);
        self.purposes.insert(
            op,
            Purpose::Patch {
                id,
                pair: p,
                patch: Box::new(patch),
            },
        );
    }

    pub(super) fn on_patch_delivered(&mut self, id: u32, p: usize, patch: KvPatch) {
        if !self.active(id) {
            return;
        }
        let rc = self.reconf.as_mut().expect("active");
        rc.pairs[p].in_flight = None;
        let dst = patch.dst;
        let src = patch.src;
        let injected = matches!(rc.fault, Some(Fault::MigrationOverflowAfterPatches(n)) if rc.applied_patches >= n);
        let res = if injected {
            Err(MigrationError::MigrationOverflow { dst })
        } else {
            rc.receivers[p].receive(patch, self.stores.get_mut(&dst).expect("known GPU"))
        };
        let applied = match res {
            Ok(a) => a,
            Err(e) => {
                self.rollback(e.to_string());
                return;
            }
        };
        let mut events = Vec::new();
        for (seq, tokens) in applied {
            rc.applied_patches += 1;
            rc.counters.apply(dst, tokens);
            events.push(Event::PatchApplied {
                src,
                dst,
                seq,
                tokens,
                t_applied: rc.counters.t_applied(dst),
            });
        }
        let syncing = rc.commit.as_ref().is_some_and(|c| c.sync_start.is_some());
        for e in events {
            self.push_trace(e);
        }
        if syncing {
            self.continue_sync();
        }
    }

    pub(super) fn on_poll(&mut self, id: u32) {
        if !self.active(id) || self.reconf.as_ref().expect("active").status.phase != Phase::Converging {
            return;
        }
        if !self.sc.flags.handshake {
            if let Some(cycle) = self.fabric.detect_deadlock() {
                self.record_deadlock(cycle);
                return;
            }
        }
        let rc = self.reconf.as_ref().expect("active");
        let lags: Vec<Event> = rc
            .counters
            .destinations()
            .map(|dst| Event::Lag {
                dst,
                t_sched: rc.counters.t_sched(dst),
                t_applied: rc.counters.t_applied(dst),
            })
            .collect();
        let converged = rc.counters.converged(rc.plan.tau);
        let weights_ready = !self.sc.flags.async_weights || rc.plan.diff.m_add.keys().all(|g| self.weights.is_idle(*g));
        let poll = rc.plan.poll_interval;
        for e in lags {
            self.push_trace(e);
        }
        if converged && weights_ready {
            self.begin_commit();
        } else {
            self.q.push(self.now + poll, Ev::Poll { id });
        }
    }

    fn begin_commit(&mut self) {
        self.set_phase(Phase::Committing);
        let now = self.now;
        let rc = self.reconf.as_mut().expect("active");
        let gate_lag = rc.counters.max_lag();
        let tau = rc.plan.tau;
        rc.commit = Some(CommitState {
            began: now,
            sync_start: None,
            gate_lag,
            weights_ready_at: now,
            barrier: false,
        });
        rc.flush_tokens = 0;
        self.push_trace(Event::CommitStart { gate_lag, tau });
        self.admission_paused = true;
        self.try_final_sync();
    }

    /// Called whenever a micro-batch leaves the pipeline.
    pub(super) fn on_pipeline_progress(&mut self) {
        let waiting = self
            .reconf
            .as_ref()
            .and_then(|rc| rc.commit.as_ref())
            .is_some_and(|c| c.sync_start.is_none());
        if waiting {
            self.try_final_sync();
        }
    }

    fn try_final_sync(&mut self) {
        if self.inflight > 0 {
            return;
        }
        let now = self.now;
        let rc = self.reconf.as_mut().expect("active");
        if !rc.kv_patch {
            for p in &mut rc.pairs {
                let fresh = p.seed(&self.stores[&p.src]);
                rc.counters.schedule(p.dst, fresh);
            }
        }
        let residual: u64 = rc.counters.destinations().map(|d| rc.counters.lag(d)).sum();
        let cs = rc.commit.as_mut().expect("committing");
        cs.sync_start = Some(now);
        let e = Event::FinalSync {
            gate_lag: cs.gate_lag,
            residual_tokens: residual,
            flush_tokens: rc.flush_tokens,
            tau: rc.plan.tau,
        };
        let id = rc.id;
        let m_add = rc.plan.diff.m_add.clone();
        self.push_trace(e);
        if !self.sc.flags.async_weights {
            let mut longest = SimTime::ZERO;
            for (gpu, layers) in &m_add {
                longest = longest.max(self.weights.load_now(*gpu, layers));
            }
            let cs = self.reconf.as_mut().and_then(|rc| rc.commit.as_mut()).expect("committing");
            cs.weights_ready_at = now + longest;
            if longest > SimTime::ZERO {
                self.q.push(now + longest, Ev::SyncWeightsDone { id });
            }
        }
        self.continue_sync();
    }

    pub(super) fn on_sync_weights_done(&mut self, id: u32) {
        if self.active(id) {
            self.continue_sync();
        }
    }

    fn continue_sync(&mut self) {
        let n = {
            let rc = self.reconf.as_ref().expect("active");
            match &rc.commit {
                Some(c) if c.sync_start.is_some() && !c.barrier => rc.pairs.len(),
                _ => return,
            }
        };
        for p in 0..n {
            self.send_patch(p);
        }
        let now = self.now;
        let barrier = self.config.stages.len() as u64 * self.sc.engine.control_latency.0;
        let rc = self.reconf.as_mut().expect("active");
        let idle = rc.pairs.iter().all(|p| p.in_flight.is_none() && !p.has_work());
        let cs = rc.commit.as_mut().expect("committing");
        if idle && rc.counters.max_lag() == 0 && now >= cs.weights_ready_at {
            cs.barrier = true;
            let id = rc.id;
            self.q.push(now + SimTime(barrier), Ev::Barrier { id });
        }
    }

    fn capture_snapshots(&mut self) {
        let rc = self.reconf.as_ref().expect("active");
        for p in &rc.pairs {
            let read = |s: &KvStore| {
                let mut out = BTreeMap::new();
                for r in s.requests() {
                    for &g in &p.groups {
                        for t in 0..s.tokens(r, g) {
                            if let Ok(c) = s.read_slot(r, g, t) {
                                out.insert((r, g, t), c);
                            }
                        }
                    }
                }
                out
            };
            self.snapshots.push(SyncSnapshot {
                trigger: rc.index,
                src: p.src,
                dst: p.dst,
                groups: p.groups.iter().copied().collect(),
                src_slots: read(&self.stores[&p.src]),
                dst_slots: read(&self.stores[&p.dst]),
            });
        }
    }

    pub(super) fn on_barrier(&mut self, id: u32) {
        if !self.active(id) {
            return;
        }
        if self.sc.engine.capture_sync_snapshots {
            self.capture_snapshots();
        }
        let rc = self.reconf.as_ref().expect("active");
        let plan = rc.plan.clone();
        let cs = rc.commit.clone().expect("committing");
        let (index, started) = (rc.index, rc.started);
        let now = self.now;
        self.config = plan.c_tgt.clone();
        self.epoch += 1;
        self.stage_queues = vec![Default::default(); self.config.stages.len()];
        let b_new = if self.sc.flags.kv_resize { plan.b_new } else { self.capacity };
        self.push_trace(Event::SyncAndCommit {
            m_del: plan
                .diff
                .m_del
                .iter()
                .map(|(g, l)| (*g, l.iter().copied().collect()))
                .collect(),
            b_new,
            config: self.config.to_string(),
        });
        let sync_start = cs.sync_start.expect("synchronized");
        self.push_trace(Event::Pause {
            start_ns: sync_start.0,
            duration_ns: (now - sync_start).0,
            drain_wait_ns: (sync_start - cs.began).0,
        });
        self.admission_paused = false;
        for (gpu, layers) in &plan.diff.m_del {
            let in_use = self.config.layers_on(*gpu);
            let bytes = self.weights.evict(*gpu, layers, &in_use).expect("deleted layers are not in use");
            self.push_trace(Event::WeightEvicted {
                gpu: *gpu,
                layers: layers.iter().copied().collect(),
                bytes,
            });
            let groups = self.sc.model.groups_of(layers);
            let freed = self
                .stores
                .get_mut(gpu)
                .expect("known GPU")
                .drop_groups(&groups)
                .expect("deleted groups are resident");
            self.push_trace(Event::DropKV {
                gpu: *gpu,
                groups: groups.into_iter().collect(),
                freed_tokens: freed,
            });
        }
        if self.sc.flags.kv_resize {
            let gpus: Vec<GpuId> = self.stores.keys().copied().collect();
            for gpu in gpus {
                self.stores
                    .get_mut(&gpu)
                    .expect("known GPU")
                    .resize(b_new)
                    .expect("target budget covers live blocks");
                self.push_trace(Event::ResizeKV { gpu, blocks: b_new });
            }
            self.capacity = b_new;
        }
        self.set_phase(Phase::Done);
        self.reconf = None;
        self.record_outcome(index, Outcome::Success, now - started);
        debug_assert_eq!(self.memory_audit(), Ok(()));
    }

    /// Restores the pre-reconfiguration structure and reports a failure.
    fn rollback(&mut self, reason: String) {
        self.set_phase(Phase::Aborted);
        let rc = self.reconf.take().expect("active");
        for (dst, groups) in &rc.added_groups {
            let s = self.stores.get_mut(dst).expect("known GPU");
            s.drop_groups(groups).expect("added groups are resident");
        }
        for (gpu, layers) in &rc.plan.diff.m_add {
            self.weights.cancel(*gpu);
            let in_use = self.config.layers_on(*gpu);
            self.weights.evict(*gpu, layers, &in_use).expect("added layers are not in use");
        }
        if self.sc.flags.kv_resize && rc.plan.shrinks() {
            for s in self.stores.values_mut() {
                s.resize(rc.plan.b_cur).expect("growing never fails");
            }
            self.capacity = rc.plan.b_cur;
        }
        self.admission_paused = false;
        let state_after = self.structural_checksum();
        self.push_trace(Event::Rollback {
            reason: reason.clone(),
            state_before: rc.state_before,
            state_after,
        });
        self.record_outcome(rc.index, Outcome::Failed(reason), self.now - rc.started);
    }
}
