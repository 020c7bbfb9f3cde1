//! Discrete-event serving simulation.
//!
//! A [`Simulation`] owns the clock, every GPU's KV store, the fabric, the
//! weight loader and the reconfiguration state. Requests flow through the
//! pipeline as micro-batches: one request per prefill micro-batch, up to
//! `max_batch` requests per decode micro-batch, at most `max_inflight`
//! micro-batches in the pipeline. Stage outputs travel to the next stage as
//! inference transfers on the fabric.

mod reconfig;
pub mod metrics;
pub mod scenario;
pub mod trace;
pub mod workload;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::cluster::{GpuId, GpuSpec, Layer, LayerGroup, ModelSpec, PpConfig, UtilRatio};
use crate::coordinator::{config_budget, Outcome};
use crate::fabric::{Completion, Fabric, FabricConfig, FabricEvent, OpId, SharingMode};
use crate::kv::{KvStore, RequestId};
use crate::queue::EventQueue;
use crate::units::{Bandwidth, SimTime, KIB};
use crate::weights::{WeightConfig, WeightEvent, WeightLoader};

pub use metrics::{compute_metrics, score, Metrics};
pub use scenario::{load_scenario, ScenarioError};
pub use trace::{Event, Record, Trace};
pub use workload::{generate_workload, Lengths, Pattern, Request, WorkloadSpec};

use reconfig::ActiveReconfig;

/// Feature switches for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Flags {
    pub kv_resize: bool,
    pub kv_patch: bool,
    pub async_weights: bool,
    pub handshake: bool,
}

impl Default for Flags {
    fn default() -> Self {
        Flags {
            kv_resize: true,
            kv_patch: true,
            async_weights: true,
            handshake: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub max_batch: usize,
    /// Defaults to the number of pipeline stages.
    pub max_inflight: Option<usize>,
    pub activation_bytes_per_token: u64,
    pub util: UtilRatio,
    pub drain_period: SimTime,
    pub link_bandwidth: Bandwidth,
    pub link_overrides: BTreeMap<(GpuId, GpuId), Bandwidth>,
    pub control_latency: SimTime,
    pub retry_timeout: SimTime,
    pub sharing: SharingMode,
    pub weights: WeightConfig,
    pub host_missing_layers: Vec<Layer>,
    pub max_sim_time: SimTime,
    /// Include per-operation lock records in the trace.
    pub trace_locks: bool,
    /// Keep source and destination checksums of migrated groups at each commit.
    pub capture_sync_snapshots: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            max_batch: 32,
            max_inflight: None,
            activation_bytes_per_token: 8 * KIB,
            util: UtilRatio::default(),
            drain_period: SimTime::from_millis(1),
            link_bandwidth: Bandwidth::gbps(100.0),
            link_overrides: BTreeMap::new(),
            control_latency: SimTime::from_micros(100),
            retry_timeout: SimTime::from_millis(1),
            sharing: SharingMode::Strict,
            weights: WeightConfig::default(),
            host_missing_layers: Vec::new(),
            max_sim_time: SimTime::from_secs_f64(3600.0),
            trace_locks: false,
            capture_sync_snapshots: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// The destination reports overflow when applying this many patches.
    MigrationOverflowAfterPatches(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trigger {
    pub at: SimTime,
    pub target: PpConfig,
    pub tau: u64,
    pub poll_interval: SimTime,
    pub fault: Option<Fault>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub cluster: Vec<GpuSpec>,
    pub model: ModelSpec,
    pub initial: PpConfig,
    pub workload: WorkloadSpec,
    pub triggers: Vec<Trigger>,
    pub flags: Flags,
    pub engine: EngineConfig,
    pub seed: u64,
}

/// Source and destination contents of the migrated groups of one pair,
/// captured when the final synchronization completes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyncSnapshot {
    pub trigger: usize,
    pub src: GpuId,
    pub dst: GpuId,
    pub groups: Vec<LayerGroup>,
    pub src_slots: BTreeMap<(RequestId, LayerGroup, u32), u64>,
    pub dst_slots: BTreeMap<(RequestId, LayerGroup, u32), u64>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub trace: Trace,
    pub metrics: Metrics,
    pub outcomes: Vec<(usize, Outcome)>,
    pub final_config: PpConfig,
    pub snapshots: Vec<SyncSnapshot>,
    /// `"complete"`, `"deadlock"` or `"horizon"`.
    pub ended: &'static str,
}

/// Payload fingerprint of one KV position of one stacking group.
pub fn fingerprint(key: u64, group: LayerGroup, token: u32) -> u64 {
    let mut z = key
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(((group as u64) << 32) | token as u64);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn kv_key(id: RequestId, incarnation: u32) -> u64 {
    (id << 16) | incarnation as u64
}

#[derive(Debug, Clone)]
struct ReqState {
    req: Request,
    incarnation: u32,
    admitted: Option<u64>,
    positions: u32,
    generated: u32,
    first_token: Option<SimTime>,
    in_flight: bool,
    done: bool,
}

impl ReqState {
    fn key(&self) -> u64 {
        kv_key(self.req.id, self.incarnation)
    }
}

#[derive(Debug, Clone)]
struct MicroBatch {
    epoch: u32,
    prefill: bool,
    /// `(request index, first position, positions written)`.
    items: Vec<(usize, u32, u32)>,
    tokens: u32,
}

#[derive(Debug, Clone)]
enum Ev {
    Arrival(usize),
    StageDone { mb: u64, stage: usize },
    Fabric(FabricEvent),
    Weight(WeightEvent),
    Trigger(usize),
    Drain { id: u32, pair: usize },
    Poll { id: u32 },
    SyncWeightsDone { id: u32 },
    Barrier { id: u32 },
}

#[derive(Debug, Clone)]
enum Purpose {
    Activation { mb: u64, next_stage: usize },
    Patch { id: u32, pair: usize, patch: Box<crate::migrator::KvPatch> },
}

pub struct Simulation {
    sc: Scenario,
    requests: Vec<ReqState>,
    q: EventQueue<Ev>,
    trace: Trace,
    fabric: Fabric,
    weights: WeightLoader,
    stores: BTreeMap<GpuId, KvStore>,
    specs: BTreeMap<GpuId, GpuSpec>,
    config: PpConfig,
    epoch: u32,
    capacity: u64,
    waiting: VecDeque<usize>,
    ready: BTreeSet<(u64, usize)>,
    running: BTreeMap<u64, usize>,
    mbs: BTreeMap<u64, MicroBatch>,
    next_mb: u64,
    inflight: usize,
    stage_queues: Vec<VecDeque<u64>>,
    gpu_busy: BTreeSet<GpuId>,
    purposes: BTreeMap<OpId, Purpose>,
    admission_paused: bool,
    admit_seq: u64,
    reconf: Option<ActiveReconfig>,
    next_reconf_id: u32,
    outcomes: Vec<(usize, Outcome)>,
    snapshots: Vec<SyncSnapshot>,
    ended: Option<&'static str>,
    now: SimTime,
}

/// Block budget used when stores cannot be resized: small enough for every
/// intermediate configuration along the trigger chain.
fn static_capacity(sc: &Scenario) -> u64 {
    let u = sc.engine.util;
    let mut b = config_budget(&sc.initial, &sc.cluster, &sc.model, u).unwrap_or(0);
    let mut cur = sc.initial.clone();
    for t in &sc.triggers {
        let diff = crate::cluster::diff_configs(&cur, &t.target);
        let mut ok = true;
        for (gpu, layers) in &diff.c_int {
            let spec = sc.cluster.iter().find(|g| g.id == *gpu).expect("validated");
            match crate::cluster::max_blocks(spec, layers.len() as u32, &sc.model, u) {
                Ok(m) => b = b.min(m),
                Err(_) => ok = false,
            }
        }
        if ok {
            cur = t.target.clone();
        }
    }
    b
}

impl Simulation {
    pub fn new(sc: Scenario) -> Self {
        let u = sc.engine.util;
        let capacity = if sc.flags.kv_resize {
            config_budget(&sc.initial, &sc.cluster, &sc.model, u).expect("initial configuration fits")
        } else {
            static_capacity(&sc)
        };
        let num_gpus = sc.cluster.iter().map(|g| g.id.0 + 1).max().unwrap_or(0);
        let fabric = Fabric::new(FabricConfig {
            num_gpus,
            link_bandwidth: sc.engine.link_bandwidth,
            link_overrides: sc.engine.link_overrides.clone(),
            control_latency: sc.engine.control_latency,
            retry_timeout: sc.engine.retry_timeout,
            handshake: sc.flags.handshake,
            sharing: sc.engine.sharing,
        });
        let mut weights = WeightLoader::new(
            sc.engine.weights.clone(),
            sc.model.layer_weight_bytes,
            sc.initial.layer_sets(),
        );
        for &l in &sc.engine.host_missing_layers {
            weights.set_host_resident(l, false);
        }
        let mut stores = BTreeMap::new();
        let mut specs = BTreeMap::new();
        for g in &sc.cluster {
            let layers = sc.initial.layers_on(g.id);
            let budget = (g.mem_total as u128 * u.ppm() as u128 / 1_000_000) as u64;
            let avail = budget.saturating_sub(layers.len() as u64 * sc.model.layer_weight_bytes);
            let groups = sc.model.groups_of(&layers);
            let store = KvStore::init(g, &sc.model, groups, capacity, avail).expect("capacity fits by construction");
            stores.insert(g.id, store);
            specs.insert(g.id, g.clone());
        }
        let requests = generate_workload(&sc.workload, sc.seed)
            .into_iter()
            .map(|req| ReqState {
                req,
                incarnation: 0,
                admitted: None,
                positions: 0,
                generated: 0,
                first_token: None,
                in_flight: false,
                done: false,
            })
            .collect();
        let stages = sc.initial.stages.len();
        Simulation {
            config: sc.initial.clone(),
            sc,
            requests,
            q: EventQueue::new(),
            trace: Trace::default(),
            fabric,
            weights,
            stores,
            specs,
            epoch: 0,
            capacity,
            waiting: VecDeque::new(),
            ready: BTreeSet::new(),
            running: BTreeMap::new(),
            mbs: BTreeMap::new(),
            next_mb: 0,
            inflight: 0,
            stage_queues: vec![VecDeque::new(); stages],
            gpu_busy: BTreeSet::new(),
            purposes: BTreeMap::new(),
            admission_paused: false,
            admit_seq: 0,
            reconf: None,
            next_reconf_id: 0,
            outcomes: Vec::new(),
            snapshots: Vec::new(),
            ended: None,
            now: SimTime::ZERO,
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn store(&self, gpu: GpuId) -> &KvStore {
        &self.stores[&gpu]
    }

    pub fn config(&self) -> &PpConfig {
        &self.config
    }

    /// Resident weights plus KV footprint never exceed device memory.
    pub fn memory_audit(&self) -> Result<(), String> {
        for (gpu, spec) in &self.specs {
            let used = self.weights.resident_bytes(*gpu) + self.stores[gpu].footprint_bytes();
            if used > spec.mem_total {
                return Err(format!("{gpu}: {used} bytes in use exceeds {}", spec.mem_total));
            }
        }
        Ok(())
    }

    fn model(&self) -> &ModelSpec {
        &self.sc.model
    }

    fn max_inflight(&self) -> usize {
        self.sc.engine.max_inflight.unwrap_or(self.config.stages.len()).max(1)
    }

    fn push_trace(&mut self, event: Event) {
        self.trace.push(self.now, event);
    }

    pub fn run(mut self) -> RunResult {
        self.push_trace(Event::RunStart {
            gpus: self.specs.len() as u32,
            layer_share: self.model().layer_share(self.sc.cluster[0].alloc_granularity),
            capacity_blocks: self.capacity,
            config: self.config.to_string(),
        });
        for (i, r) in self.requests.iter().enumerate() {
            self.q.push(r.req.arrival, Ev::Arrival(i));
        }
        for (i, t) in self.sc.triggers.iter().enumerate() {
            self.q.push(t.at, Ev::Trigger(i));
        }
        while let Some(t) = self.q.peek_time() {
            if t > self.sc.engine.max_sim_time {
                self.ended = Some("horizon");
                break;
            }
            let (t, ev) = self.q.pop().expect("peeked");
            self.now = t;
            self.handle(ev);
            self.pump();
            debug_assert_eq!(self.memory_audit(), Ok(()), "at {t:?}");
            if self.ended.is_some() {
                break;
            }
        }
        if self.ended.is_none() && self.fabric.pending_ops() > 0 {
            if let Some(cycle) = self.fabric.detect_deadlock() {
                self.record_deadlock(cycle);
            }
        }
        let completed = self.requests.iter().filter(|r| r.done).count();
        self.push_trace(Event::RunEnd {
            completed,
            pending: self.requests.len() - completed,
        });
        let metrics = compute_metrics(&self.trace);
        RunResult {
            trace: self.trace,
            metrics,
            outcomes: self.outcomes,
            final_config: self.config,
            snapshots: self.snapshots,
            ended: self.ended.unwrap_or("complete"),
        }
    }

    fn record_deadlock(&mut self, cycle: Vec<(GpuId, OpId)>) {
        self.push_trace(Event::Deadlock { cycle });
        self.ended = Some("deadlock");
    }

    fn handle(&mut self, ev: Ev) {
        match ev {
            Ev::Arrival(i) => {
                let r = &self.requests[i].req;
                let e = Event::Arrival {
                    req: r.id,
                    input: r.input_len,
                    output: r.output_len,
                };
                self.push_trace(e);
                self.waiting.push_back(i);
            }
            Ev::StageDone { mb, stage } => self.on_stage_done(mb, stage),
            Ev::Fabric(fe) => self.fabric.handle(self.now, fe),
            Ev::Weight(we) => {
                let (layer, next) = self.weights.on_event(self.now, we);
                if let Some(layer) = layer {
                    self.push_trace(Event::WeightStaged { gpu: we.gpu, layer });
                }
                if let Some((t, e)) = next {
                    self.q.push(t, Ev::Weight(e));
                }
            }
            Ev::Trigger(i) => self.on_trigger(i),
            Ev::Drain { id, pair } => self.on_drain_tick(id, pair),
            Ev::Poll { id } => self.on_poll(id),
            Ev::SyncWeightsDone { id } => self.on_sync_weights_done(id),
            Ev::Barrier { id } => self.on_barrier(id),
        }
    }

    /// Settles fabric side effects and starts whatever work became possible.
    fn pump(&mut self) {
        loop {
            let out = self.fabric.take_outbox();
            let idle = out.schedule.is_empty() && out.completions.is_empty() && out.records.is_empty();
            for (t, e) in out.schedule {
                self.q.push(t, Ev::Fabric(e));
            }
            for r in &out.records {
                if let Some((t, e)) = Event::from_fabric(r) {
                    if matches!(e, Event::Lock { .. }) && !self.sc.engine.trace_locks {
                        continue;
                    }
                    self.trace.push(t, e);
                }
            }
            for c in out.completions {
                self.on_completion(c);
            }
            if idle {
                self.schedule_micro_batches();
                let out = self.fabric.take_outbox();
                if out.schedule.is_empty() && out.completions.is_empty() && out.records.is_empty() {
                    break;
                }
                // Put the drained outbox back through the loop.
                for (t, e) in out.schedule {
                    self.q.push(t, Ev::Fabric(e));
                }
                for r in &out.records {
                    if let Some((t, e)) = Event::from_fabric(r) {
                        if matches!(e, Event::Lock { .. }) && !self.sc.engine.trace_locks {
                            continue;
                        }
                        self.trace.push(t, e);
                    }
                }
                for c in out.completions {
                    self.on_completion(c);
                }
            }
        }
        self.fabric.gc();
    }

    fn on_completion(&mut self, c: Completion) {
        let Some(p) = self.purposes.remove(&c.op) else {
            return;
        };
        match p {
            Purpose::Activation { mb, next_stage } => {
                self.stage_queues[next_stage].push_back(mb);
                self.start_stage(next_stage);
            }
            Purpose::Patch { id, pair, patch } => self.on_patch_delivered(id, pair, *patch),
        }
    }

    fn reserve_all(&mut self, key: u64, positions: u32) -> Result<(), (u64, u64)> {
        let any = self.stores.values().next().expect("cluster has GPUs");
        let needed = any.blocks_needed(key, positions);
        let free = any.free_blocks();
        if needed > free {
            return Err((needed, free));
        }
        for s in self.stores.values_mut() {
            s.reserve(key, positions).expect("stores hold identical block usage");
        }
        Ok(())
    }

    fn free_everywhere(&mut self, key: u64) {
        for s in self.stores.values_mut() {
            s.free_request(key);
        }
        if let Some(rc) = self.reconf.as_mut() {
            rc.on_request_freed(key);
        }
    }

    fn schedule_micro_batches(&mut self) {
        if self.admission_paused || self.ended.is_some() {
            return;
        }
        while self.inflight < self.max_inflight() {
            let mb = self.form_prefill().or_else(|| self.form_decode());
            let Some(mb) = mb else { break };
            let id = self.next_mb;
            self.next_mb += 1;
            for &(i, _, _) in &mb.items {
                self.requests[i].in_flight = true;
            }
            self.mbs.insert(id, mb);
            self.inflight += 1;
            self.stage_queues[0].push_back(id);
            self.start_stage(0);
        }
    }

    fn form_prefill(&mut self) -> Option<MicroBatch> {
        let &i = self.waiting.front()?;
        let r = &self.requests[i];
        let positions = r.req.input_len + 1;
        let key = r.key();
        self.reserve_all(key, positions).ok()?;
        self.waiting.pop_front();
        let seq = self.admit_seq;
        self.admit_seq += 1;
        let r = &mut self.requests[i];
        r.admitted = Some(seq);
        let (id, inc, input) = (r.req.id, r.incarnation, r.req.input_len);
        self.running.insert(seq, i);
        self.push_trace(Event::Admit {
            req: id,
            incarnation: inc,
        });
        Some(MicroBatch {
            epoch: self.epoch,
            prefill: true,
            items: vec![(i, 0, positions)],
            tokens: input,
        })
    }

    fn form_decode(&mut self) -> Option<MicroBatch> {
        let mut items = Vec::new();
        let candidates: Vec<(u64, usize)> = self.ready.iter().copied().collect();
        for (seq, i) in candidates {
            if items.len() >= self.sc.engine.max_batch {
                break;
            }
            if !self.ready.contains(&(seq, i)) {
                continue;
            }
            loop {
                let key = self.requests[i].key();
                let pos = self.requests[i].positions;
                match self.reserve_all(key, pos + 1) {
                    Ok(()) => {
                        items.push((i, pos, 1));
                        self.ready.remove(&(seq, i));
                        break;
                    }
                    Err((needed, free)) => {
                        let req = self.requests[i].req.id;
                        self.push_trace(Event::KvOverflow { req, needed, free });
                        let in_batch: BTreeSet<usize> = items.iter().map(|x| x.0).collect();
                        let victim = self
                            .running
                            .iter()
                            .rev()
                            .map(|(_, &v)| v)
                            .find(|&v| !self.requests[v].in_flight && !in_batch.contains(&v));
                        match victim {
                            Some(v) => {
                                self.preempt(v);
                                if v == i {
                                    break;
                                }
                            }
                            None => break,
                        }
                    }
                }
            }
        }
        if items.is_empty() {
            return None;
        }
        let tokens = items.len() as u32;
        Some(MicroBatch {
            epoch: self.epoch,
            prefill: false,
            items,
            tokens,
        })
    }

    fn preempt(&mut self, i: usize) {
        let key = self.requests[i].key();
        self.free_everywhere(key);
        let r = &mut self.requests[i];
        let seq = r.admitted.take().expect("running request was admitted");
        self.running.remove(&seq);
        self.ready.remove(&(seq, i));
        r.incarnation += 1;
        r.positions = 0;
        r.generated = 0;
        let id = r.req.id;
        self.waiting.push_front(i);
        self.push_trace(Event::Preempt { req: id });
    }

    fn stage_duration(&self, stage: usize, mb: &MicroBatch) -> SimTime {
        let st = self.config.stages[stage];
        let spec = &self.specs[&st.gpu];
        let cost = if mb.prefill { spec.prefill_cost } else { spec.decode_cost };
        SimTime::from_secs_f64(cost * st.len() as f64 * mb.tokens as f64)
    }

    fn start_stage(&mut self, stage: usize) {
        let gpu = self.config.stages[stage].gpu;
        if self.gpu_busy.contains(&gpu) {
            return;
        }
        let Some(id) = self.stage_queues[stage].pop_front() else {
            return;
        };
        let mb = &self.mbs[&id];
        debug_assert_eq!(mb.epoch, self.epoch, "micro-batch crossed a configuration switch");
        let dur = self.stage_duration(stage, mb);
        let st = self.config.stages[stage];
        let e = Event::StageStart {
            mb: id,
            stage: stage as u32,
            gpu,
            epoch: mb.epoch,
            first_layer: st.first,
            last_layer: st.last,
            tokens: mb.tokens,
        };
        self.push_trace(e);
        self.gpu_busy.insert(gpu);
        if let Some((t, e)) = self.weights.set_busy(self.now, gpu, true) {
            self.q.push(t, Ev::Weight(e));
        }
        self.q.push(self.now + dur, Ev::StageDone { mb: id, stage });
    }

    fn on_stage_done(&mut self, id: u64, stage: usize) {
        let gpu = self.config.stages[stage].gpu;
        self.gpu_busy.remove(&gpu);
        if let Some((t, e)) = self.weights.set_busy(self.now, gpu, false) {
            self.q.push(t, Ev::Weight(e));
        }
        let mb = self.mbs[&id].clone();
        self.write_kv(gpu, &mb);
        self.push_trace(Event::StageEnd {
            mb: id,
            stage: stage as u32,
            gpu,
            epoch: mb.epoch,
        });
        if stage + 1 < self.config.stages.len() {
            let next = self.config.stages[stage + 1].gpu;
            let bytes = mb.tokens as u64 * self.sc.engine.activation_bytes_per_token;
            let (_, recv) = self.fabric.post_inference_transfer(self.now, gpu, next, bytes, id);
            self.purposes.insert(recv, Purpose::Activation { mb: id, next_stage: stage + 1 });
        } else {
            self.finish_micro_batch(id);
        }
        self.start_stage(stage);
    }

    fn write_kv(&mut self, gpu: GpuId, mb: &MicroBatch) {
        let groups = self.model().groups_of(&self.config.layers_on(gpu));
        let store = self.stores.get_mut(&gpu).expect("known GPU");
        let mut written: Vec<(u64, u32, u32)> = Vec::with_capacity(mb.items.len());
        for &(i, start, n) in &mb.items {
            let key = kv_key(self.requests[i].req.id, self.requests[i].incarnation);
            for &g in &groups {
                let cs: Vec<u64> = (start..start + n).map(|t| fingerprint(key, g, t)).collect();
                store.append(key, g, &cs).expect("positions reserved before scheduling");
            }
            written.push((key, start, n));
        }
        if let Some(rc) = self.reconf.as_mut() {
            rc.on_kv_written(gpu, &groups, &written, &self.stores[&gpu]);
        }
    }

    fn finish_micro_batch(&mut self, id: u64) {
        let mb = self.mbs.remove(&id).expect("micro-batch exists");
        self.inflight -= 1;
        for &(i, _, n) in &mb.items {
            let now = self.now;
            let r = &mut self.requests[i];
            r.in_flight = false;
            r.positions += n;
            r.generated += 1;
            let rid = r.req.id;
            if r.first_token.is_none() {
                r.first_token = Some(now);
                self.push_trace(Event::FirstToken { req: rid });
            }
            let r = &self.requests[i];
            if r.generated >= r.req.output_len {
                self.complete(i);
            } else {
                let seq = r.admitted.expect("admitted");
                self.ready.insert((seq, i));
            }
        }
        self.on_pipeline_progress();
    }

    fn complete(&mut self, i: usize) {
        let r = &self.requests[i];
        let key = r.key();
        let blocks = self.stores.values().next().and_then(|s| s.table(key)).map_or(0, |t| t.entries.len() as u32);
        let e = Event::Complete {
            req: r.req.id,
            arrival_ns: r.req.arrival.0,
            first_token_ns: r.first_token.expect("first token before completion").0,
            input: r.req.input_len,
            output: r.req.output_len,
            kv_positions: r.positions,
            kv_blocks: blocks,
        };
        self.push_trace(e);
        let seq = self.requests[i].admitted.expect("admitted");
        self.running.remove(&seq);
        self.requests[i].done = true;
        self.free_everywhere(key);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::{GIB, MIB};

    pub(crate) fn gpu(id: u32, prefill: f64, decode: f64) -> GpuSpec {
        GpuSpec {
            id: GpuId(id),
            name: format!("g{id}"),
            mem_total: 16 * GIB,
            mem_bandwidth: Bandwidth(1e12),
            prefill_cost: prefill,
            decode_cost: decode,
            alloc_granularity: 2 * MIB,
        }
    }

    pub(crate) fn scenario(gpus: u32, counts: &[u32], workload: WorkloadSpec) -> Scenario {
        Scenario {
            cluster: (0..gpus).map(|i| gpu(i, 1e-5, 1e-4)).collect(),
            model: ModelSpec {
                num_layers: counts.iter().sum(),
                layer_weight_bytes: 256 * MIB,
                token_kv_bytes_per_layer: 8 * KIB,
                stacking_factor: 4,
            },
            initial: PpConfig::from_counts(counts),
            workload,
            triggers: Vec::new(),
            flags: Flags::default(),
            engine: EngineConfig::default(),
            seed: 1,
        }
    }

    #[test]
    fn single_request_closed_form() {
        let mut w = WorkloadSpec::fixed(Pattern::PrefillHeavy, 1.0, 1);
        w.prefill_heavy = Lengths { input: 100, output: 5 };
        let sc = scenario(1, &[8], w);
        let res = Simulation::new(sc).run();
        let m = &res.metrics;
        assert_eq!(m.completed, 1);
        // prefill: 1e-5 · 8 layers · 100 tokens; decode: 1e-4 · 8 · 1.
        assert!((m.ttft_mean - 8e-3).abs() < 1e-9);
        assert!((m.tpot_mean - 8e-4).abs() < 1e-9);
        assert_eq!(res.ended, "complete");
    }

    #[test]
    fn pipeline_stage_order_and_token_conservation() {
        let sc = scenario(2, &[4, 4], WorkloadSpec::fixed(Pattern::PrefillHeavy, 50.0, 20));
        let res = Simulation::new(sc).run();
        assert_eq!(res.metrics.completed, 20);
        let mut ends: BTreeMap<u64, (u32, u64)> = BTreeMap::new();
        for r in res.trace.records() {
            match &r.event {
                Event::StageStart { mb, stage, .. } => {
                    if let Some(&(s, t)) = ends.get(mb) {
                        assert_eq!(s + 1, *stage);
                        assert!(r.t_ns >= t);
                    }
                }
                Event::StageEnd { mb, stage, .. } => {
                    ends.insert(*mb, (*stage, r.t_ns));
                }
                Event::Complete {
                    input,
                    output,
                    kv_positions,
                    ..
                } => assert_eq!(*kv_positions, input + output),
                _ => {}
            }
        }
    }

    #[test]
    fn identical_seeds_give_identical_traces() {
        let sc = scenario(2, &[4, 4], WorkloadSpec::fixed(Pattern::DecodeHeavy, 20.0, 10));
        let a = Simulation::new(sc.clone()).run().trace.to_jsonl();
        let b = Simulation::new(sc).run().trace.to_jsonl();
        assert_eq!(a, b);
    }

    fn live_scenario() -> Scenario {
        let mut sc = scenario(2, &[8, 8], WorkloadSpec::fixed(Pattern::DecodeHeavy, 20.0, 40));
        sc.triggers.push(Trigger {
            at: SimTime::from_millis(500),
            target: PpConfig::from_counts(&[4, 12]),
            tau: crate::coordinator::DEFAULT_TAU,
            poll_interval: crate::coordinator::default_poll_interval(),
            fault: None,
        });
        sc.engine.capture_sync_snapshots = true;
        sc
    }

    #[test]
    fn live_reconfiguration_commits() {
        let res = Simulation::new(live_scenario()).run();
        assert_eq!(res.outcomes, vec![(0, Outcome::Success)]);
        assert_eq!(res.final_config.counts(), vec![4, 12]);
        assert_eq!(res.metrics.completed, 40);
        assert!(!res.snapshots.is_empty());
        for s in &res.snapshots {
            assert!(!s.src_slots.is_empty());
            assert_eq!(s.src_slots, s.dst_slots);
        }
    }

    #[test]
    fn injected_overflow_rolls_back() {
        let mut sc = live_scenario();
        sc.triggers[0].fault = Some(Fault::MigrationOverflowAfterPatches(2));
        let res = Simulation::new(sc).run();
        assert_eq!(res.outcomes[0].1.label(), "failed");
        assert_eq!(res.final_config.counts(), vec![8, 8]);
        assert_eq!(res.metrics.completed, 40);
        let rb = res
            .trace
            .events()
            .find_map(|(_, e)| match e {
                Event::Rollback {
                    state_before,
                    state_after,
                    ..
                } => Some((*state_before, *state_after)),
                _ => None,
            })
            .unwrap();
        assert_eq!(rb.0, rb.1);
    }
}
