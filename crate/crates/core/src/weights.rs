//! Background staging of layer weights from host memory to GPUs.
//!
//! Each GPU has a FIFO of layers to stage, loaded one layer at a time over its
//! host link. Progress is fluid: whenever the GPU starts or stops computing,
//! the in-progress layer's rate is recomputed and its completion event is
//! re-issued under a new generation number, so stale completions are ignored.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::cluster::{GpuId, Layer, LayerSet};
use crate::units::{Bandwidth, SimTime, GIB};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StagingPriority {
    /// Staging makes no progress while the GPU computes.
    Strict,
    /// Staging keeps `loader / (inference + loader)` of the link while computing.
    Weighted { inference: f64, loader: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightConfig {
    pub host_to_device: Bandwidth,
    pub disk_to_device: Bandwidth,
    pub priority: StagingPriority,
}

impl Default for WeightConfig {
    fn default() -> Self {
        WeightConfig {
            host_to_device: Bandwidth(16.0 * GIB as f64),
            disk_to_device: Bandwidth(2.0 * GIB as f64),
            priority: StagingPriority::Strict,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WeightError {
    #[error("{gpu}: staging {needed} bytes exceeds {headroom} bytes of headroom")]
    OutOfMemory { gpu: GpuId, needed: u64, headroom: u64 },
    #[error("{gpu}: layer {layer} is assigned by the committed configuration")]
    LayerInUse { gpu: GpuId, layer: Layer },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeightEvent {
    pub gpu: GpuId,
    pub generation: u64,
}

#[derive(Debug, Clone)]
struct InProgress {
    layer: Layer,
    remaining: f64,
    rate: f64,
    last_update: SimTime,
}

#[derive(Debug, Clone, Default)]
struct GpuStaging {
    queue: VecDeque<Layer>,
    current: Option<InProgress>,
    busy: bool,
    generation: u64,
}

#[derive(Debug, Clone)]
pub struct WeightLoader {
    cfg: WeightConfig,
    layer_bytes: u64,
    resident: BTreeMap<GpuId, LayerSet>,
    host_missing: BTreeSet<Layer>,
    staging: BTreeMap<GpuId, GpuStaging>,
}

impl WeightLoader {
    pub fn new(cfg: WeightConfig, layer_bytes: u64, resident: BTreeMap<GpuId, LayerSet>) -> Self {
        WeightLoader {
            cfg,
            layer_bytes,
            resident,
            host_missing: BTreeSet::new(),
            staging: BTreeMap::new(),
        }
    }

    /// Marks a layer as absent from host memory; it will load from disk.
    pub fn set_host_resident(&mut self, layer: Layer, resident: bool) {
        if resident {
            self.host_missing.remove(&layer);
        } else {
            self.host_missing.insert(layer);
        }
    }

    pub fn resident(&self, gpu: GpuId) -> LayerSet {
        self.resident.get(&gpu).cloned().unwrap_or_default()
    }

    pub fn is_resident(&self, gpu: GpuId, layer: Layer) -> bool {
        self.resident.get(&gpu).is_some_and(|s| s.contains(&layer))
    }

    pub fn resident_bytes(&self, gpu: GpuId) -> u64 {
        self.resident.get(&gpu).map_or(0, |s| s.len() as u64) * self.layer_bytes
    }

    /// Bytes still to be staged on `gpu`, including the queue.
    pub fn pending_bytes(&self, gpu: GpuId) -> u64 {
        self.staging.get(&gpu).map_or(0, |s| {
            let cur = s.current.as_ref().map_or(0, |c| c.remaining.ceil() as u64);
            cur + s.queue.len() as u64 * self.layer_bytes
        })
    }

    pub fn is_idle(&self, gpu: GpuId) -> bool {
        self.staging
            .get(&gpu)
            .is_none_or(|s| s.current.is_none() && s.queue.is_empty())
    }

    pub fn all_idle(&self) -> bool {
        self.staging.keys().all(|&g| self.is_idle(g))
    }

    /// Time to stage `layers` with dedicated bandwidth.
    pub fn dedicated_time(&self, layers: &LayerSet) -> SimTime {
        let secs: f64 = layers
            .iter()
            .map(|l| self.layer_bytes as f64 / self.bandwidth_for(*l).0)
            .sum();
        SimTime::from_secs_f64(secs)
    }

    fn bandwidth_for(&self, layer: Layer) -> Bandwidth {
        if self.host_missing.contains(&layer) {
            self.cfg.disk_to_device
        } else {
            self.cfg.host_to_device
        }
    }

    fn rate(&self, layer: Layer, busy: bool) -> f64 {
        let bw = self.bandwidth_for(layer).0;
        match (busy, self.cfg.priority) {
            (false, _) => bw,
            (true, StagingPriority::Strict) => 0.0,
            (true, StagingPriority::Weighted { inference, loader }) => bw * loader / (inference + loader),
        }
    }

    /// Queues `layers` that are not yet resident. `headroom` is the free
    /// memory the caller guarantees for them.
    pub fn stage(
        &mut self,
        now: SimTime,
        gpu: GpuId,
        layers: &LayerSet,
        headroom: u64,
    ) -> Result<Option<(SimTime, WeightEvent)>, WeightError> {
        let new: Vec<Layer> = layers
            .iter()
            .copied()
            .filter(|l| !self.is_resident(gpu, *l))
            .collect();
        let needed = new.len() as u64 * self.layer_bytes + self.pending_bytes(gpu);
        if needed > headroom {
            return Err(WeightError::OutOfMemory { gpu, needed, headroom });
        }
        self.staging.entry(gpu).or_default().queue.extend(new);
        Ok(self.advance(now, gpu))
    }

    /// Updates the compute state of `gpu`; returns a re-issued completion.
    pub fn set_busy(&mut self, now: SimTime, gpu: GpuId, busy: bool) -> Option<(SimTime, WeightEvent)> {
        let st = self.staging.entry(gpu).or_default();
        if st.busy == busy {
            return None;
        }
        st.busy = busy;
        st.current.as_ref()?;
        self.advance(now, gpu)
    }

    /// Settles progress, starts the next layer if needed, and returns the
    /// next completion event.
    fn advance(&mut self, now: SimTime, gpu: GpuId) -> Option<(SimTime, WeightEvent)> {
        let busy = self.staging.get(&gpu).is_some_and(|s| s.busy);
        let st = self.staging.get_mut(&gpu)?;
        if let Some(c) = st.current.as_mut() {
            let dt = now.saturating_sub(c.last_update).as_secs_f64();
            c.remaining = (c.remaining - c.rate * dt).max(0.0);
            c.last_update = now;
        } else {
            let layer = st.queue.pop_front()?;
            st.current = Some(InProgress {
                layer,
                remaining: self.layer_bytes as f64,
                rate: 0.0,
                last_update: now,
            });
        }
        let layer = st.current.as_ref().unwrap().layer;
        let rate = self.rate(layer, busy);
        let st = self.staging.get_mut(&gpu).unwrap();
        let c = st.current.as_mut().unwrap();
        c.rate = rate;
        st.generation += 1;
        let ev = WeightEvent {
            gpu,
            generation: st.generation,
        };
        if c.remaining <= 0.0 {
            Some((now, ev))
        } else if rate > 0.0 {
            Some((now + SimTime((c.remaining / rate * 1e9).ceil() as u64), ev))
        } else {
            None
        }
    }

    /// Handles a completion. Returns the layer that became resident, if the
    /// event was current, and the next completion to schedule.
    pub fn on_event(&mut self, now: SimTime, ev: WeightEvent) -> (Option<Layer>, Option<(SimTime, WeightEvent)>) {
        let Some(st) = self.staging.get_mut(&ev.gpu) else {
            return (None, None);
        };
        if st.generation != ev.generation || st.current.is_none() {
            return (None, None);
        }
        let layer = st.current.take().unwrap().layer;
        self.resident.entry(ev.gpu).or_default().insert(layer);
        (Some(layer), self.advance(now, ev.gpu))
    }

    /// Removes resident weights. `in_use` is the GPU's committed layer set.
    pub fn evict(&mut self, gpu: GpuId, layers: &LayerSet, in_use: &LayerSet) -> Result<u64, WeightError> {
        if let Some(&layer) = layers.intersection(in_use).next() {
            return Err(WeightError::LayerInUse { gpu, layer });
        }
        let set = self.resident.entry(gpu).or_default();
        let mut freed = 0;
        for l in layers {
            if set.remove(l) {
                freed += self.layer_bytes;
            }
        }
        Ok(freed)
    }

    /// Drops queued and in-progress staging on `gpu`.
    pub fn cancel(&mut self, gpu: GpuId) {
        if let Some(st) = self.staging.get_mut(&gpu) {
            st.queue.clear();
            st.current = None;
            st.generation += 1;
        }
    }

    /// Stages synchronously, ignoring priority. Returns the time it takes.
    pub fn load_now(&mut self, gpu: GpuId, layers: &LayerSet) -> SimTime {
        let new: LayerSet = layers
            .iter()
            .copied()
            .filter(|l| !self.is_resident(gpu, *l))
            .collect();
        let t = self.dedicated_time(&new);
        self.resident.entry(gpu).or_default().extend(new);
        t
    }
}
