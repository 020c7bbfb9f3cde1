//! Static world description: GPUs, the model, pipeline configurations, and
//! the pure set algebra that turns a (current, target) configuration pair into
//! per-GPU add/delete/migrate maps.
//!
//! Layers are 1-indexed everywhere in this module's public surface.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::units::{Bandwidth, MIB};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GpuId(pub u32);

impl fmt::Display for GpuId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "gpu{}", self.0)
    }
}

/// 1-indexed transformer layer.
pub type Layer = u32;

/// 0-indexed stacking group; group `g` holds layers `g*k+1 ..= (g+1)*k`.
pub type LayerGroup = u32;

pub type LayerSet = BTreeSet<Layer>;

/// GPU → layer set.
pub type LayerAssignmentMap = BTreeMap<GpuId, LayerSet>;

/// (source, destination) → layers streamed from source to destination.
pub type MigrationMap = BTreeMap<(GpuId, GpuId), LayerSet>;

pub const DEFAULT_ALLOC_GRANULARITY: u64 = 2 * MIB;

#[derive(Debug, Clone, PartialEq)]
pub struct GpuSpec {
    pub id: GpuId,
    pub name: String,
    pub mem_total: u64,
    pub mem_bandwidth: Bandwidth,
    /// Seconds per (layer · token) of prefill compute.
    pub prefill_cost: f64,
    /// Seconds per (layer · sequence) of one decode step.
    pub decode_cost: f64,
    pub alloc_granularity: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub num_layers: u32,
    pub layer_weight_bytes: u64,
    pub token_kv_bytes_per_layer: u64,
    pub stacking_factor: u32,
}

impl ModelSpec {
    pub fn num_groups(&self) -> u32 {
        self.num_layers / self.stacking_factor
    }

    pub fn group_of(&self, layer: Layer) -> LayerGroup {
        debug_assert!(layer >= 1);
        (layer - 1) / self.stacking_factor
    }

    pub fn layers_of_group(&self, group: LayerGroup) -> impl Iterator<Item = Layer> {
        let k = self.stacking_factor;
        (group * k + 1)..=((group + 1) * k)
    }

    /// Token-layer slots in one physical allocation unit (`C`).
    pub fn block_token_capacity(&self, alloc_granularity: u64) -> u32 {
        (alloc_granularity / self.token_kv_bytes_per_layer) as u32
    }

    /// Token positions each stacked layer gets inside one physical block (`C/k`).
    pub fn layer_share(&self, alloc_granularity: u64) -> u32 {
        self.block_token_capacity(alloc_granularity) / self.stacking_factor
    }

    /// Per-layer logical KV page size (`P`).
    pub fn page_bytes(&self, alloc_granularity: u64) -> u64 {
        alloc_granularity / self.stacking_factor as u64
    }

    /// Groups covered by a group-aligned layer set.
    pub fn groups_of(&self, layers: &LayerSet) -> BTreeSet<LayerGroup> {
        layers.iter().map(|&l| self.group_of(l)).collect()
    }
}

/// One pipeline stage: a GPU and the inclusive layer range it serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Stage {
    pub gpu: GpuId,
    pub first: Layer,
    pub last: Layer,
}

impl Stage {
    pub fn len(&self) -> u32 {
        if self.last < self.first {
            0
        } else {
            self.last - self.first + 1
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layers(&self) -> LayerSet {
        (self.first..=self.last).collect()
    }
}

/// Ordered pipeline configuration.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PpConfig {
    pub stages: Vec<Stage>,
}

impl PpConfig {
    pub fn new(stages: Vec<Stage>) -> Self {
        PpConfig { stages }
    }

    /// Build from per-GPU layer counts, assigning GPU ids `0..n` in order.
    pub fn from_counts(counts: &[u32]) -> Self {
        let mut next = 1;
        let stages = counts
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let s = Stage {
                    gpu: GpuId(i as u32),
                    first: next,
                    last: next + c - 1,
                };
                next += c;
                s
            })
            .collect();
        PpConfig { stages }
    }

    /// Build from `(first, last)` ranges, assigning GPU ids `0..n` in order.
    pub fn from_ranges(ranges: &[(Layer, Layer)]) -> Self {
        PpConfig {
            stages: ranges
                .iter()
                .enumerate()
                .map(|(i, &(first, last))| Stage {
                    gpu: GpuId(i as u32),
                    first,
                    last,
                })
                .collect(),
        }
    }

    pub fn layer_sets(&self) -> LayerAssignmentMap {
        self.stages.iter().map(|s| (s.gpu, s.layers())).collect()
    }

    pub fn layers_on(&self, gpu: GpuId) -> LayerSet {
        self.stages
            .iter()
            .find(|s| s.gpu == gpu)
            .map(Stage::layers)
            .unwrap_or_default()
    }

    pub fn owner_of(&self, layer: Layer) -> Option<GpuId> {
        self.stages
            .iter()
            .find(|s| s.first <= layer && layer <= s.last)
            .map(|s| s.gpu)
    }

    pub fn gpus(&self) -> impl Iterator<Item = GpuId> + '_ {
        self.stages.iter().map(|s| s.gpu)
    }

    pub fn counts(&self) -> Vec<u32> {
        self.stages.iter().map(Stage::len).collect()
    }
}

impl fmt::Display for PpConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .stages
            .iter()
            .map(|s| format!("{}", s.len()))
            .collect();
        write!(f, "{}", parts.join("/"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyConfig,
    UnknownGpu(GpuId),
    DuplicateGpu(GpuId),
    EmptyRange(GpuId),
    Overlap { gpu: GpuId, layer: Layer },
    Gap { after: Layer },
    NotCovering { expected_last: Layer, got_last: Layer },
    NotStartingAtOne { first: Layer },
    NotMultipleOfK { gpu: GpuId, len: u32, k: u32 },
    LayersNotMultipleOfK { num_layers: u32, k: u32 },
    ZeroStackingFactor,
    GranularityNotDivisibleByK { gpu: GpuId },
    StackedBlockExceedsGranularity { gpu: GpuId },
    BadGpuSpec { gpu: GpuId, reason: &'static str },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyConfig => write!(f, "configuration has no stages"),
            Violation::UnknownGpu(g) => write!(f, "{g} is not in the cluster"),
            Violation::DuplicateGpu(g) => write!(f, "{g} appears in more than one stage"),
            Violation::EmptyRange(g) => write!(f, "{g} has an empty layer range"),
            Violation::Overlap { gpu, layer } => {
                write!(f, "overlapping ranges: layer {layer} assigned again on {gpu}")
            }
            Violation::Gap { after } => write!(f, "gap in layer coverage after layer {after}"),
            Violation::NotCovering {
                expected_last,
                got_last,
            } => write!(f, "ranges end at layer {got_last}, model has {expected_last}"),
            Violation::NotStartingAtOne { first } => {
                write!(f, "first stage starts at layer {first}, expected 1")
            }
            Violation::NotMultipleOfK { gpu, len, k } => {
                write!(f, "{gpu} range length {len} is not a multiple of k={k}")
            }
            Violation::LayersNotMultipleOfK { num_layers, k } => {
                write!(f, "num_layers {num_layers} is not a multiple of k={k}")
            }
            Violation::ZeroStackingFactor => write!(f, "stacking factor must be positive"),
            Violation::GranularityNotDivisibleByK { gpu } => {
                write!(f, "{gpu} allocation granularity is not divisible by k")
            }
            Violation::StackedBlockExceedsGranularity { gpu } => write!(
                f,
                "{gpu}: k stacked token slots exceed one allocation unit"
            ),
            Violation::BadGpuSpec { gpu, reason } => write!(f, "{gpu}: {reason}"),
        }
    }
}

pub fn validate_cluster(model: &ModelSpec, cluster: &[GpuSpec]) -> Vec<Violation> {
    let mut out = Vec::new();
    let k = model.stacking_factor;
    if k == 0 {
        out.push(Violation::ZeroStackingFactor);
        return out;
    }
    if !model.num_layers.is_multiple_of(k) {
        out.push(Violation::LayersNotMultipleOfK {
            num_layers: model.num_layers,
            k,
        });
    }
    for g in cluster {
        if g.mem_total == 0 {
            out.push(Violation::BadGpuSpec {
                gpu: g.id,
                reason: "mem_total must be positive",
            });
        }
        if g.mem_bandwidth.0 <= 0.0 || g.prefill_cost <= 0.0 || g.decode_cost <= 0.0 {
            out.push(Violation::BadGpuSpec {
                gpu: g.id,
                reason: "bandwidth and costs must be positive",
            });
        }
        if g.alloc_granularity == 0 || g.mem_total % g.alloc_granularity != 0 {
            out.push(Violation::BadGpuSpec {
                gpu: g.id,
                reason: "alloc_granularity must divide mem_total",
            });
        }
        if g.alloc_granularity % k as u64 != 0 {
            out.push(Violation::GranularityNotDivisibleByK { gpu: g.id });
        }
        if model.token_kv_bytes_per_layer == 0
            || model.token_kv_bytes_per_layer * k as u64 > g.alloc_granularity
        {
            out.push(Violation::StackedBlockExceedsGranularity { gpu: g.id });
        }
    }
    out
}

/// Returns every violated configuration, model, or cluster invariant.
pub fn validate_pp_config(config: &PpConfig, model: &ModelSpec, cluster: &[GpuSpec]) -> Vec<Violation> {
    let mut out = validate_cluster(model, cluster);
    let k = model.stacking_factor.max(1);
    if config.stages.is_empty() {
        out.push(Violation::EmptyConfig);
        return out;
    }
    let mut seen = BTreeSet::new();
    for s in &config.stages {
        if !cluster.iter().any(|g| g.id == s.gpu) {
            out.push(Violation::UnknownGpu(s.gpu));
        }
        if !seen.insert(s.gpu) {
            out.push(Violation::DuplicateGpu(s.gpu));
        }
        if s.is_empty() {
            out.push(Violation::EmptyRange(s.gpu));
        } else if s.len() % k != 0 {
            out.push(Violation::NotMultipleOfK {
                gpu: s.gpu,
                len: s.len(),
                k,
            });
        }
    }
    let first = config.stages[0].first;
    if first != 1 {
        out.push(Violation::NotStartingAtOne { first });
    }
    for pair in config.stages.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if b.first <= a.last {
            out.push(Violation::Overlap {
                gpu: b.gpu,
                layer: b.first,
            });
        } else if b.first > a.last + 1 {
            out.push(Violation::Gap { after: a.last });
        }
    }
    let last = config.stages.last().map(|s| s.last).unwrap_or(0);
    if last != model.num_layers {
        out.push(Violation::NotCovering {
            expected_last: model.num_layers,
            got_last: last,
        });
    }
    out
}

/// KV cache utilization ratio `u` held exactly as parts per million.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UtilRatio {
    ppm: u32,
}

impl UtilRatio {
    pub const ONE: UtilRatio = UtilRatio { ppm: 1_000_000 };

    pub fn from_ppm(ppm: u32) -> Self {
        assert!(ppm > 0 && ppm <= 1_000_000, "u must be in (0, 1]");
        UtilRatio { ppm }
    }

    pub fn from_f64(u: f64) -> Self {
        Self::from_ppm((u * 1e6).round() as u32)
    }

    pub fn ppm(self) -> u32 {
        self.ppm
    }

    pub fn as_f64(self) -> f64 {
        self.ppm as f64 / 1e6
    }
}

impl Default for UtilRatio {
    fn default() -> Self {
        UtilRatio::from_ppm(900_000)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("layer weights exceed the memory budget (shortfall {shortfall} bytes)")]
pub struct Infeasible {
    pub shortfall: u64,
}

/// `⌊(M·u − L·W)/(L·P)⌋`, with a negative numerator reported as infeasible.
pub fn max_blocks_raw(
    mem_total: u64,
    util: UtilRatio,
    layers: u32,
    weight_bytes: u64,
    page_bytes: u64,
) -> Result<u64, Infeasible> {
    assert!(layers > 0, "max_blocks needs at least one layer");
    assert!(page_bytes > 0, "page size must be positive");
    // floor((x - a) / b) == floor((floor(x) - a) / b) for integer a and b > 0.
    let budget = (mem_total as u128 * util.ppm() as u128) / 1_000_000;
    let weights = layers as u128 * weight_bytes as u128;
    if weights > budget {
        return Err(Infeasible {
            shortfall: (weights - budget) as u64,
        });
    }
    Ok(((budget - weights) / (layers as u128 * page_bytes as u128)) as u64)
}

pub fn max_blocks(gpu: &GpuSpec, layers: u32, model: &ModelSpec, util: UtilRatio) -> Result<u64, Infeasible> {
    max_blocks_raw(
        gpu.mem_total,
        util,
        layers,
        model.layer_weight_bytes,
        model.page_bytes(gpu.alloc_granularity),
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConfigDiff {
    /// Every GPU of either config, with `cur ∪ tgt`.
    pub c_int: LayerAssignmentMap,
    pub m_add: LayerAssignmentMap,
    pub m_del: LayerAssignmentMap,
    pub m_mig: MigrationMap,
}

impl ConfigDiff {
    pub fn is_noop(&self) -> bool {
        self.m_add.is_empty() && self.m_del.is_empty() && self.m_mig.is_empty()
    }
}

/// Intermediate layer sets and the add / delete / migrate maps between two configurations.
/// Empty per-GPU sets are omitted from the three maps.
pub fn diff_configs(c_cur: &PpConfig, c_tgt: &PpConfig) -> ConfigDiff {
    let cur = c_cur.layer_sets();
    let tgt = c_tgt.layer_sets();
    let gpus: BTreeSet<GpuId> = cur.keys().chain(tgt.keys()).copied().collect();
    let empty = LayerSet::new();

    let mut diff = ConfigDiff::default();
    for &gpu in &gpus {
        let cur_i = cur.get(&gpu).unwrap_or(&empty);
        let tgt_i = tgt.get(&gpu).unwrap_or(&empty);
        let int_i: LayerSet = cur_i.union(tgt_i).copied().collect();
        let add: LayerSet = tgt_i.difference(cur_i).copied().collect();
        let del: LayerSet = int_i.difference(tgt_i).copied().collect();
        if !add.is_empty() {
            diff.m_add.insert(gpu, add);
        }
        if !del.is_empty() {
            diff.m_del.insert(gpu, del);
        }
        diff.c_int.insert(gpu, int_i);
    }
    for (&dst, layers) in &diff.m_add {
        for &layer in layers {
            let src = c_cur
                .owner_of(layer)
                .expect("valid configs cover every layer");
            diff.m_mig.entry((src, dst)).or_default().insert(layer);
        }
    }
    diff
}

/// Every split of `num_layers` over `gpus` stages whose lengths are positive
/// multiples of `k`, in lexicographic order of the count vector.
pub fn enumerate_configs(num_layers: u32, gpus: usize, k: u32) -> Vec<PpConfig> {
    fn rec(left: u32, slots: usize, k: u32, cur: &mut Vec<u32>, out: &mut Vec<PpConfig>) {
        if slots == 1 {
            if left > 0 && left.is_multiple_of(k) {
                cur.push(left);
                out.push(PpConfig::from_counts(cur));
                cur.pop();
            }
            return;
        }
        let mut c = k;
        while c + k * (slots as u32 - 1) <= left {
            cur.push(c);
            rec(left - c, slots - 1, k, cur, out);
            cur.pop();
            c += k;
        }
    }
    let mut out = Vec::new();
    if gpus > 0 && k > 0 {
        rec(num_layers, gpus, k, &mut Vec::new(), &mut out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::GIB;

    fn gpu(id: u32) -> GpuSpec {
        GpuSpec {
            id: GpuId(id),
            name: format!("g{id}"),
            mem_total: 80 * GIB,
            mem_bandwidth: Bandwidth(2.0e12),
            prefill_cost: 1e-5,
            decode_cost: 1e-4,
            alloc_granularity: DEFAULT_ALLOC_GRANULARITY,
        }
    }

    fn model(layers: u32, k: u32) -> ModelSpec {
        ModelSpec {
            num_layers: layers,
            layer_weight_bytes: 800 * MIB,
            token_kv_bytes_per_layer: 4096,
            stacking_factor: k,
        }
    }

    fn set(v: &[u32]) -> LayerSet {
        v.iter().copied().collect()
    }

    #[test]
    fn worked_three_gpu_config_is_valid() {
        let c = PpConfig::from_ranges(&[(1, 2), (3, 4), (5, 6)]);
        let cl: Vec<_> = (0..3).map(gpu).collect();
        assert!(validate_pp_config(&c, &model(6, 1), &cl).is_empty());
    }

    #[test]
    fn overlap_is_reported() {
        let c = PpConfig::from_ranges(&[(1, 2), (2, 3), (4, 6)]);
        let cl: Vec<_> = (0..3).map(gpu).collect();
        let v = validate_pp_config(&c, &model(6, 1), &cl);
        assert!(v.contains(&Violation::Overlap {
            gpu: GpuId(1),
            layer: 2
        }));
    }

    #[test]
    fn range_not_multiple_of_k_is_reported() {
        let c = PpConfig::from_counts(&[6, 2]);
        let cl: Vec<_> = (0..2).map(gpu).collect();
        let v = validate_pp_config(&c, &model(8, 4), &cl);
        assert!(v.iter().any(|x| matches!(x, Violation::NotMultipleOfK { len: 6, k: 4, .. })));
    }

    #[test]
    fn gap_and_coverage_are_reported() {
        let c = PpConfig::from_ranges(&[(1, 2), (4, 5)]);
        let cl: Vec<_> = (0..2).map(gpu).collect();
        let v = validate_pp_config(&c, &model(6, 1), &cl);
        assert!(v.contains(&Violation::Gap { after: 2 }));
        assert!(v.iter().any(|x| matches!(x, Violation::NotCovering { .. })));
    }

    #[test]
    fn max_blocks_examples() {
        assert_eq!(max_blocks_raw(100, UtilRatio::ONE, 1, 0, 1), Ok(100));
        assert_eq!(
            max_blocks_raw(81920 * MIB, UtilRatio::from_f64(0.9), 40, 800 * MIB, 2 * MIB),
            Ok(521)
        );
        assert_eq!(
            max_blocks_raw(10, UtilRatio::ONE, 5, 3, 1),
            Err(Infeasible { shortfall: 5 })
        );
    }

    #[test]
    fn diff_worked_example() {
        let a = PpConfig::from_ranges(&[(1, 2), (3, 4), (5, 6)]);
        let b = PpConfig::from_ranges(&[(1, 1), (2, 3), (4, 6)]);
        let d = diff_configs(&a, &b);
        assert_eq!(d.m_add, BTreeMap::from([(GpuId(1), set(&[2])), (GpuId(2), set(&[4]))]));
        assert_eq!(d.m_del, BTreeMap::from([(GpuId(0), set(&[2])), (GpuId(1), set(&[4]))]));
        assert_eq!(
            d.m_mig,
            BTreeMap::from([
                ((GpuId(0), GpuId(1)), set(&[2])),
                ((GpuId(1), GpuId(2)), set(&[4]))
            ])
        );
        assert_eq!(d.c_int[&GpuId(1)], set(&[2, 3, 4]));
    }

    #[test]
    fn diff_identity_is_empty() {
        let a = PpConfig::from_counts(&[2, 2, 2]);
        assert!(diff_configs(&a, &a).is_noop());
    }

    #[test]
    fn diff_two_gpu_trace() {
        let a = PpConfig::from_ranges(&[(1, 4), (5, 8)]);
        let b = PpConfig::from_ranges(&[(1, 2), (3, 8)]);
        let d = diff_configs(&a, &b);
        assert_eq!(d.m_mig, BTreeMap::from([((GpuId(0), GpuId(1)), set(&[3, 4]))]));
        assert_eq!(d.m_add, BTreeMap::from([(GpuId(1), set(&[3, 4]))]));
        assert_eq!(d.m_del, BTreeMap::from([(GpuId(0), set(&[3, 4]))]));
    }

    #[test]
    fn stacking_geometry() {
        let m = ModelSpec {
            num_layers: 8,
            layer_weight_bytes: 0,
            token_kv_bytes_per_layer: 8 * 1024,
            stacking_factor: 4,
        };
        assert_eq!(m.block_token_capacity(2 * MIB), 256);
        assert_eq!(m.layer_share(2 * MIB), 64);
        assert_eq!(m.group_of(1), 0);
        assert_eq!(m.group_of(4), 0);
        assert_eq!(m.group_of(5), 1);
        assert_eq!(m.layers_of_group(1).collect::<Vec<_>>(), vec![5, 6, 7, 8]);
    }

    #[test]
    fn enumeration_counts() {
        assert_eq!(enumerate_configs(6, 2, 1).len(), 5);
        assert_eq!(enumerate_configs(6, 2, 2).len(), 2);
        assert_eq!(enumerate_configs(32, 4, 8).len(), 1);
        // compositions of 8 into 3 positive parts
        assert_eq!(enumerate_configs(8, 3, 1).len(), 21);
        assert!(enumerate_configs(6, 2, 4).is_empty());
    }
}
