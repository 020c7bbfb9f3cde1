//! Scenario files: TOML with an explicit unit on every physical quantity.
//!
//! ```toml
//! seed = 7
//!
//! [model]
//! layers = 32
//! layer_weight = "800 MiB"
//! token_kv_per_layer = "8 KiB"
//! stacking = 4
//!
//! [[gpu]]
//! count = 4
//! name = "a100"
//! memory = "80 GiB"
//! memory_bandwidth = "2000 GB/s"
//! prefill_cost = "20 us"
//! decode_cost = "200 us"
//!
//! [pipeline]
//! initial = [8, 8, 8, 8]
//!
//! [workload]
//! pattern = "prefill_heavy"
//! rate = "4 req/s"
//! requests = 200
//!
//! [[trigger]]
//! at = "10 s"
//! target = [4, 12, 8, 8]
//! ```
//!
//! GPUs are numbered in file order. Stage `i` of a count list runs on GPU `i`.

use serde::Deserialize;

use super::{EngineConfig, Fault, Flags, Lengths, Pattern, Scenario, Trigger, WorkloadSpec};
use crate::cluster::{validate_cluster, validate_pp_config, GpuId, GpuSpec, ModelSpec, PpConfig, UtilRatio};
use crate::coordinator::{config_budget, default_poll_interval, DEFAULT_TAU};
use crate::fabric::SharingMode;
use crate::units::{BandwidthQty, ByteQty, RateQty, SecondsQty, TimeQty, TokenQty};
use crate::weights::{StagingPriority, WeightConfig};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{field}: {message}")]
pub struct ScenarioError {
    pub field: String,
    pub message: String,
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    seed: Option<u64>,
    model: RawModel,
    gpu: Vec<RawGpu>,
    pipeline: RawPipeline,
    workload: RawWorkload,
    #[serde(default)]
    trigger: Vec<RawTrigger>,
    #[serde(default)]
    engine: RawEngine,
    #[serde(default)]
    fabric: RawFabric,
    #[serde(default)]
    weights: RawWeights,
    #[serde(default)]
    flags: RawFlags,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    layers: u32,
    layer_weight: ByteQty,
    token_kv_per_layer: ByteQty,
    #[serde(default = "one")]
    stacking: u32,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGpu {
    #[serde(default = "one")]
    count: u32,
    #[serde(default)]
    name: String,
    memory: ByteQty,
    memory_bandwidth: BandwidthQty,
    prefill_cost: SecondsQty,
    decode_cost: SecondsQty,
    alloc_granularity: Option<ByteQty>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPipeline {
    initial: Vec<u32>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLengths {
    input: TokenQty,
    output: TokenQty,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWorkload {
    pattern: Pattern,
    rate: RateQty,
    requests: usize,
    #[serde(default)]
    jitter: bool,
    #[serde(default)]
    shift_at: Vec<TimeQty>,
    prefill_heavy: Option<RawLengths>,
    decode_heavy: Option<RawLengths>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrigger {
    at: TimeQty,
    target: Vec<u32>,
    tau: Option<TokenQty>,
    poll_interval: Option<TimeQty>,
    fault_after_patches: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEngine {
    max_batch: Option<usize>,
    max_inflight: Option<usize>,
    activation_per_token: Option<ByteQty>,
    utilization: Option<f64>,
    drain_period: Option<TimeQty>,
    max_sim_time: Option<TimeQty>,
    #[serde(default)]
    trace_locks: bool,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "snake_case")]
enum RawSharing {
    Strict,
    Weighted,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLink {
    a: u32,
    b: u32,
    bandwidth: BandwidthQty,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFabric {
    link_bandwidth: Option<BandwidthQty>,
    control_latency: Option<TimeQty>,
    retry_timeout: Option<TimeQty>,
    sharing: Option<RawSharing>,
    inference_weight: Option<f64>,
    migration_weight: Option<f64>,
    #[serde(default)]
    link: Vec<RawLink>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWeights {
    host_to_device: Option<BandwidthQty>,
    disk_to_device: Option<BandwidthQty>,
    priority: Option<RawSharing>,
    inference_weight: Option<f64>,
    loader_weight: Option<f64>,
    #[serde(default)]
    not_in_host: Vec<u32>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFlags {
    kv_resize: Option<bool>,
    kv_patch: Option<bool>,
    async_weights: Option<bool>,
    handshake: Option<bool>,
}

/// Parses and validates a scenario. Errors name the offending field.
pub fn load_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let de = toml::Deserializer::parse(text).map_err(|e| invalid("document", e.message().to_string()))?;
    let raw: RawScenario = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let msg = e.inner().message().to_string();
        invalid(if path == "." { "document".into() } else { path }, msg)
    })?;
    let sc = convert(raw)?;
    sc.validate()?;
    Ok(sc)
}

fn convert(raw: RawScenario) -> Result<Scenario, ScenarioError> {
    let model = ModelSpec {
        num_layers: raw.model.layers,
        layer_weight_bytes: raw.model.layer_weight.0,
        token_kv_bytes_per_layer: raw.model.token_kv_per_layer.0,
        stacking_factor: raw.model.stacking,
    };
    let mut cluster = Vec::new();
    for g in &raw.gpu {
        for _ in 0..g.count {
            let id = GpuId(cluster.len() as u32);
            cluster.push(GpuSpec {
                id,
                name: if g.name.is_empty() { format!("gpu{}", id.0) } else { g.name.clone() },
                mem_total: g.memory.0,
                mem_bandwidth: g.memory_bandwidth.0,
                prefill_cost: g.prefill_cost.0,
                decode_cost: g.decode_cost.0,
                alloc_granularity: g.alloc_granularity.map_or(crate::cluster::DEFAULT_ALLOC_GRANULARITY, |b| b.0),
            });
        }
    }
    let w = &raw.workload;
    let mut workload = WorkloadSpec::fixed(w.pattern, w.rate.0, w.requests);
    workload.jitter = w.jitter;
    workload.shift_at = w.shift_at.iter().map(|t| t.0).collect();
    if let Some(l) = &w.prefill_heavy {
        workload.prefill_heavy = Lengths {
            input: l.input.0,
            output: l.output.0,
        };
    }
    if let Some(l) = &w.decode_heavy {
        workload.decode_heavy = Lengths {
            input: l.input.0,
            output: l.output.0,
        };
    }
    let triggers = raw
        .trigger
        .iter()
        .map(|t| Trigger {
            at: t.at.0,
            target: PpConfig::from_counts(&t.target),
            tau: t.tau.map_or(DEFAULT_TAU, |x| x.0 as u64),
            poll_interval: t.poll_interval.map_or(default_poll_interval(), |x| x.0),
            fault: t.fault_after_patches.map(Fault::MigrationOverflowAfterPatches),
        })
        .collect();
    let mut engine = EngineConfig::default();
    let e = &raw.engine;
    if let Some(x) = e.max_batch {
        engine.max_batch = x;
    }
    engine.max_inflight = e.max_inflight;
    if let Some(x) = e.activation_per_token {
        engine.activation_bytes_per_token = x.0;
    }
    if let Some(u) = e.utilization {
        if !(u > 0.0 && u <= 1.0) {
            return Err(invalid("engine.utilization", "must be in (0, 1]"));
        }
        engine.util = UtilRatio::from_f64(u);
    }
    if let Some(x) = e.drain_period {
        engine.drain_period = x.0;
    }
    if let Some(x) = e.max_sim_time {
        engine.max_sim_time = x.0;
    }
    engine.trace_locks = e.trace_locks;
    let f = &raw.fabric;
    if let Some(x) = f.link_bandwidth {
        engine.link_bandwidth = x.0;
    }
    if let Some(x) = f.control_latency {
        engine.control_latency = x.0;
    }
    if let Some(x) = f.retry_timeout {
        engine.retry_timeout = x.0;
    }
    if let Some(RawSharing::Weighted) = f.sharing {
        let SharingMode::Weighted { inference, migration } = SharingMode::DEFAULT_WEIGHTED else {
            unreachable!("default weighted mode")
        };
        engine.sharing = SharingMode::Weighted {
            inference: f.inference_weight.unwrap_or(inference),
            migration: f.migration_weight.unwrap_or(migration),
        };
    }
    for (i, l) in f.link.iter().enumerate() {
        if l.a == l.b {
            return Err(invalid(format!("fabric.link[{i}]"), "link endpoints must differ"));
        }
        let key = (GpuId(l.a.min(l.b)), GpuId(l.a.max(l.b)));
        engine.link_overrides.insert(key, l.bandwidth.0);
    }
    let wt = &raw.weights;
    let mut weights = WeightConfig::default();
    if let Some(x) = wt.host_to_device {
        weights.host_to_device = x.0;
    }
    if let Some(x) = wt.disk_to_device {
        weights.disk_to_device = x.0;
    }
    if let Some(RawSharing::Weighted) = wt.priority {
        weights.priority = StagingPriority::Weighted {
            inference: wt.inference_weight.unwrap_or(1.0),
            loader: wt.loader_weight.unwrap_or(0.2),
        };
    }
    engine.weights = weights;
    engine.host_missing_layers = wt.not_in_host.clone();
    let d = Flags::default();
    let flags = Flags {
        kv_resize: raw.flags.kv_resize.unwrap_or(d.kv_resize),
        kv_patch: raw.flags.kv_patch.unwrap_or(d.kv_patch),
        async_weights: raw.flags.async_weights.unwrap_or(d.async_weights),
        handshake: raw.flags.handshake.unwrap_or(d.handshake),
    };
    Ok(Scenario {
        cluster,
        model,
        initial: PpConfig::from_counts(&raw.pipeline.initial),
        workload,
        triggers,
        flags,
        engine,
        seed: raw.seed.unwrap_or(0),
    })
}

fn first_violation(field: String, v: Vec<crate::cluster::Violation>) -> Result<(), ScenarioError> {
    match v.into_iter().next() {
        Some(v) => Err(invalid(field, v.to_string())),
        None => Ok(()),
    }
}

impl Scenario {
    /// Checks every cross-field invariant; the error names the first bad field.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.model.num_layers == 0 {
            return Err(invalid("model.layers", "must be positive"));
        }
        if self.model.layer_weight_bytes == 0 {
            return Err(invalid("model.layer_weight", "must be positive"));
        }
        if self.cluster.is_empty() {
            return Err(invalid("gpu", "at least one GPU is required"));
        }
        let v = validate_cluster(&self.model, &self.cluster);
        if let Some(first) = v.first() {
            let field = match first {
                crate::cluster::Violation::ZeroStackingFactor
                | crate::cluster::Violation::LayersNotMultipleOfK { .. } => "model.stacking".to_string(),
                _ => "gpu".to_string(),
            };
            return Err(invalid(field, first.to_string()));
        }
        let n = self.cluster.len();
        if self.initial.stages.len() != n {
            return Err(invalid(
                "pipeline.initial",
                format!("{} stages for {n} GPUs", self.initial.stages.len()),
            ));
        }
        first_violation("pipeline.initial".into(), validate_pp_config(&self.initial, &self.model, &self.cluster))?;
        if let Err(e) = config_budget(&self.initial, &self.cluster, &self.model, self.engine.util) {
            return Err(invalid("pipeline.initial", e.to_string()));
        }
        if config_budget(&self.initial, &self.cluster, &self.model, self.engine.util) == Ok(0) {
            return Err(invalid("pipeline.initial", "no KV blocks fit next to the weights"));
        }
        let w = &self.workload;
        if w.count == 0 {
            return Err(invalid("workload.requests", "must be positive"));
        }
        for (name, l) in [("prefill_heavy", w.prefill_heavy), ("decode_heavy", w.decode_heavy)] {
            if l.input == 0 || l.output == 0 {
                return Err(invalid(format!("workload.{name}"), "lengths must be positive"));
            }
        }
        if w.shift_at.windows(2).any(|p| p[0] > p[1]) {
            return Err(invalid("workload.shift_at", "times must be non-decreasing"));
        }
        for (i, t) in self.triggers.iter().enumerate() {
            let field = format!("trigger[{i}].target");
            if t.target.stages.len() != n {
                return Err(invalid(field, format!("{} stages for {n} GPUs", t.target.stages.len())));
            }
            first_violation(field, validate_pp_config(&t.target, &self.model, &self.cluster))?;
            if t.poll_interval.0 == 0 {
                return Err(invalid(format!("trigger[{i}].poll_interval"), "must be positive"));
            }
        }
        let e = &self.engine;
        if e.max_batch == 0 {
            return Err(invalid("engine.max_batch", "must be positive"));
        }
        if e.max_inflight == Some(0) {
            return Err(invalid("engine.max_inflight", "must be positive"));
        }
        if e.drain_period.0 == 0 {
            return Err(invalid("engine.drain_period", "must be positive"));
        }
        if e.retry_timeout.0 == 0 {
            return Err(invalid("fabric.retry_timeout", "must be positive"));
        }
        if let SharingMode::Weighted { inference, migration } = e.sharing {
            if !(inference > 0.0 && migration > 0.0) {
                return Err(invalid("fabric.sharing", "weights must be positive"));
            }
        }
        for &(a, b) in e.link_overrides.keys() {
            if a.0 as usize >= n || b.0 as usize >= n {
                return Err(invalid("fabric.link", format!("link {a}-{b} names an unknown GPU")));
            }
        }
        if let Some(&l) = e.host_missing_layers.iter().find(|&&l| l == 0 || l > self.model.num_layers) {
            return Err(invalid("weights.not_in_host", format!("layer {l} is out of range")));
        }
        Ok(())
    }

    /// Applies one `key=value` override and revalidates.
    pub fn apply_flag(&mut self, spec: &str) -> Result<(), ScenarioError> {
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| invalid("--flag", format!("expected key=value, got {spec:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        let boolean = || -> Result<bool, ScenarioError> {
            match value {
                "true" | "on" | "1" => Ok(true),
                "false" | "off" | "0" => Ok(false),
                _ => Err(invalid(format!("flags.{key}"), format!("expected a boolean, got {value:?}"))),
            }
        };
        match key {
            "kv_resize" => self.flags.kv_resize = boolean()?,
            "kv_patch" => self.flags.kv_patch = boolean()?,
            "async_weights" => self.flags.async_weights = boolean()?,
            "handshake" => self.flags.handshake = boolean()?,
            "stacking" => {
                self.model.stacking_factor = value
                    .parse()
                    .map_err(|_| invalid("model.stacking", format!("expected an integer, got {value:?}")))?;
            }
            "sharing" => {
                self.engine.sharing = match value {
                    "strict" => SharingMode::Strict,
                    "weighted" => SharingMode::DEFAULT_WEIGHTED,
                    _ => return Err(invalid("fabric.sharing", format!("unknown mode {value:?}"))),
                }
            }
            _ => return Err(invalid("--flag", format!("unknown flag {key:?}"))),
        }
        self.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
seed = 3

[model]
layers = 16
layer_weight = "256 MiB"
token_kv_per_layer = "8 KiB"
stacking = 4

[[gpu]]
count = 2
memory = "16 GiB"
memory_bandwidth = "1000 GB/s"
prefill_cost = "10 us"
decode_cost = "100 us"

[pipeline]
initial = [8, 8]

[workload]
pattern = "decode_heavy"
rate = "5 req/s"
requests = 10

[[trigger]]
at = "1 s"
target = [4, 12]
tau = "50 tokens"
"#;

    #[test]
    fn parses_base() {
        let sc = load_scenario(BASE).unwrap();
        assert_eq!(sc.cluster.len(), 2);
        assert_eq!(sc.model.stacking_factor, 4);
        assert_eq!(sc.triggers[0].target.counts(), vec![4, 12]);
        assert_eq!(sc.triggers[0].poll_interval, default_poll_interval());
        assert_eq!(sc.seed, 3);
    }

    #[test]
    fn missing_unit_names_field() {
        let bad = BASE.replace("rate = \"5 req/s\"", "rate = \"5\"");
        let e = load_scenario(&bad).unwrap_err();
        assert_eq!(e.field, "workload.rate");
        let bad = BASE.replace("memory = \"16 GiB\"", "memory = 17179869184");
        assert_eq!(load_scenario(&bad).unwrap_err().field, "gpu[0].memory");
    }

    #[test]
    fn invariant_violations_name_field() {
        let bad = BASE.replace("target = [4, 12]", "target = [6, 10]");
        assert_eq!(load_scenario(&bad).unwrap_err().field, "trigger[0].target");
        let bad = BASE.replace("initial = [8, 8]", "initial = [8, 4]");
        assert_eq!(load_scenario(&bad).unwrap_err().field, "pipeline.initial");
        let bad = BASE.replace("requests = 10", "requests = 10\nbogus = 1");
        assert!(load_scenario(&bad).unwrap_err().field.starts_with("workload"));
    }

    #[test]
    fn flag_overrides() {
        let mut sc = load_scenario(BASE).unwrap();
        sc.apply_flag("handshake=off").unwrap();
        assert!(!sc.flags.handshake);
        sc.apply_flag("stacking=2").unwrap();
        assert_eq!(sc.model.stacking_factor, 2);
        assert_eq!(sc.apply_flag("stacking=3").unwrap_err().field, "model.stacking");
        assert_eq!(sc.apply_flag("nope=1").unwrap_err().field, "--flag");
    }
}
