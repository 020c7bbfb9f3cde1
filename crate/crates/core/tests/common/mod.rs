//! Scenario generators shared by the integration tests.

use livepp::cluster::{enumerate_configs, GpuId, GpuSpec, ModelSpec};
use livepp::coordinator::{default_poll_interval, DEFAULT_TAU};
use livepp::engine::{EngineConfig, Flags, Lengths, Pattern, Scenario, Trigger, WorkloadSpec};
use livepp::units::{Bandwidth, SimTime, GIB, KIB, MIB};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A small live reconfiguration: 2 to 4 GPUs, 8 to 32 layers, a random
/// initial and a different random target split, jittered short requests.
pub fn random_live_scenario(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=4usize);
    let k = *[1u32, 2, 4].choose(&mut rng).unwrap();
    let min_groups = (n as u32 + 1).max(8u32.div_ceil(k));
    let layers = k * rng.random_range(min_groups..=32 / k);
    let configs = enumerate_configs(layers, n, k);
    let initial = configs.choose(&mut rng).unwrap().clone();
    let target = loop {
        let c = configs.choose(&mut rng).unwrap();
        if *c != initial {
            break c.clone();
        }
    };
    let cluster = (0..n as u32)
        .map(|i| GpuSpec {
            id: GpuId(i),
            name: format!("g{i}"),
            mem_total: 16 * GIB,
            mem_bandwidth: Bandwidth(1e12),
            prefill_cost: rng.random_range(5e-6..2e-5),
            decode_cost: rng.random_range(5e-5..2e-4),
            alloc_granularity: 2 * MIB,
        })
        .collect();
    let pattern = if rng.random() { Pattern::PrefillHeavy } else { Pattern::DecodeHeavy };
    let mut workload = WorkloadSpec::fixed(pattern, rng.random_range(10.0..60.0), rng.random_range(12..=32));
    workload.jitter = true;
    workload.prefill_heavy = Lengths { input: 256, output: 8 };
    workload.decode_heavy = Lengths { input: 64, output: 96 };
    workload.shift_at = vec![SimTime::from_millis(rng.random_range(100..600))];
    Scenario {
        cluster,
        model: ModelSpec {
            num_layers: layers,
            layer_weight_bytes: 256 * MIB,
            token_kv_bytes_per_layer: 8 * KIB,
            stacking_factor: k,
        },
        initial,
        workload,
        triggers: vec![Trigger {
            at: SimTime::from_millis(rng.random_range(20..300)),
            target,
            tau: DEFAULT_TAU,
            poll_interval: default_poll_interval(),
            fault: None,
        }],
        flags: Flags::default(),
        engine: EngineConfig {
            capture_sync_snapshots: true,
            ..EngineConfig::default()
        },
        seed,
    }
}
