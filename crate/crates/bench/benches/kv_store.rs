use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use livepp::cluster::{GpuId, GpuSpec, ModelSpec};
use livepp::kv::KvStore;
use livepp::units::{Bandwidth, GIB, KIB, MIB};

fn store(k: u32, blocks: u64) -> KvStore {
    let gpu = GpuSpec {
        id: GpuId(0),
        name: "g0".into(),
        mem_total: 80 * GIB,
        mem_bandwidth: Bandwidth(2e12),
        prefill_cost: 1e-5,
        decode_cost: 1e-4,
        alloc_granularity: 2 * MIB,
    };
    let model = ModelSpec {
        num_layers: 32,
        layer_weight_bytes: 512 * MIB,
        token_kv_bytes_per_layer: 8 * KIB,
        stacking_factor: k,
    };
    KvStore::init(&gpu, &model, 0..8 / k.min(8), blocks, u64::MAX).unwrap()
}

/// 64 requests, every other one freed: half the blocks are holes.
fn fragmented() -> KvStore {
    let mut s = store(4, 512);
    for r in 0..64 {
        for g in 0..2 {
            s.append(r, g, &vec![r; 300]).unwrap();
        }
    }
    for r in (0..64).step_by(2) {
        s.free_request(r);
    }
    s
}

fn bench(c: &mut Criterion) {
    c.bench_function("append_decode_step_64_requests", |b| {
        b.iter_batched(
            || store(4, 4096),
            |mut s| {
                for step in 0..64u64 {
                    for r in 0..64 {
                        s.append(r, 0, &[step]).unwrap();
                    }
                }
                black_box(s)
            },
            BatchSize::SmallInput,
        )
    });
    c.bench_function("compact_fragmented", |b| {
        b.iter_batched(fragmented, |mut s| black_box(s.compact()), BatchSize::SmallInput)
    });
    c.bench_function("shrink_fragmented", |b| {
        b.iter_batched(
            fragmented,
            |mut s| {
                let live = s.used_blocks();
                s.resize(live).unwrap();
                black_box(s)
            },
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, bench);
criterion_main!(benches);
