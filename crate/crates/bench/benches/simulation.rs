use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use livepp::engine::{load_scenario, Simulation};

const STOP_TIME: &str = include_str!("../../../scenarios/stop_time.toml");
const KV_RESIZE: &str = include_str!("../../../scenarios/kv_resize_ablation.toml");

fn bench(c: &mut Criterion) {
    let mut g = c.benchmark_group("simulation");
    g.sample_size(10);
    for (name, text) in [("stop_time", STOP_TIME), ("kv_resize_ablation", KV_RESIZE)] {
        let sc = load_scenario(text).unwrap();
        g.bench_function(name, |b| b.iter(|| black_box(Simulation::new(sc.clone()).run().metrics)));
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
