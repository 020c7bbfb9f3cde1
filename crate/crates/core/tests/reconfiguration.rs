use livepp::cluster::{GpuId, GpuSpec, ModelSpec, PpConfig};
use livepp::coordinator::{default_poll_interval, Outcome, DEFAULT_TAU};
use livepp::engine::{EngineConfig, Event, Fault, Flags, Lengths, Pattern, RunResult, Scenario, Simulation, Trigger, WorkloadSpec};
use livepp::units::{Bandwidth, SimTime, GIB, KIB, MIB};

fn trigger(at_ms: u64, counts: &[u32]) -> Trigger {
    Trigger {
        at: SimTime::from_millis(at_ms),
        target: PpConfig::from_counts(counts),
        tau: DEFAULT_TAU,
        poll_interval: default_poll_interval(),
        fault: None,
    }
}

/// Three GPUs, six layers split 2/2/2, decode-heavy load.
fn worked_example() -> Scenario {
    let mut w = WorkloadSpec::fixed(Pattern::DecodeHeavy, 40.0, 30);
    w.decode_heavy = Lengths { input: 64, output: 200 };
    Scenario {
        cluster: (0..3)
            .map(|i| GpuSpec {
                id: GpuId(i),
                name: format!("g{i}"),
                mem_total: 16 * GIB,
                mem_bandwidth: Bandwidth(1e12),
                prefill_cost: 1e-5,
                decode_cost: 1e-4,
                alloc_granularity: 2 * MIB,
            })
            .collect(),
        model: ModelSpec {
            num_layers: 6,
            layer_weight_bytes: 512 * MIB,
            token_kv_bytes_per_layer: 8 * KIB,
            stacking_factor: 1,
        },
        initial: PpConfig::from_counts(&[2, 2, 2]),
        workload: w,
        triggers: vec![trigger(300, &[1, 2, 3])],
        flags: Flags::default(),
        engine: EngineConfig::default(),
        seed: 3,
    }
}

fn phases(r: &RunResult) -> Vec<&'static str> {
    r.trace
        .events()
        .filter_map(|(_, e)| match e {
            Event::Phase { phase } => Some(*phase),
            _ => None,
        })
        .collect()
}

fn first_time(r: &RunResult, pred: impl Fn(&Event) -> bool) -> SimTime {
    r.trace.events().find(|(_, e)| pred(e)).map(|(t, _)| t).expect("event present")
}

#[test]
fn worked_example_runs_all_phases_in_order() {
    let r = Simulation::new(worked_example()).run();
    assert_eq!(r.outcomes, vec![(0, Outcome::Success)]);
    assert_eq!(r.final_config, PpConfig::from_counts(&[1, 2, 3]));
    assert_eq!(
        phases(&r),
        ["feasibility", "resizing", "migrating", "converging", "committing", "done"]
    );
    let pairs: Vec<(GpuId, GpuId, Vec<u32>)> = r
        .trace
        .events()
        .filter_map(|(_, e)| match e {
            Event::StartKVMigration { src, dst, layers, .. } => Some((*src, *dst, layers.clone())),
            _ => None,
        })
        .collect();
    assert_eq!(pairs, vec![(GpuId(0), GpuId(1), vec![2]), (GpuId(1), GpuId(2), vec![4])]);
    let migration = first_time(&r, |e| matches!(e, Event::StartKVMigration { .. }));
    let resize = first_time(&r, |e| matches!(e, Event::ResizeKV { .. }));
    let commit = first_time(&r, |e| matches!(e, Event::CommitStart { .. }));
    let switched = first_time(&r, |e| matches!(e, Event::SyncAndCommit { .. }));
    assert!(resize <= migration && migration < commit && commit <= switched);
    // Serving continues during migration: tokens complete between start and commit.
    let served = r
        .trace
        .events()
        .filter(|(t, e)| *t > migration && *t < commit && matches!(e, Event::StageEnd { .. }))
        .count();
    assert!(served > 0);
}

#[test]
fn fault_on_first_patch_rolls_back() {
    let mut sc = worked_example();
    sc.triggers[0].fault = Some(Fault::MigrationOverflowAfterPatches(0));
    let r = Simulation::new(sc).run();
    assert!(matches!(r.outcomes.as_slice(), [(0, Outcome::Failed(_))]), "{:?}", r.outcomes);
    assert_eq!(r.final_config, PpConfig::from_counts(&[2, 2, 2]));
    let (before, after) = r
        .trace
        .events()
        .find_map(|(_, e)| match e {
            Event::Rollback { state_before, state_after, .. } => Some((*state_before, *state_after)),
            _ => None,
        })
        .expect("rollback recorded");
    assert_eq!(before, after);
    assert_eq!(r.metrics.completed, 30);
}

#[test]
fn overlapping_trigger_is_refused() {
    let mut sc = worked_example();
    sc.triggers.push(trigger(301, &[2, 2, 2]));
    let r = Simulation::new(sc).run();
    assert_eq!(r.outcomes.len(), 2);
    let refused = r.outcomes.iter().find(|(i, _)| *i == 1).unwrap();
    assert!(matches!(&refused.1, Outcome::Infeasible(why) if why.contains("in flight")), "{refused:?}");
    assert_eq!(r.final_config, PpConfig::from_counts(&[1, 2, 3]));
}

#[test]
fn sequential_triggers_round_trip() {
    let mut sc = worked_example();
    sc.triggers.push(trigger(2_000, &[2, 2, 2]));
    let r = Simulation::new(sc).run();
    assert_eq!(r.outcomes, vec![(0, Outcome::Success), (1, Outcome::Success)]);
    assert_eq!(r.final_config, PpConfig::from_counts(&[2, 2, 2]));
    assert_eq!(r.metrics.reconfigurations, 2);
}

#[test]
fn infeasible_target_leaves_config_untouched() {
    let mut sc = worked_example();
    // Four 512 MiB layers exceed 90% of 2 GiB.
    for g in &mut sc.cluster {
        g.mem_total = 2 * GIB;
    }
    sc.triggers[0] = trigger(300, &[1, 1, 4]);
    let r = Simulation::new(sc).run();
    assert!(matches!(r.outcomes.as_slice(), [(0, Outcome::Infeasible(_))]), "{:?}", r.outcomes);
    assert_eq!(r.final_config, PpConfig::from_counts(&[2, 2, 2]));
    assert_eq!(phases(&r), ["feasibility", "aborted"]);
}
