use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 11

[model]
layers = 6
layer_weight = "1536 MiB"
token_kv_per_layer = "8 KiB"
stacking = 1

[[gpu]]
count = 2
memory = "8 GiB"
memory_bandwidth = "1000 GB/s"
prefill_cost = "10 us"
decode_cost = "100 us"

[pipeline]
initial = [3, 3]

[workload]
pattern = "prefill_heavy"
rate = "20 req/s"
requests = 12
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_livepp"));
    c.env_remove("LIVEPP_OUT_DIR");
    c
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let mut rows = vec![r.headers().unwrap().iter().map(String::from).collect()];
    for rec in r.records() {
        rows.push(rec.unwrap().iter().map(String::from).collect());
    }
    rows
}

fn col(rows: &[Vec<String>], name: &str) -> usize {
    rows[0].iter().position(|h| h == name).unwrap()
}

#[test]
fn run_writes_three_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = write(tmp.path(), "s.toml", SMALL);
    let out = tmp.path().join("out");
    let o = run(&["run", sc.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["trace.jsonl", "metrics.csv", "summary.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let rows = csv_rows(&out.join("metrics.csv"));
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1][col(&rows, "completed")], "12");
    let trace = std::fs::read_to_string(out.join("trace.jsonl")).unwrap();
    for line in trace.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["t_ns"].is_u64() && v["kind"].is_string());
    }
}

#[test]
fn malformed_scenario_exits_2_naming_field() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = write(tmp.path(), "s.toml", &SMALL.replace("\"20 req/s\"", "20"));
    let o = run(&["validate", sc.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("workload.rate"));

    let sc = write(tmp.path(), "t.toml", &SMALL.replace("initial = [3, 3]", "initial = [3, 2]"));
    let o = run(&["run", sc.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("pipeline.initial"));

    let sc = write(tmp.path(), "u.toml", SMALL);
    let o = run(&["validate", sc.to_str().unwrap(), "--flag", "kv_resize=maybe"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("flags.kv_resize"));
}

#[test]
fn infeasible_trigger_is_data() {
    let tmp = tempfile::tempdir().unwrap();
    // five 1.5 GiB layers exceed 90% of 8 GiB
    let text = format!("{SMALL}\n[[trigger]]\nat = \"100 ms\"\ntarget = [1, 5]\n");
    let sc = write(tmp.path(), "s.toml", &text);
    let out = tmp.path().join("o");
    let o = run(&["run", sc.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["outcomes"][0]["outcome"]["outcome"], "infeasible");
    assert_eq!(summary["final_config"], "3/3");
    let o = run(&["run", sc.to_str().unwrap(), "--out", out.to_str().unwrap(), "--fail-on-infeasible"]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn config_grid_enumerates_splits() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = write(tmp.path(), "s.toml", SMALL);
    let out = tmp.path().join("o");
    let o = run(&["sweep", sc.to_str().unwrap(), "--axis", "config-grid", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&out.join("sweep.csv"));
    let points: Vec<&str> = rows[1..].iter().map(|r| r[col(&rows, "point")].as_str()).collect();
    assert_eq!(points, vec!["1/5", "2/4", "3/3", "4/2", "5/1"]);
    // 1/5 and 5/1 put five layers on one GPU
    let status: Vec<&str> = rows[1..].iter().map(|r| r[col(&rows, "status")].as_str()).collect();
    assert_eq!(status, vec!["infeasible", "ok", "ok", "ok", "infeasible"]);
}

#[test]
fn single_rate_grid_matches_run() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = write(tmp.path(), "s.toml", SMALL);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(run(&["run", sc.to_str().unwrap(), "--out", a.to_str().unwrap()]).status.success());
    let o = run(&[
        "sweep",
        sc.to_str().unwrap(),
        "--axis",
        "rate-grid",
        "--values",
        "20 req/s",
        "--out",
        b.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run_rows = csv_rows(&a.join("metrics.csv"));
    let sweep_rows = csv_rows(&b.join("sweep.csv"));
    for name in ["completed", "ttft_mean_s", "tpot_mean_s", "throughput_tok_s"] {
        assert_eq!(run_rows[1][col(&run_rows, name)], sweep_rows[1][col(&sweep_rows, name)], "{name}");
    }
    assert_eq!(sweep_rows[1][col(&sweep_rows, "score")], "1");
}

#[test]
fn stacking_grid_utilization_is_monotone() {
    let tmp = tempfile::tempdir().unwrap();
    let text = SMALL
        .replace("layers = 6", "layers = 16")
        .replace("\"1536 MiB\"", "\"256 MiB\"")
        .replace("initial = [3, 3]", "initial = [8, 8]");
    let sc = write(tmp.path(), "s.toml", &text);
    let out = tmp.path().join("o");
    let o = run(&["sweep", sc.to_str().unwrap(), "--axis", "stacking-grid", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&out.join("sweep.csv"));
    assert_eq!(rows.len(), 5);
    let u: Vec<f64> = rows[1..]
        .iter()
        .map(|r| r[col(&rows, "effective_kv_utilization")].parse().unwrap())
        .collect();
    assert!(u.windows(2).all(|w| w[0] <= w[1]), "{u:?}");
}

#[test]
fn env_var_sets_output_dir_and_out_wins() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = write(tmp.path(), "s.toml", SMALL);
    let env_dir = tmp.path().join("from_env");
    let o = bin()
        .args(["run", sc.to_str().unwrap()])
        .env("LIVEPP_OUT_DIR", &env_dir)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(env_dir.join("metrics.csv").is_file());
    let flag_dir = tmp.path().join("from_flag");
    let o = bin()
        .args(["run", sc.to_str().unwrap(), "--out", flag_dir.to_str().unwrap()])
        .env("LIVEPP_OUT_DIR", tmp.path().join("unused"))
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(flag_dir.join("metrics.csv").is_file());
    assert!(!tmp.path().join("unused").exists());
}

#[test]
fn seed_changes_trace_and_repeats_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = write(tmp.path(), "s.toml", SMALL);
    let trace = |seed: &str, dir: &str| {
        let out = tmp.path().join(dir);
        let o = run(&["run", sc.to_str().unwrap(), "--seed", seed, "--out", out.to_str().unwrap()]);
        assert!(o.status.success());
        std::fs::read(out.join("trace.jsonl")).unwrap()
    };
    assert_eq!(trace("5", "a"), trace("5", "b"));
    assert_ne!(trace("5", "a"), trace("6", "c"));
}
