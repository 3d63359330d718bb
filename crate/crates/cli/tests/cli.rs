use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
task = "classification"
seed = 3

[data]
kind = "spiral"
train_per_class = 60
test_per_class = 40
noise = 0.1
turns = 1.0

[model]
output = "dot"
entries = 16
metric = "euclidean"
gamma = 5.0

[optimizer]
lr = 0.03

[train]
epochs = 4
batch_size = 16

[trace]
every = 5
"#;

fn mnbr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mnbr")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn run_ok(args: &[&str]) -> String {
    let o = mnbr(args);
    assert!(o.status.success(), "mnbr {args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn test_metric(stdout: &str, model: &str) -> f64 {
    stdout
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .find(|v| v["record"] == "test" && v["model"] == model)
        .and_then(|v| v["metric"].as_f64())
        .unwrap_or_else(|| panic!("no test record for {model} in {stdout}"))
}

fn without_timing(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.contains("\"record\":\"timing\""))
        .map(String::from)
        .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn bad_configs_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = write_config(dir.path(), "u.toml", &format!("{SMALL}\n[extra]\nx = 1\n"));
    let invalid = write_config(dir.path(), "i.toml", &SMALL.replace("entries = 16", "entries = 0"));
    let missing = dir.path().join("nope.toml");
    for cfg in [&unknown, &invalid, &missing] {
        let o = mnbr(&["train", "--config", s(cfg), "--out", s(dir.path())]);
        assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn train_is_reproducible_and_eval_agrees() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    // The output path is part of the logged config, so rerun into the same
    // directory and compare against the first run's files.
    let a = dir.path().join("a");
    let out_a = run_ok(&["train", "--config", s(&cfg), "--out", s(&a)]);
    let (metrics, model) = (without_timing(&a.join("metrics.jsonl")), std::fs::read(a.join("model.json")).unwrap());
    run_ok(&["train", "--config", s(&cfg), "--out", s(&a)]);
    assert_eq!(without_timing(&a.join("metrics.jsonl")), metrics);
    assert_eq!(std::fs::read(a.join("model.json")).unwrap(), model);

    let trained = test_metric(&out_a, "meta");
    let e = dir.path().join("e");
    let out_e = run_ok(&["eval", "--config", s(&cfg), "--artifact", s(&a.join("model.json")), "--out", s(&e), "--neighbors", "3"]);
    let evaluated = test_metric(&out_e, "meta");
    assert!((trained - evaluated).abs() <= 0.01, "train {trained} vs eval {evaluated}");
    let neighbors = std::fs::read_to_string(e.join("neighbors.csv")).unwrap();
    assert_eq!(neighbors.lines().count(), 1 + 16 * 3);
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_ok(&["train", "--config", s(&cfg), "--out", s(&a)]);
    run_ok(&["train", "--config", s(&cfg), "--out", s(&b), "--seed", "4"]);
    assert_ne!(std::fs::read(a.join("model.json")).unwrap(), std::fs::read(b.join("model.json")).unwrap());
}

#[test]
fn zero_step_size_artifact_matches_plain_network() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &SMALL.replace("gamma = 5.0", "gamma = 5.0\nalpha_init = 0.0"));
    let out = dir.path().join("o");
    run_ok(&["train", "--config", s(&cfg), "--out", s(&out)]);

    // Rewrite the trained artifact with alpha pinned at zero; it must score
    // exactly like the same parameters evaluated without a dictionary.
    let mut art: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("model.json")).unwrap()).unwrap();
    for a in art["alpha"].as_array_mut().unwrap() {
        for v in a["data"].as_array_mut().unwrap() {
            *v = serde_json::json!(0.0);
        }
    }
    let zero = dir.path().join("zero.json");
    std::fs::write(&zero, serde_json::to_vec_pretty(&art).unwrap()).unwrap();
    art["dictionary"] = serde_json::Value::Null;
    art["alpha"] = serde_json::json!([]);
    art["spec"]["dictionary"] = serde_json::Value::Null;
    let plain = dir.path().join("plain.json");
    std::fs::write(&plain, serde_json::to_vec_pretty(&art).unwrap()).unwrap();

    let metrics = |artifact: &Path, tag: &str| {
        let e = dir.path().join(tag);
        let o = run_ok(&["eval", "--config", s(&cfg), "--artifact", s(artifact), "--out", s(&e)]);
        let v: serde_json::Value = serde_json::from_str(o.lines().next().unwrap()).unwrap();
        (v["loss"].as_f64().unwrap(), v["metric"].as_f64().unwrap())
    };
    assert_eq!(metrics(&zero, "z"), metrics(&plain, "p"));
}

#[test]
fn trace_logs_every_interval_and_keys_stay_near_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let out = dir.path().join("t");
    run_ok(&["trace", "--config", s(&cfg), "--out", s(&out)]);
    let mut r = csv::Reader::from_path(out.join("trace.csv")).unwrap();
    let headers = r.headers().unwrap().clone();
    assert_eq!(headers.iter().take(4).collect::<Vec<_>>(), ["iteration", "entry", "key_0", "key_1"]);
    let rows: Vec<Vec<f64>> = r.records().map(|x| x.unwrap().iter().map(|v| v.parse().unwrap()).collect()).collect();

    // No patience, so no validation holdout: 120 training rows -> 8 batches of
    // 16 per epoch, 4 epochs = 32 steps; logged at 0, 5, ..., 30.
    let logged: Vec<usize> = (0..=32).filter(|i| i % 5 == 0).collect();
    assert_eq!(rows.len(), logged.len() * 16);
    let iters: Vec<usize> = rows.iter().map(|r| r[0] as usize).collect();
    let mut distinct = iters.clone();
    distinct.dedup();
    assert_eq!(distinct, logged);

    // Iteration 0 is the initialization, so it differs from the final dump
    // and the final keys equal the saved artifact.
    let art: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("model.json")).unwrap()).unwrap();
    let keys: Vec<f64> = art["dictionary"]["keys"]["data"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    let first: Vec<f64> = rows[..16].iter().flat_map(|r| [r[2], r[3]]).collect();
    assert_ne!(first, keys, "trained keys should move");
    let last: Vec<f64> = rows[rows.len() - 16..].iter().flat_map(|r| [r[2], r[3]]).collect();
    let moved = last.iter().zip(&first).any(|(a, b)| a != b);
    assert!(moved);

    // Keys stay within the data's bounding box widened by three standard
    // deviations; the spiral spans roughly [-2.3, 2.3].
    let (lo, hi) = (-2.3 - 3.0 * 1.3, 2.3 + 3.0 * 1.3);
    let inside = last.chunks(2).filter(|k| k.iter().all(|v| (lo..=hi).contains(v))).count();
    assert!(inside as f64 >= 0.8 * 16.0, "{inside}/16 keys inside");
}

#[test]
fn trace_refuses_higher_dimensional_keys() {
    let dir = tempfile::tempdir().unwrap();
    let body = SMALL.replace("[optimizer]", "extractor = [8, 3]\noutput = \"cosine\"\nmetric = \"cosine\"\n\n[optimizer]")
        .replace("output = \"dot\"\n", "")
        .replace("metric = \"euclidean\"\n", "");
    let cfg = write_config(dir.path(), "c.toml", &body);
    let o = mnbr(&["trace", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn knn_baseline_and_sweeps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &format!("{SMALL}\n[knn]\nk = 5\n"));
    let k = dir.path().join("k");
    let out = run_ok(&["knn-baseline", "--config", s(&cfg), "--out", s(&k)]);
    let acc = test_metric(&out, "knn5");
    assert!((0.0..=1.0).contains(&acc));
    assert!(k.join("knn.jsonl").exists());

    let single = write_config(dir.path(), "s.toml", &format!("{SMALL}\n[sweep]\nentries = [8]\ngamma = [2.0]\nseeds = [0]\n"));
    let o1 = dir.path().join("s1");
    run_ok(&["sweep", "--config", s(&single), "--out", s(&o1)]);
    assert_eq!(std::fs::read_to_string(o1.join("sweep.csv")).unwrap().lines().count(), 2);

    let grid = write_config(dir.path(), "g.toml", &format!("{SMALL}\n[sweep]\ngamma = [0.5, 5.0, 50.0]\nseeds = [1]\n"));
    let o2 = dir.path().join("s2");
    run_ok(&["sweep", "--config", s(&grid), "--out", s(&o2)]);
    let mut r = csv::Reader::from_path(o2.join("sweep.csv")).unwrap();
    let gammas: Vec<f64> = r.records().map(|x| x.unwrap()[1].parse().unwrap()).collect();
    assert_eq!(gammas, vec![0.5, 5.0, 50.0]);
}

#[test]
fn shipped_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "toml") {
            mnbr_cli::RunConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            n += 1;
        }
    }
    assert!(n >= 4);
}
