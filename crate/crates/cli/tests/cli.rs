mod common;

use std::time::Duration;

use common::{error_line, ok, path, run, tiny_model_config, tree, Schema, Server, Workspace};
use geoecon::align::{read_pairs, MAX_PAIR_KM};
use geoecon::store::Store;
use reqwest::{Method, StatusCode};
use serde_json::{json, Value};

fn synth_small(ws: &Workspace, name: &str, seed: &str) -> std::path::PathBuf {
    let out = ws.join(name);
    ok(&["synth", "--out", path(&out), "--seed", seed, "--pairs", "48", "--periods", "2022,2023"]);
    out
}

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let ws = Workspace::new();
    let a = synth_small(&ws, "a", "4");
    let b = synth_small(&ws, "b", "4");
    let c = synth_small(&ws, "c", "5");
    let (ta, tb, tc) = (tree(&a), tree(&b), tree(&c));
    assert!(ta.len() > 10);
    assert_eq!(ta, tb);
    assert_ne!(ta, tc);

    // the same parameters given through a config file
    let cfg = ws.join("synth.json");
    std::fs::write(&cfg, json!({"seed": 4, "synth": {"n_pairs": 48, "periods": ["2022", "2023"]}}).to_string()).unwrap();
    let d = ws.join("d");
    ok(&["--config", path(&cfg), "synth", "--out", path(&d)]);
    assert_eq!(tree(&d), ta);

    // a populated directory is never overwritten
    let out = run(&["synth", "--out", path(&a), "--seed", "4"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(tree(&a), ta);
}

#[test]
fn summary_line_is_json() {
    let ws = Workspace::new();
    let out = ws.join("c");
    let line = ok(&["synth", "--out", path(&out), "--pairs", "16"]);
    let v: Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(v["satellite_per_period"], json!(16));
    assert_eq!(v["streetview_per_period"], json!(64));
}

#[test]
fn align_writes_pairs_within_range() {
    let ws = Workspace::new();
    let corpus = synth_small(&ws, "c", "2");
    let pairs = ws.join("pairs.jsonl");
    let line = ok(&["align", "--corpus", path(&corpus), "--out", path(&pairs), "--period", "2022"]);
    let summary: Value = serde_json::from_str(line.trim()).unwrap();
    let read = read_pairs(&pairs).unwrap();
    assert_eq!(summary["pairs"], json!(read.len()));
    assert_eq!(read.len(), 48);
    assert!(read.iter().all(|p| p.distance_km <= MAX_PAIR_KM));

    let none = ws.join("none.jsonl");
    let line = ok(&["align", "--corpus", path(&corpus), "--out", path(&none), "--max-km", "0.0001"]);
    let summary: Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(summary["pairs"], json!(0));
    assert_eq!(summary["dropped_too_far"], json!(48));
}

fn predictions(ws: &Workspace, rows: &[(f64, f64)]) -> String {
    let p = ws.join("pred.jsonl");
    let text: String = rows.iter().map(|(y, yhat)| format!("{}\n", json!({"label": y, "prediction": yhat}))).collect();
    std::fs::write(&p, text).unwrap();
    path(&p).to_string()
}

#[test]
fn eval_reports_r_squared() {
    let ws = Workspace::new();
    let perfect = predictions(&ws, &[(1.0, 1.0), (2.0, 2.0), (3.5, 3.5), (-4.0, -4.0)]);
    assert_eq!(ok(&["eval", "--predictions", &perfect]).trim(), "r2=1.0 n=4 skipped=0");
    let example = predictions(&ws, &[(1.0, 1.5), (2.0, 2.0), (3.0, 2.5)]);
    assert_eq!(ok(&["eval", "--predictions", &example]).trim(), "r2=0.75 n=3 skipped=0");
    let mean = predictions(&ws, &[(1.0, 2.0), (2.0, 2.0), (3.0, 2.0)]);
    assert_eq!(ok(&["eval", "--predictions", &mean]).trim(), "r2=0.0 n=3 skipped=0");
}

#[test]
fn usage_errors_exit_with_2() {
    let ws = Workspace::new();
    let missing = ws.join("missing");
    let cases: Vec<Vec<&str>> = vec![
        vec![],
        vec!["train"],
        vec!["eval", "--bogus"],
        vec!["--config", "{not json", "eval"],
        vec!["--config", r#"{"unknown_key": 1}"#, "synth", "--out", "x"],
        vec!["align", "--corpus", path(&missing), "--out", "p.jsonl"],
        vec!["predict", "--task-id", "t", "--bbox", "1,2,3", "--period", "2023"],
        vec!["predict", "--task-id", "t", "--bbox", "0,0,1,1", "--counties", "a", "--period", "2023"],
        vec!["predict", "--task-id", "bad id!", "--bbox", "0,0,1,1", "--period", "2023"],
        vec!["eval", "--predictions", "p.jsonl", "--checkpoint", "ck"],
    ];
    for args in cases {
        let out = run(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(out.stdout.is_empty(), "{args:?}");
        let err = error_line(&out);
        assert_eq!(err["error"]["kind"], json!("usage"), "{args:?}");
        assert!(!err["error"]["message"].as_str().unwrap().is_empty());
    }
    // help is not an error
    let help = run(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("predict"));
}

#[test]
fn runtime_errors_exit_with_1() {
    let ws = Workspace::new();
    let constant = predictions(&ws, &[(2.0, 1.0), (2.0, 3.0)]);
    let out = run(&["eval", "--predictions", &constant]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"]["kind"], json!("runtime"));

    let garbage = ws.join("garbage.jsonl");
    std::fs::write(&garbage, "{\"label\": 1.0}\n").unwrap();
    let out = run(&["eval", "--predictions", path(&garbage)]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"]["kind"], json!("runtime"));
}

fn train_tiny(ws: &Workspace, corpus: &std::path::Path) -> std::path::PathBuf {
    let ck = ws.join("ck");
    let cfg = tiny_model_config().to_string();
    ok(&["--config", &cfg, "train", "--corpus", path(corpus), "--out", path(&ck), "--period", "2022", "--seed", "1"]);
    ck
}

#[test]
fn train_writes_checkpoint_history_and_split() {
    let ws = Workspace::new();
    let corpus = synth_small(&ws, "c", "6");
    let ck = train_tiny(&ws, &corpus);
    let history: Value = serde_json::from_slice(&std::fs::read(ck.join("history.json")).unwrap()).unwrap();
    assert_eq!(history["period"], json!("2022"));
    assert_eq!(history["history"].as_array().unwrap().len(), 1);
    let holdout = read_pairs(&ck.join("holdout.jsonl")).unwrap();
    let train = read_pairs(&ck.join("train_pairs.jsonl")).unwrap();
    assert_eq!(holdout.len() + train.len(), 48);
    assert!(holdout.iter().all(|h| train.iter().all(|t| t.sat_id != h.sat_id)));

    // eval on the holdout reproduces the last validation R²
    let line = ok(&["eval", "--checkpoint", path(&ck), "--pairs", path(&ck.join("holdout.jsonl")), "--corpus", path(&corpus)]);
    let r2: f64 = line.trim().strip_prefix("r2=").unwrap().split(' ').next().unwrap().parse().unwrap();
    let val_r2 = history["history"][0]["val_r2"].as_f64().unwrap();
    assert!((r2 - val_r2).abs() <= 1e-9, "{r2} vs {val_r2}");
    assert!(line.contains(&format!("n={} skipped=0", holdout.len())));

    // retraining with the same seed gives the same checkpoint
    let again = ws.join("ck2");
    let cfg = tiny_model_config().to_string();
    ok(&["--config", &cfg, "train", "--corpus", path(&corpus), "--out", path(&again), "--period", "2022", "--seed", "1"]);
    let strip = |mut t: std::collections::BTreeMap<String, Vec<u8>>| {
        t.remove("history.json");
        t
    };
    assert_eq!(strip(tree(&ck)), strip(tree(&again)));
}

fn rows(store: &Store, task_id: &str) -> String {
    let counties: Vec<_> = store.county_rows().into_iter().filter(|r| r.task_id == task_id).collect();
    serde_json::to_string(&(store.frames(task_id), store.fine_rows(task_id), counties)).unwrap()
}

#[test]
fn headless_predict_matches_the_service() {
    let ws = Workspace::new();
    let corpus = synth_small(&ws, "c", "8");
    let ck = train_tiny(&ws, &corpus);
    let spec = json!({
        "task_id": "same",
        "region": {"bbox": {"min": {"lat": -89.0, "lon": -179.0}, "max": {"lat": 89.0, "lon": 179.0}}},
        "period": {"from": "2022", "to": "2023"},
        "worker_count": 2,
        "seed": 3
    });
    let spec_path = ws.join("spec.json");
    std::fs::write(&spec_path, spec.to_string()).unwrap();
    let (headless, served) = (ws.join("headless"), ws.join("served"));
    let line = ok(&[
        "predict", "--store", path(&headless), "--corpus", path(&corpus), "--checkpoint", path(&ck),
        "--spec", path(&spec_path), "--out", path(&ws.join("report.json")),
    ]);
    let summary: Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(summary["status"], json!("succeeded"));
    assert_eq!(summary["stats"]["scored"], json!(96));

    let mut server = Server::start(&served, &corpus, &ck);
    let (status, created) = server.call(Method::POST, "/api/tasks", Some(spec.clone()), "TaskCreated");
    assert_eq!(status, StatusCode::CREATED, "{created}");
    let (final_status, _) = server.wait("same", Duration::from_secs(120));
    assert_eq!(final_status, "succeeded");
    assert!(server.violations.is_empty(), "{:?}", server.violations);
    drop(server);

    let (a, b) = (Store::open(&headless).unwrap(), Store::open(&served).unwrap());
    assert!(!a.fine_rows("same").is_empty());
    assert_eq!(rows(&a, "same"), rows(&b, "same"));
    assert_eq!(a.task("same").unwrap().spec, b.task("same").unwrap().spec);

    // flags build the same spec as the file
    let flags = ws.join("flags");
    ok(&[
        "predict", "--store", path(&flags), "--corpus", path(&corpus), "--checkpoint", path(&ck),
        "--task-id", "same", "--bbox=-179,-89,179,89", "--period", "2022:2023", "--workers", "2", "--seed", "3",
    ]);
    let c = Store::open(&flags).unwrap();
    assert_eq!(rows(&a, "same"), rows(&c, "same"));
}

#[test]
fn failed_prediction_exits_with_1() {
    let ws = Workspace::new();
    let corpus = synth_small(&ws, "c", "9");
    let ck = train_tiny(&ws, &corpus);
    let params = ck.join("params");
    let target = if params.is_dir() { tree(&params).keys().next().map(|k| params.join(k)).unwrap() } else { params };
    std::fs::write(&target, b"not a checkpoint").unwrap();
    let store = ws.join("store");
    let out = run(&[
        "predict", "--store", path(&store), "--corpus", path(&corpus), "--checkpoint", path(&ck),
        "--task-id", "broken", "--bbox=-179,-89,179,89", "--period", "2023",
    ]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    let err = error_line(&out);
    assert_eq!(err["error"]["kind"], json!("runtime"));
    assert!(err["error"]["message"].as_str().unwrap().contains("broken"));
    let s = Store::open(&store).unwrap();
    assert!(s.fine_rows("broken").is_empty());
    assert_eq!(s.task("broken").unwrap().status, geoecon::store::TaskStatus::Failed);
}

#[test]
fn config_file_drives_every_command() {
    let ws = Workspace::new();
    let (corpus, ck, store) = (ws.join("c"), ws.join("ck"), ws.join("store"));
    let mut cfg = tiny_model_config();
    cfg["seed"] = json!(12);
    cfg["workers"] = json!(2);
    cfg["corpus"] = json!(corpus);
    cfg["checkpoint"] = json!(ck);
    cfg["store"] = json!(store);
    cfg["synth"] = json!({"n_pairs": 32, "periods": ["2022", "2023"], "counties_per_side": 2});
    cfg["pairs"] = json!({"max_km": 5.0, "heading": 0});
    cfg["train"]["adam"] = json!({"lr": 1e-3});
    cfg["task"] = json!({
        "task_id": "from-config",
        "region": {"bbox": {"min": {"lat": -80.0, "lon": -170.0}, "max": {"lat": 80.0, "lon": 170.0}}},
        "period": "2023",
        "aggregation": "max"
    });
    cfg["service"] = json!({"listen": "127.0.0.1:0", "cors_origin": "*"});
    let violations = Schema::named("config-schema.json").root_violations(&cfg);
    assert!(violations.is_empty(), "{violations:?}");
    let bad = json!({"synth": {"n_pairs": 0}, "task": {"aggregation": "median"}});
    assert_eq!(Schema::named("config-schema.json").root_violations(&bad).len(), 2);

    let file = ws.join("config.json");
    std::fs::write(&file, cfg.to_string()).unwrap();
    let c = path(&file);
    ok(&["--config", c, "synth", "--out", path(&corpus)]);
    ok(&["--config", c, "train", "--out", path(&ck)]);
    let line = ok(&["--config", c, "predict"]);
    let summary: Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(summary["task_id"], json!("from-config"));
    assert_eq!(summary["stats"]["scored"], json!(32));
    let s = Store::open(&store).unwrap();
    let spec = s.task("from-config").unwrap().spec;
    assert_eq!(spec["aggregation"], json!("max"));
    assert_eq!(spec["worker_count"], json!(2));
    assert_eq!(spec["seed"], json!(12));
}
