use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use geoecon::align::PairOptions;
use geoecon::dataio::{synth_corpus, CorpusLayout, PreprocessPolicy, SynthConfig};
use geoecon::dataset::{align_period, load_pair_images, load_period};
use geoecon::geo::BBox;
use geoecon::model::{FusionModel, LabelNorm, ModelConfig, TrainedModel};
use geoecon::store::{new_task, Store, TaskStatus, Write};
use geoecon_service::{serve_on, Service, ServiceConfig};
use reqwest::{Method, StatusCode};
use serde_json::{json, Value};

const PERIODS: [&str; 5] = ["2019", "2020", "2021", "2022", "2023"];

fn write_checkpoint(layout: &CorpusLayout, dir: &Path) {
    let inputs = load_period(layout, PERIODS[0]).unwrap();
    let pairs = align_period(&inputs, &PairOptions::default()).unwrap().pairs;
    let images = load_pair_images(layout, &inputs, &pairs[..pairs.len().min(16)]).unwrap();
    let cfg = ModelConfig {
        image_side: 32,
        patch_side: 16,
        hidden_dim: 16,
        num_encoder_layers: 1,
        num_heads: 2,
        dropout_rate: 0.0,
        head_hidden: 8,
        ..ModelConfig::default()
    };
    let sat = PreprocessPolicy::fit(images.iter().map(|p| &p.sat), cfg.image_side).unwrap();
    let sv = PreprocessPolicy::fit(images.iter().map(|p| &p.sv), cfg.image_side).unwrap();
    let norm = LabelNorm::fit(pairs.iter().map(|p| p.label));
    TrainedModel::new(FusionModel::new(cfg, 2).unwrap(), norm, sat, sv).unwrap().save(dir).unwrap();
}

struct Schema {
    root: Value,
}

impl Schema {
    fn load() -> Schema {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/api-schema.json");
        Schema { root: serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap() }
    }

    fn check(&self, def: &str, body: &Value) {
        let mut schema = self.root.clone();
        schema["$ref"] = json!(format!("#/$defs/{def}"));
        let validator = jsonschema::options().should_validate_formats(true).build(&schema).unwrap();
        let errors: Vec<String> = validator.iter_errors(body).map(|e| format!("{} at {}", e, e.instance_path)).collect();
        assert!(errors.is_empty(), "{def} violations {errors:?} in {body}");
    }
}

struct Api {
    base: String,
    client: reqwest::Client,
    schema: Schema,
}

impl Api {
    /// Sends a request and validates the body: `def` for 2xx, the error
    /// shape otherwise.
    async fn call(&self, method: Method, path: &str, body: Option<Value>, key: Option<&str>, def: &str) -> (StatusCode, Value) {
        let mut req = self.client.request(method, format!("{}{}", self.base, path));
        if let Some(b) = body {
            req = req.json(&b);
        }
        if let Some(k) = key {
            req = req.header("Idempotency-Key", k);
        }
        let resp = req.send().await.unwrap();
        let status = resp.status();
        let text = resp.text().await.unwrap();
        let value: Value = serde_json::from_str(&text).unwrap_or_else(|e| panic!("{path}: non-JSON body {text:?}: {e}"));
        if status.is_success() {
            self.schema.check(def, &value);
        } else {
            self.schema.check("ApiError", &value);
            assert_eq!(value["status"], json!(status.as_u16()));
        }
        (status, value)
    }

    async fn get(&self, path: &str, def: &str) -> (StatusCode, Value) {
        self.call(Method::GET, path, None, None, def).await
    }

    async fn get_text(&self, path: &str) -> String {
        self.client.get(format!("{}{}", self.base, path)).send().await.unwrap().text().await.unwrap()
    }
}

struct Running {
    api: Api,
    service: Service,
    stop: tokio::sync::oneshot::Sender<()>,
    handle: tokio::task::JoinHandle<()>,
}

async fn start(config: &ServiceConfig) -> Running {
    let service = Service::open(config).unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let (stop, rx) = tokio::sync::oneshot::channel::<()>();
    let router = service.router(Some("http://console.local"));
    let handle = tokio::spawn(async move {
        serve_on(listener, router, async {
            let _ = rx.await;
        })
        .await
        .unwrap();
    });
    Running { api: Api { base, client: reqwest::Client::new(), schema: Schema::load() }, service, stop, handle }
}

impl Running {
    async fn stop(self) {
        let _ = self.stop.send(());
        self.handle.await.unwrap();
        drop(self.service);
    }
}

fn fixture(dir: &Path) -> (ServiceConfig, BBox) {
    let cfg = SynthConfig {
        seed: 9,
        n_pairs: 24,
        periods: PERIODS.iter().map(|p| p.to_string()).collect(),
        ..SynthConfig::default()
    };
    let summary = synth_corpus(&cfg, &dir.join("corpus")).unwrap();
    write_checkpoint(&CorpusLayout::new(&dir.join("corpus")), &dir.join("ckpt"));
    let config = ServiceConfig::new(dir.join("store"), dir.join("corpus"), Some(dir.join("ckpt")));
    (config, summary.region)
}

fn bbox_param(b: &BBox) -> String {
    format!("{},{},{},{}", b.min.lon, b.min.lat, b.max.lon, b.max.lat)
}

fn region_body(b: &BBox) -> Value {
    json!({ "bbox": { "min": { "lat": b.min.lat, "lon": b.min.lon }, "max": { "lat": b.max.lat, "lon": b.max.lon } } })
}

/// Polls events until the task is terminal; checks ordering across polls.
async fn follow(api: &Api, task_id: &str) -> Vec<Value> {
    let mut cursor = 0u64;
    let mut all = Vec::new();
    let deadline = Instant::now() + Duration::from_secs(120);
    loop {
        let (s, body) = api.get(&format!("/api/tasks/{task_id}/events?after={cursor}&wait_ms=500"), "TaskEvents").await;
        assert_eq!(s, StatusCode::OK);
        for e in body["events"].as_array().unwrap() {
            let seq = e["seq"].as_u64().unwrap();
            assert!(seq > cursor, "seq {seq} after cursor {cursor}");
            cursor = seq;
            all.push(e.clone());
        }
        assert_eq!(body["cursor"].as_u64().unwrap(), cursor);
        let (_, task) = api.get(&format!("/api/tasks/{task_id}"), "TaskStatus").await;
        if task["status"] == "succeeded" || task["status"] == "failed" {
            let (_, rest) = api.get(&format!("/api/tasks/{task_id}/events?after={cursor}"), "TaskEvents").await;
            all.extend(rest["events"].as_array().unwrap().iter().cloned());
            return all;
        }
        assert!(Instant::now() < deadline, "task {task_id} did not finish");
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn full_api_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (config, region) = fixture(dir.path());
    let run = start(&config).await;
    let api = &run.api;

    let (s, _) = api.get("/api/health", "Health").await;
    assert_eq!(s, StatusCode::OK);

    // rejected submissions
    let period = json!({ "from": "2019", "to": "2023" });
    let cases = [
        (json!({ "region": { "counties": [] }, "period": period }), StatusCode::BAD_REQUEST, "INVALID_TASK"),
        (
            json!({ "region": { "bbox": { "min": { "lat": 1, "lon": 1 }, "max": { "lat": 1, "lon": 1 } } }, "period": period }),
            StatusCode::BAD_REQUEST,
            "INVALID_TASK",
        ),
        (json!({ "region": region_body(&region), "period": { "from": "2023", "to": "2019" } }), StatusCode::BAD_REQUEST, "INVALID_TASK"),
        (json!({ "region": region_body(&region), "period": "1990" }), StatusCode::BAD_REQUEST, "INVALID_TASK"),
        (json!({ "region": region_body(&region), "period": period, "model": "nope" }), StatusCode::NOT_FOUND, "UNKNOWN_MODEL"),
        (json!({ "region": region_body(&region), "period": period, "worker_count": 0 }), StatusCode::BAD_REQUEST, "INVALID_TASK"),
        (json!({ "region": region_body(&region), "period": period, "colour": "red" }), StatusCode::BAD_REQUEST, "INVALID_REQUEST"),
        (json!({ "period": period }), StatusCode::BAD_REQUEST, "INVALID_REQUEST"),
    ];
    for (body, status, code) in cases {
        let (s, err) = api.call(Method::POST, "/api/tasks", Some(body.clone()), None, "TaskCreated").await;
        assert_eq!((s, err["code"].as_str().unwrap()), (status, code), "{body}");
    }
    let raw = api.client.post(format!("{}/api/tasks", api.base)).body("{not json").send().await.unwrap();
    assert_eq!(raw.status(), StatusCode::BAD_REQUEST);
    api.schema.check("ApiError", &raw.json().await.unwrap());
    assert!(api.get("/api/tasks", "TaskList").await.1["tasks"].as_array().unwrap().is_empty());

    // submission, idempotent retry, monitoring
    let body = json!({ "region": region_body(&region), "period": period, "worker_count": 2 });
    let (s, created) = api.call(Method::POST, "/api/tasks", Some(body.clone()), Some("k-1"), "TaskCreated").await;
    assert_eq!(s, StatusCode::CREATED);
    let task_id = created["task_id"].as_str().unwrap().to_string();
    let (s, again) = api.call(Method::POST, "/api/tasks", Some(body.clone()), Some("k-1"), "TaskCreated").await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(again["task_id"].as_str().unwrap(), task_id);

    let events = follow(api, &task_id).await;
    assert!(events.len() >= 3);
    let seqs: Vec<u64> = events.iter().map(|e| e["seq"].as_u64().unwrap()).collect();
    assert!(seqs.windows(2).all(|w| w[0] < w[1]));
    let (s, task) = api.get(&format!("/api/tasks/{task_id}"), "TaskStatus").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(task["status"], "succeeded", "{task}");
    for stage in ["read", "score", "reduce", "aggregate"] {
        assert_eq!(task["progress"][stage], json!(1.0));
    }
    let last = seqs.last().unwrap();
    let (_, tail) = api.get(&format!("/api/tasks/{task_id}/events?after={last}"), "TaskEvents").await;
    assert!(tail["events"].as_array().unwrap().is_empty());
    assert_eq!(tail["cursor"].as_u64().unwrap(), *last);

    // reads return exactly the persisted values
    let store = run.service.store();
    let mut read_times = Vec::new();
    for period in PERIODS {
        let t = Instant::now();
        let (s, heat) = api.get(&format!("/api/heatmap?bbox={}&period={period}", bbox_param(&region)), "Heatmap").await;
        read_times.push(t.elapsed());
        assert_eq!(s, StatusCode::OK);
        let rows = store.query_heatmap(&region, period);
        assert!(!rows.is_empty());
        let cells = heat["cells"].as_array().unwrap();
        assert_eq!(cells.len(), rows.len());
        for (c, r) in cells.iter().zip(&rows) {
            assert_eq!(c["score"].as_f64().unwrap().to_bits(), r.score.to_bits());
            assert_eq!((c["lat"].as_f64().unwrap(), c["lon"].as_f64().unwrap()), (r.lat, r.lon));
        }
    }
    let far = "/api/heatmap?bbox=-70,-40,-69,-39&period=2023";
    assert!(api.get(far, "Heatmap").await.1["cells"].as_array().unwrap().is_empty());

    let (_, counties) = api.get("/api/counties", "CountyList").await;
    let county_ids: Vec<String> =
        counties["counties"].as_array().unwrap().iter().map(|c| c["county_id"].as_str().unwrap().to_string()).collect();
    let rows = store.county_rows();
    assert!(!rows.is_empty());
    for row in rows.iter().filter(|r| r.period == "2023") {
        let t = Instant::now();
        let (s, c) = api.get(&format!("/api/counties/{}?period=2023", row.county_id), "CountyScore").await;
        read_times.push(t.elapsed());
        assert_eq!(s, StatusCode::OK);
        assert_eq!(c["value"].as_f64().unwrap().to_bits(), row.value.to_bits());
        assert_eq!(c["task_id"].as_str().unwrap(), task_id);

        let (s, trend) = api.get(&format!("/api/counties/{}/trend?from=2019&to=2023", row.county_id), "Trend").await;
        assert_eq!(s, StatusCode::OK);
        let points = trend["points"].as_array().unwrap();
        let periods: Vec<&str> = points.iter().map(|p| p["period"].as_str().unwrap()).collect();
        assert_eq!(periods, PERIODS);
        let (_, short) = api.get(&format!("/api/counties/{}/trend?from=2020&to=2021", row.county_id), "Trend").await;
        assert_eq!(short["points"].as_array().unwrap().len(), 2);
    }
    let with_data: Vec<&str> = rows.iter().map(|r| r.county_id.as_str()).collect();
    let id = &county_ids[0];
    let (s, err) = api.get(&format!("/api/counties/{id}?period=2018"), "CountyScore").await;
    assert_eq!((s, err["code"].as_str().unwrap()), (StatusCode::NOT_FOUND, "NO_DATA"));
    if let Some(empty) = county_ids.iter().find(|c| !with_data.contains(&c.as_str())) {
        let (s, err) = api.get(&format!("/api/counties/{empty}?period=2023"), "CountyScore").await;
        assert_eq!((s, err["code"].as_str().unwrap()), (StatusCode::NOT_FOUND, "NO_DATA"));
    }

    // error shapes
    let errors = [
        ("/api/counties/nowhere?period=2023", StatusCode::NOT_FOUND, "UNKNOWN_COUNTY"),
        ("/api/counties/nowhere/trend", StatusCode::NOT_FOUND, "UNKNOWN_COUNTY"),
        (&format!("/api/counties/{id}"), StatusCode::BAD_REQUEST, "INVALID_QUERY"),
        (&format!("/api/counties/{id}?period=2023-14"), StatusCode::BAD_REQUEST, "INVALID_PERIOD"),
        (&format!("/api/counties/{id}/trend?from=2023&to=2019"), StatusCode::BAD_REQUEST, "INVALID_PERIOD"),
        ("/api/heatmap?bbox=1,2,3&period=2023", StatusCode::BAD_REQUEST, "INVALID_BBOX"),
        ("/api/heatmap?bbox=a,b,c,d&period=2023", StatusCode::BAD_REQUEST, "INVALID_BBOX"),
        ("/api/heatmap?bbox=10,50,5,60&period=2023", StatusCode::BAD_REQUEST, "INVALID_BBOX"),
        ("/api/heatmap?bbox=0,0,1,1", StatusCode::BAD_REQUEST, "INVALID_QUERY"),
        ("/api/tasks/missing", StatusCode::NOT_FOUND, "UNKNOWN_TASK"),
        ("/api/tasks/missing/events", StatusCode::NOT_FOUND, "UNKNOWN_TASK"),
        (&format!("/api/tasks/{task_id}/events?after=-1"), StatusCode::BAD_REQUEST, "INVALID_QUERY"),
        ("/api/nothing", StatusCode::NOT_FOUND, "NOT_FOUND"),
    ];
    for (path, status, code) in errors {
        let (s, err) = api.get(path, "Health").await;
        assert_eq!((s, err["code"].as_str().unwrap()), (status, code), "{path}");
    }
    let (s, err) = api.call(Method::DELETE, "/api/tasks", None, None, "Health").await;
    assert_eq!((s, err["code"].as_str().unwrap()), (StatusCode::METHOD_NOT_ALLOWED, "METHOD_NOT_ALLOWED"));

    // reads are fast and reproducible while nothing commits
    let max = read_times.iter().max().unwrap();
    assert!(*max < Duration::from_millis(100), "slowest read {max:?}");
    let path = format!("/api/heatmap?bbox={}&period=2021", bbox_param(&region));
    assert_eq!(api.get_text(&path).await, api.get_text(&path).await);

    // cross-origin preflight from the console origin
    let pre = api
        .client
        .request(Method::OPTIONS, format!("{}/api/tasks", api.base))
        .header("Origin", "http://console.local")
        .header("Access-Control-Request-Method", "POST")
        .header("Access-Control-Request-Headers", "content-type,idempotency-key")
        .send()
        .await
        .unwrap();
    assert!(pre.status().is_success());
    assert_eq!(pre.headers()["access-control-allow-origin"], "http://console.local");

    // a named rerun replaces the results in place
    let before = api.get_text(&path).await;
    let named = json!({ "task_id": task_id, "region": region_body(&region), "period": period, "worker_count": 1 });
    let (s, rerun) = api.call(Method::POST, "/api/tasks", Some(named), None, "TaskCreated").await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(rerun["task_id"].as_str().unwrap(), task_id);
    let events = follow(api, &task_id).await;
    assert!(events.iter().all(|e| e["seq"].as_u64().unwrap() > *last));
    assert_eq!(api.get_text(&path).await, before);

    let heat_before = api.get_text(&path).await;
    run.stop().await;

    // restart on the same store: same answers; unfinished tasks are failed
    {
        let store = Store::open(&config.store_dir).unwrap();
        let mut spec = store.task(&task_id).unwrap().spec;
        spec["task_id"] = json!("orphan");
        store.commit(vec![Write::CreateTask(new_task("orphan", spec))]).unwrap();
    }
    let run = start(&config).await;
    assert_eq!(run.api.get_text(&path).await, heat_before);
    let (_, orphan) = run.api.get("/api/tasks/orphan", "TaskStatus").await;
    assert_eq!(orphan["status"], "failed");
    assert_eq!(run.service.store().task("orphan").unwrap().status, TaskStatus::Failed);
    run.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn failed_task_is_reported_through_the_api() {
    let dir = tempfile::tempdir().unwrap();
    let (config, region) = fixture(dir.path());
    let blob: PathBuf = std::fs::read_dir(dir.path().join("ckpt/params")).unwrap().next().unwrap().unwrap().path();
    std::fs::write(blob, b"x").unwrap();
    let run = start(&config).await;
    let body = json!({ "task_id": "bad-ckpt", "region": region_body(&region), "period": "2021" });
    let (s, _) = run.api.call(Method::POST, "/api/tasks", Some(body), None, "TaskCreated").await;
    assert_eq!(s, StatusCode::CREATED);
    let events = follow(&run.api, "bad-ckpt").await;
    assert_eq!(events.last().unwrap()["level"], "error");
    let (_, task) = run.api.get("/api/tasks/bad-ckpt", "TaskStatus").await;
    assert_eq!(task["status"], "failed");
    assert!(task["message"].as_str().is_some_and(|m| !m.is_empty()));
    assert!(run.service.store().fine_rows("bad-ckpt").is_empty());
    run.stop().await;
}
