#![allow(dead_code)]

use std::collections::BTreeMap;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use reqwest::blocking::Client;
use reqwest::{Method, StatusCode};
use serde_json::{json, Value};

pub fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_geoecon"));
    cmd.env("GEOECON_LOG", "warn");
    for var in ["GEOECON_LISTEN", "GEOECON_STORE", "GEOECON_CORPUS", "GEOECON_CHECKPOINT", "GEOECON_WORKERS", "GEOECON_CORS_ORIGIN"] {
        cmd.env_remove(var);
    }
    cmd
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

/// Runs a command that must succeed; returns its stdout.
pub fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "geoecon {args:?} exited {:?}: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// The JSON error line a failing command prints last on stderr.
pub fn error_line(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().unwrap_or_else(|| panic!("empty stderr"));
    serde_json::from_str(last).unwrap_or_else(|e| panic!("non-JSON error line {last:?}: {e}"))
}

pub fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(base, &path, out);
            } else {
                let rel = path.strip_prefix(base).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

pub fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Model small enough to train in seconds, as a config object.
pub fn tiny_model_config() -> Value {
    json!({
        "model": {
            "image_side": 32, "patch_side": 16, "hidden_dim": 16, "num_encoder_layers": 1,
            "num_heads": 2, "head_hidden": 8, "dropout_rate": 0.0
        },
        "train": { "epochs": 1, "batch_size": 8 }
    })
}

pub struct Schema {
    root: Value,
}

impl Schema {
    pub fn load() -> Schema {
        Schema::named("api-schema.json")
    }

    pub fn named(file: &str) -> Schema {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs").join(file);
        Schema { root: serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap() }
    }

    /// Violations of the whole document.
    pub fn root_violations(&self, body: &Value) -> Vec<String> {
        let validator = jsonschema::options().build(&self.root).unwrap();
        validator.iter_errors(body).map(|e| format!("{e} at {}", e.instance_path)).collect()
    }

    /// Violations of `$defs/def`, empty when `body` conforms.
    pub fn violations(&self, def: &str, body: &Value) -> Vec<String> {
        let mut schema = self.root.clone();
        schema["$ref"] = json!(format!("#/$defs/{def}"));
        let validator = jsonschema::options().should_validate_formats(true).build(&schema).unwrap();
        validator.iter_errors(body).map(|e| format!("{def}: {e} at {}", e.instance_path)).collect()
    }
}

/// A `geoecon serve` child process on a free local port.
pub struct Server {
    child: Child,
    pub base: String,
    client: Client,
    schema: Schema,
    /// Schema violations seen so far.
    pub violations: Vec<String>,
}

impl Server {
    pub fn start(store: &Path, corpus: &Path, checkpoint: &Path) -> Server {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let listen = format!("127.0.0.1:{port}");
        let child = bin()
            .args(["serve", "--listen", &listen, "--store", path(store), "--corpus", path(corpus)])
            .args(["--checkpoint", path(checkpoint)])
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        let server = Server {
            child,
            base: format!("http://{listen}"),
            client: Client::builder().timeout(Duration::from_secs(60)).build().unwrap(),
            schema: Schema::load(),
            violations: Vec::new(),
        };
        let deadline = Instant::now() + Duration::from_secs(30);
        while server.client.get(format!("{}/api/health", server.base)).send().is_err() {
            assert!(Instant::now() < deadline, "service did not come up on {listen}");
            std::thread::sleep(Duration::from_millis(50));
        }
        server
    }

    /// Sends a request and validates its body against `def` for 2xx
    /// responses, the error shape otherwise.
    pub fn call(&mut self, method: Method, path: &str, body: Option<Value>, def: &str) -> (StatusCode, Value) {
        let mut req = self.client.request(method, format!("{}{}", self.base, path));
        if let Some(b) = body {
            req = req.json(&b);
        }
        let resp = req.send().unwrap();
        let status = resp.status();
        let value: Value = resp.json().unwrap();
        let def = if status.is_success() { def } else { "ApiError" };
        let v = self.schema.violations(def, &value);
        self.violations.extend(v);
        (status, value)
    }

    pub fn get(&mut self, path: &str, def: &str) -> (StatusCode, Value) {
        self.call(Method::GET, path, None, def)
    }

    /// Polls events until the task reaches a terminal status; returns the
    /// final status and every event seen.
    pub fn wait(&mut self, task_id: &str, timeout: Duration) -> (String, Vec<Value>) {
        let deadline = Instant::now() + timeout;
        let mut cursor = 0;
        let mut events = Vec::new();
        loop {
            let (status, body) = self.get(&format!("/api/tasks/{task_id}/events?after={cursor}&wait_ms=500"), "TaskEvents");
            assert_eq!(status, StatusCode::OK, "{body}");
            events.extend(body["events"].as_array().unwrap().iter().cloned());
            cursor = body["cursor"].as_u64().unwrap();
            let (_, task) = self.get(&format!("/api/tasks/{task_id}"), "TaskStatus");
            let s = task["status"].as_str().unwrap().to_string();
            if s == "succeeded" || s == "failed" {
                let (_, rest) = self.get(&format!("/api/tasks/{task_id}/events?after={cursor}"), "TaskEvents");
                events.extend(rest["events"].as_array().unwrap().iter().cloned());
                return (s, events);
            }
            assert!(Instant::now() < deadline, "task {task_id} still {s}");
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Corpus, checkpoint and store locations under one temporary directory.
pub struct Workspace {
    pub dir: tempfile::TempDir,
}

impl Workspace {
    pub fn new() -> Workspace {
        Workspace { dir: tempfile::tempdir().unwrap() }
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}
