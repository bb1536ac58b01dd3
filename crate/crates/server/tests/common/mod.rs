//! Spawns the real `detflow` binary and talks to it over HTTP or through
//! its own CLI.

#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use detflow_core::augment::AugmentationPlan;
use detflow_core::config::{render_config, Architecture, Backbone, HyperParams, LrSchedule, ModelSpec, TrainingConfig};
use detflow_core::workspace::sha256_hex;
use detflow_testkit::crc::read_tfrecords;
use detflow_testkit::shapes::{shapes_dataset, ShapeImage};
use detflow_testkit::wire::{decode_example, Value as Feature};
use reqwest::blocking::{Client, RequestBuilder};
use reqwest::Method;
use serde_json::{json, Value};

pub const BIN: &str = env!("CARGO_BIN_EXE_detflow");
pub const PASSWORD: &str = "correct horse battery";

pub struct TestServer {
    child: Child,
    pub base: String,
    pub dir: tempfile::TempDir,
}

impl TestServer {
    pub fn start() -> Self {
        Self::start_with(&[])
    }

    pub fn start_with(env: &[(&str, &str)]) -> Self {
        let dir = tempfile::tempdir().expect("tempdir");
        let mut child = Command::new(BIN)
            .arg("serve")
            .env("DETFLOW_LISTEN", "127.0.0.1:0")
            .env("DETFLOW_STORAGE_ROOT", dir.path().join("store"))
            .env("DETFLOW_HASH_ITERATIONS", "1000")
            .env("RUST_LOG", "warn")
            .envs(env.iter().copied())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .expect("spawn detflow serve");
        let mut lines = BufReader::new(child.stdout.take().expect("stdout")).lines();
        let first = lines.next().and_then(Result::ok).unwrap_or_default();
        let base = first
            .strip_prefix("detflow listening on ")
            .unwrap_or_else(|| panic!("unexpected server banner `{first}`"))
            .to_string();
        std::thread::spawn(move || for _ in lines {});
        Self { child, base, dir }
    }

    pub fn anonymous(&self) -> Api {
        Api {
            http: Client::builder().timeout(Duration::from_secs(60)).build().expect("client"),
            base: self.base.clone(),
            token: None,
        }
    }

    /// Registers `name` and returns a client holding its session token.
    pub fn user(&self, name: &str) -> Api {
        let mut api = self.anonymous();
        let body = json!({"display_name": name, "password": PASSWORD});
        let (status, v) = api.call(Method::POST, "/accounts", Some(body.clone()));
        assert_eq!(status, 201, "register {name}: {v}");
        let (status, v) = api.call(Method::POST, "/sessions", Some(body));
        assert_eq!(status, 200, "login {name}: {v}");
        api.token = Some(v["token"].as_str().expect("token").to_string());
        api
    }
}

impl Drop for TestServer {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[derive(Clone)]
pub struct Api {
    pub http: Client,
    pub base: String,
    pub token: Option<String>,
}

impl Api {
    pub fn req(&self, method: Method, path: &str) -> RequestBuilder {
        let req = self.http.request(method, format!("{}/api{path}", self.base));
        match &self.token {
            Some(t) => req.bearer_auth(t),
            None => req,
        }
    }

    pub fn call(&self, method: Method, path: &str, body: Option<Value>) -> (u16, Value) {
        let mut req = self.req(method, path);
        if let Some(b) = body {
            req = req.json(&b);
        }
        let resp = req.send().expect("request");
        let status = resp.status().as_u16();
        let bytes = resp.bytes().expect("body");
        (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
    }

    pub fn put(&self, path: &str, bytes: Vec<u8>) -> (u16, Value) {
        let resp = self.req(Method::PUT, &format!("/files/{path}")).body(bytes).send().expect("request");
        let status = resp.status().as_u16();
        (status, resp.json().unwrap_or(Value::Null))
    }

    pub fn get_bytes(&self, path: &str) -> (u16, Vec<u8>) {
        let resp = self.req(Method::GET, path).send().expect("request");
        (resp.status().as_u16(), resp.bytes().expect("body").to_vec())
    }

    /// Reads the job's event stream until the server closes it.
    pub fn events(&self, job_id: &str, from_seq: u64) -> Vec<Value> {
        let resp = self
            .req(Method::GET, &format!("/jobs/{job_id}/events?from_seq={from_seq}"))
            .send()
            .expect("event stream");
        assert_eq!(resp.status().as_u16(), 200);
        let mut out = Vec::new();
        let mut last_id = None;
        for line in BufReader::new(resp).lines() {
            let line = line.expect("stream line");
            if let Some(id) = line.strip_prefix("id:") {
                last_id = Some(id.trim().parse::<u64>().expect("numeric id"));
            } else if let Some(data) = line.strip_prefix("data:") {
                let ev: Value = serde_json::from_str(data.trim()).expect("event json");
                assert_eq!(Some(ev["seq"].as_u64().unwrap()), last_id, "id line precedes data");
                out.push(ev);
            }
        }
        out
    }
}

/// Runs the CLI against `server` with its session cached under `home`.
pub fn cli(server: &str, home: &Path, args: &[&str]) -> (i32, String, String) {
    let out = Command::new(BIN)
        .args(args)
        .env("DETFLOW_SERVER", server)
        .env("DETFLOW_HOME", home)
        .env_remove("DETFLOW_TOKEN")
        .output()
        .expect("run detflow");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

pub fn e2e_config() -> TrainingConfig {
    TrainingConfig {
        model: ModelSpec::new(Architecture::Ssd, Backbone::MobileNetV2),
        hp: HyperParams {
            num_steps: 200,
            batch_size: 1,
            lr: LrSchedule::step_decay(0.0002, &[(150, 0.00002)]),
            num_classes: 2,
            checkpoint_every: 50,
            augmentation: AugmentationPlan::default(),
        },
        labelmap_path: "data/labelmap.pbtxt".into(),
        train_record_path: "data/train.record".into(),
        eval_record_path: "data/eval.record".into(),
        extra: Default::default(),
    }
}

pub fn e2e_dataset() -> Vec<ShapeImage> {
    shapes_dataset(20, 11)
}

pub fn preprocess_request() -> Value {
    json!({
        "format": "voc_xml",
        "annotations": ["annotations"],
        "images_dir": "images",
        "split_ratio": 0.8,
        "seed": 5,
        "augmentation": {"enabled_ops": ["flip_h"], "fraction": 0.5, "seed": 9},
    })
}

/// A detector that reports every ground-truth box of the eval record
/// exactly, decoded with the independent wire-format reader.
pub fn perfect_detections(eval_record: &[u8]) -> Result<Vec<Value>, String> {
    let mut dets = Vec::new();
    for payload in read_tfrecords(eval_record)? {
        let ex = decode_example(&payload)?;
        let Some(Feature::Bytes(name)) = ex.get("image/filename") else {
            return Err("eval example without filename".into());
        };
        let name = String::from_utf8(name[0].clone()).map_err(|e| e.to_string())?;
        let floats = |k: &str| match ex.get(&format!("image/object/bbox/{k}")) {
            Some(Feature::Floats(v)) => v.clone(),
            _ => Vec::new(),
        };
        let (x0, y0, x1, y1) = (floats("xmin"), floats("ymin"), floats("xmax"), floats("ymax"));
        let Some(Feature::Ints(labels)) = ex.get("image/object/class/label") else {
            return Err("eval example without labels".into());
        };
        for (i, label) in labels.iter().enumerate() {
            dets.push(json!({
                "image_id": name,
                "box": [x0[i] as f64, y0[i] as f64, x1[i] as f64, y1[i] as f64],
                "class_id": label,
                "score": 0.99,
            }));
        }
    }
    Ok(dets)
}

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {{
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    }};
}

fn check_preprocess(v: &Value) -> Result<(), String> {
    let lm = v["labelmap"].as_array().map_or(0, Vec::len);
    ensure!(lm == 2, "labelmap has {lm} classes: {v}");
    ensure!(v["train_images"] == 16 && v["eval_images"] == 4, "split is not 16/4: {v}");
    ensure!(v["train_record"]["record_count"] == 24, "train record count: {}", v["train_record"]);
    ensure!(v["eval_record"]["record_count"] == 4, "eval record count: {}", v["eval_record"]);
    let aug = v["augmented_images"].as_array().map_or(0, Vec::len);
    ensure!(aug == 8, "{aug} augmented images");
    Ok(())
}

fn check_events(events: &[Value]) -> Result<(), String> {
    for (i, ev) in events.iter().enumerate() {
        ensure!(ev["seq"] == i as u64, "event {i} has seq {}", ev["seq"]);
    }
    let states: Vec<&str> = events.iter().filter(|e| e["type"] == "state").filter_map(|e| e["state"].as_str()).collect();
    ensure!(states == ["created", "queued", "running", "succeeded"], "state events {states:?}");
    let ckpts: Vec<u64> = events.iter().filter(|e| e["type"] == "checkpoint").filter_map(|e| e["step"].as_u64()).collect();
    ensure!(ckpts == [0, 50, 100, 150, 200], "checkpoint events {ckpts:?}");
    Ok(())
}

fn check_map(report: &Value, protocol: &str) -> Result<(), String> {
    let map = report["mAP"].as_f64().ok_or_else(|| format!("no mAP in {report}"))?;
    ensure!((map - 1.0).abs() <= 1e-9, "{protocol}: perfect detector mAP {map}");
    Ok(())
}

/// The whole desk-scale flow through the HTTP API.
pub fn e2e_via_api(server: &TestServer) -> Result<(), String> {
    let api = server.user("e2e-api");
    for img in e2e_dataset() {
        let (s, v) = api.put(&format!("images/{}", img.filename), img.png.clone());
        ensure!(s == 200, "upload image: {s} {v}");
        let (s, v) = api.put(&format!("annotations/{}", img.xml_name()), img.voc_xml().into_bytes());
        ensure!(s == 200, "upload xml: {s} {v}");
    }
    let (s, pre) = api.call(Method::POST, "/preprocess", Some(preprocess_request()));
    ensure!(s == 200, "preprocess: {s} {pre}");
    check_preprocess(&pre)?;

    let cfg = serde_json::to_value(e2e_config()).map_err(|e| e.to_string())?;
    let (s, job) = api.call(Method::POST, "/jobs", Some(cfg));
    ensure!(s == 201, "create job: {s} {job}");
    let id = job["job_id"].as_str().unwrap_or_default().to_string();
    let (s, v) = api.call(Method::POST, &format!("/jobs/{id}/start"), None);
    ensure!(s == 202, "start: {s} {v}");
    let events = api.events(&id, 0);
    check_events(&events)?;
    let (_, job) = api.call(Method::GET, &format!("/jobs/{id}"), None);
    ensure!(job["state"] == "succeeded", "job ended {}", job["state"]);
    let steps: Vec<u64> = job["checkpoints"].as_array().into_iter().flatten().filter_map(|c| c["step"].as_u64()).collect();
    ensure!(steps == [0, 50, 100, 150, 200], "checkpoints {steps:?}");

    let (s, bundle) = api.call(Method::POST, &format!("/jobs/{id}/export"), Some(json!({"checkpoint_step": 200})));
    ensure!(s == 201, "export: {s} {bundle}");
    let export_id = bundle["export_id"].as_str().unwrap_or_default().to_string();
    let (s, manifest) = api.call(Method::GET, &format!("/exports/{export_id}"), None);
    ensure!(s == 200, "verify export: {s} {manifest}");
    let dir = bundle["bundle_dir"].as_str().unwrap_or_default();
    let hashes = manifest["content_hashes"].as_object().ok_or("manifest without hashes")?;
    ensure!(hashes.len() >= 3, "manifest lists {} files", hashes.len());
    for (name, hash) in hashes {
        let (s, bytes) = api.get_bytes(&format!("/files/{dir}/{name}"));
        ensure!(s == 200, "bundle file {name}: {s}");
        ensure!(hash.as_str() == Some(sha256_hex(&bytes).as_str()), "hash mismatch for {name}");
    }
    let (s, tar) = api.get_bytes(&format!("/exports/{export_id}/archive"));
    ensure!(s == 200 && tar.len() > 512, "archive: {s}, {} bytes", tar.len());

    let (s, eval_record) = api.get_bytes("/files/data/eval.record");
    ensure!(s == 200, "download eval record: {s}");
    let dets = perfect_detections(&eval_record)?;
    for protocol in ["VOC50_11pt", "VOC50_allpt", "COCO_50_95"] {
        let body = json!({"protocol": protocol, "detections": dets, "job_id": id, "checkpoint_step": 200});
        let (s, report) = api.call(Method::POST, "/evaluations", Some(body));
        ensure!(s == 200, "evaluate {protocol}: {s} {report}");
        check_map(&report, protocol)?;
    }
    Ok(())
}

/// The same flow driven entirely through the command line.
pub fn e2e_via_cli(server: &TestServer) -> Result<(), String> {
    let work = tempfile::tempdir().map_err(|e| e.to_string())?;
    let home = work.path().join("home");
    let local = work.path().join("dataset");
    for sub in ["images", "annotations"] {
        std::fs::create_dir_all(local.join(sub)).map_err(|e| e.to_string())?;
    }
    for img in e2e_dataset() {
        std::fs::write(local.join("images").join(&img.filename), &img.png).map_err(|e| e.to_string())?;
        std::fs::write(local.join("annotations").join(img.xml_name()), img.voc_xml()).map_err(|e| e.to_string())?;
    }
    let aug = work.path().join("aug.json");
    std::fs::write(&aug, preprocess_request()["augmentation"].to_string()).map_err(|e| e.to_string())?;
    let cfg = work.path().join("pipeline.config");
    std::fs::write(&cfg, render_config(&e2e_config())).map_err(|e| e.to_string())?;

    let run = |args: &[&str]| -> Result<String, String> {
        let (code, out, err) = cli(&server.base, &home, args);
        ensure!(code == 0, "`detflow {}` exited {code}: {err}", args.join(" "));
        Ok(out)
    };
    let p = |path: &Path| path.to_string_lossy().into_owned();
    run(&["register", "e2e-cli", "--password", PASSWORD])?;
    run(&["login", "e2e-cli", "--password", PASSWORD])?;
    run(&["upload", &p(&local), ""])?;
    let pre = run(&[
        "preprocess",
        "--annotations",
        "annotations",
        "--seed",
        "5",
        "--augmentation",
        &p(&aug),
    ])?;
    check_preprocess(&serde_json::from_str(&pre).map_err(|e| format!("preprocess output: {e}"))?)?;

    let started: Value = serde_json::from_str(&run(&["train", "--config-file", &p(&cfg)])?).map_err(|e| e.to_string())?;
    let id = started["job"]["job_id"].as_str().ok_or("train printed no job id")?.to_string();
    let watched = run(&["watch", &id])?;
    let events: Vec<Value> = watched.lines().map(serde_json::from_str).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    check_events(&events)?;
    let job: Value = serde_json::from_str(&run(&["status", &id])?).map_err(|e| e.to_string())?;
    ensure!(job["state"] == "succeeded", "job ended {}", job["state"]);

    let tar = work.path().join("bundle.tar");
    run(&["export", &id, "--step", "200", "--download", &p(&tar)])?;
    let tar_len = std::fs::metadata(&tar).map_err(|e| e.to_string())?.len();
    ensure!(tar_len > 512, "archive is {tar_len} bytes");

    let record = work.path().join("eval.record");
    run(&["download", "data/eval.record", &p(&record)])?;
    let dets = perfect_detections(&std::fs::read(&record).map_err(|e| e.to_string())?)?;
    let dets_file = work.path().join("dets.json");
    std::fs::write(&dets_file, Value::Array(dets).to_string()).map_err(|e| e.to_string())?;
    for protocol in ["VOC50_11pt", "VOC50_allpt", "COCO_50_95"] {
        let out = run(&[
            "evaluate",
            "--protocol",
            protocol,
            "--detections",
            &p(&dets_file),
            "--job",
            &id,
            "--checkpoint-step",
            "200",
            "--json-output",
        ])?;
        check_map(&serde_json::from_str(&out).map_err(|e| e.to_string())?, protocol)?;
    }
    Ok(())
}

pub fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}
