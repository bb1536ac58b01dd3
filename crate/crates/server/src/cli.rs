//! The `detflow` command line: `serve` runs the HTTP server, every other
//! subcommand is a thin client of the HTTP API.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use reqwest::blocking::{Client, RequestBuilder, Response};
use reqwest::Method;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::api::{router, AppState};
use crate::error::ApiError;
use crate::settings::{ServerSettings, SettingsError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_API: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NETWORK: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "detflow", version, about = "Multi-tenant object-detection training service and client")]
pub struct Cli {
    /// Base URL of the detflow server.
    #[arg(long, global = true, env = "DETFLOW_SERVER", default_value = "http://127.0.0.1:8080")]
    pub server: String,
    /// Bearer token; overrides the cached session.
    #[arg(long, global = true, env = "DETFLOW_TOKEN", hide_env_values = true)]
    pub token: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run the HTTP server.
    Serve {
        /// TOML settings file. DETFLOW_* environment variables override it.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Create an account and its workspace.
    Register {
        display_name: String,
        #[arg(long, env = "DETFLOW_PASSWORD", hide_env_values = true)]
        password: String,
    },
    /// Open a session and cache its token.
    Login {
        display_name: String,
        #[arg(long, env = "DETFLOW_PASSWORD", hide_env_values = true)]
        password: String,
    },
    /// Upload a file, or a directory recursively.
    Upload { local: PathBuf, remote: String },
    /// Download a workspace file.
    Download { remote: String, local: PathBuf },
    /// List workspace files.
    Ls { prefix: Option<String> },
    /// Delete a workspace file.
    Rm { path: String },
    /// Build labelmap and record files from uploaded annotations.
    Preprocess(PreprocessArgs),
    /// List supported model architectures and backbones.
    Catalog,
    /// Create a training job and queue it.
    Train(TrainArgs),
    /// List jobs.
    Jobs,
    /// Show one job.
    Status { job_id: String },
    /// Cancel a queued or running job.
    Cancel { job_id: String },
    /// Print a job's rendered pipeline config.
    Config { job_id: String },
    /// Stream job events until the job finishes.
    Watch {
        job_id: String,
        #[arg(long, default_value_t = 0)]
        from_seq: u64,
    },
    /// Score detections against ground truth.
    Evaluate(EvaluateArgs),
    /// Package a checkpoint as an export bundle.
    Export {
        job_id: String,
        #[arg(long)]
        step: u64,
        /// Also save the bundle as a tar archive.
        #[arg(long)]
        download: Option<PathBuf>,
    },
    /// Draw detections onto a workspace image.
    Render(RenderArgs),
    /// Scheduler queue and leases for your jobs.
    Scheduler,
    /// Deterministic trainer speaking the trainer wire protocol on stdio.
    #[command(hide = true)]
    SimTrainer,
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    /// Full request as a local JSON file; other flags are ignored.
    #[arg(long)]
    pub request: Option<PathBuf>,
    #[arg(long, default_value = "voc_xml", value_parser = ["voc_xml", "csv"])]
    pub format: String,
    /// Workspace annotation files or directories.
    #[arg(long = "annotations", num_args = 1..)]
    pub annotations: Vec<String>,
    #[arg(long, default_value = "images")]
    pub images_dir: String,
    #[arg(long, default_value_t = 0.8)]
    pub split_ratio: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "data")]
    pub output_dir: String,
    /// Augmentation plan as a local JSON file.
    #[arg(long)]
    pub augmentation: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Config in the `key = value` text format.
    #[arg(long, conflicts_with = "json")]
    pub config_file: Option<PathBuf>,
    /// Config as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Create the job without queueing it.
    #[arg(long)]
    pub no_start: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long, default_value = "VOC50_allpt", value_parser = ["VOC50_11pt", "VOC50_allpt", "COCO_50_95"])]
    pub protocol: String,
    /// Local JSON file of detections.
    #[arg(long, conflicts_with = "detections_path")]
    pub detections: Option<PathBuf>,
    /// Workspace JSON file of detections.
    #[arg(long)]
    pub detections_path: Option<String>,
    #[arg(long)]
    pub job: Option<String>,
    #[arg(long, requires = "job")]
    pub checkpoint_step: Option<u64>,
    #[arg(long)]
    pub labelmap: Option<String>,
    #[arg(long)]
    pub eval_record: Option<String>,
    #[arg(long)]
    pub ground_truth: Option<String>,
    /// Print the full JSON report instead of the table.
    #[arg(long)]
    pub json_output: bool,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    /// Workspace image path.
    #[arg(long)]
    pub image: String,
    /// Local JSON file of detections.
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long)]
    pub labelmap: String,
    /// Local PNG to write.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub score_threshold: Option<f64>,
    /// Only draw detections whose image_id matches.
    #[arg(long)]
    pub image_id: Option<String>,
}

#[derive(Debug)]
enum CliError {
    Api(ApiError),
    Network(String),
    Usage(String),
}

impl From<reqwest::Error> for CliError {
    fn from(e: reqwest::Error) -> Self {
        Self::Network(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Serialize, Deserialize)]
struct CachedSession {
    server: String,
    token: String,
}

fn session_file() -> Option<PathBuf> {
    if let Some(home) = std::env::var_os("DETFLOW_HOME") {
        return Some(PathBuf::from(home).join("session.json"));
    }
    std::env::var_os("HOME").map(|h| PathBuf::from(h).join(".detflow").join("session.json"))
}

struct Session {
    base: String,
    token: Option<String>,
    http: Client,
}

impl Session {
    fn new(cli: &Cli) -> CliResult<Self> {
        let base = cli.server.trim_end_matches('/').to_string();
        let token = cli.token.clone().or_else(|| {
            let cached: CachedSession = serde_json::from_slice(&fs::read(session_file()?).ok()?).ok()?;
            (cached.server == base).then_some(cached.token)
        });
        let http = Client::builder().timeout(None).build()?;
        Ok(Self { base, token, http })
    }

    fn request(&self, method: Method, path: &str) -> RequestBuilder {
        let req = self.http.request(method, format!("{}/api{path}", self.base));
        match &self.token {
            Some(t) => req.bearer_auth(t),
            None => req,
        }
    }

    fn send(&self, req: RequestBuilder) -> CliResult<Response> {
        let resp = req.send()?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status();
        let body = resp.bytes()?;
        let mut err: ApiError = serde_json::from_slice(&body).unwrap_or_else(|_| ApiError {
            status: status.as_u16(),
            code: format!("http_{}", status.as_u16()),
            message: String::from_utf8_lossy(&body).into_owned(),
            details: None,
        });
        err.status = status.as_u16();
        Err(CliError::Api(err))
    }

    fn json(&self, req: RequestBuilder) -> CliResult<Value> {
        Ok(self.send(req)?.json()?)
    }
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json value serializes"));
}

fn read_local(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

fn read_local_json(path: &Path) -> CliResult<Value> {
    serde_json::from_slice(&read_local(path)?).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn write_local(path: &Path, bytes: &[u8]) -> CliResult {
    fs::write(path, bytes).map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}

/// Percent-encodes a workspace path for use in a URL, keeping `/`.
fn encode_path(path: &str) -> String {
    let mut out = String::with_capacity(path.len());
    for b in path.bytes() {
        if b.is_ascii_alphanumeric() || b"-._~/".contains(&b) {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

fn local_files(root: &Path) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = fs::read_dir(&dir).map_err(|e| CliError::Usage(format!("cannot list {}: {e}", dir.display())))?;
        for entry in entries {
            let path = entry.map_err(|e| CliError::Usage(e.to_string()))?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn upload(s: &Session, local: &Path, remote: &str) -> CliResult {
    let remote = remote.trim_end_matches('/');
    let pairs = if local.is_dir() {
        local_files(local)?
            .into_iter()
            .map(|p| {
                let rel = p.strip_prefix(local).expect("walked under root");
                let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
                let dest = if remote.is_empty() { rel } else { format!("{remote}/{rel}") };
                (p, dest)
            })
            .collect()
    } else {
        vec![(local.to_path_buf(), remote.to_string())]
    };
    for (path, dest) in pairs {
        let body = read_local(&path)?;
        let stored = s.json(s.request(Method::PUT, &format!("/files/{}", encode_path(&dest))).body(body))?;
        println!("{}\t{}", stored["size_bytes"], dest);
    }
    Ok(())
}

fn preprocess_request(a: &PreprocessArgs) -> CliResult<Value> {
    if let Some(path) = &a.request {
        return read_local_json(path);
    }
    if a.annotations.is_empty() {
        return Err(CliError::Usage("--annotations or --request is required".into()));
    }
    let mut req = json!({
        "format": a.format,
        "annotations": a.annotations,
        "images_dir": a.images_dir,
        "split_ratio": a.split_ratio,
        "seed": a.seed,
        "outputs": {"output_dir": a.output_dir},
    });
    if let Some(path) = &a.augmentation {
        req["augmentation"] = read_local_json(path)?;
    }
    Ok(req)
}

fn train(s: &Session, a: &TrainArgs) -> CliResult {
    let req = match (&a.config_file, &a.json) {
        (Some(path), _) => s
            .request(Method::POST, "/jobs")
            .header(reqwest::header::CONTENT_TYPE, "text/plain; charset=utf-8")
            .body(read_local(path)?),
        (None, Some(path)) => s.request(Method::POST, "/jobs").json(&read_local_json(path)?),
        (None, None) => return Err(CliError::Usage("--config-file or --json is required".into())),
    };
    let job = s.json(req)?;
    if a.no_start {
        print_json(&job);
        return Ok(());
    }
    let id = job["job_id"].as_str().unwrap_or_default().to_string();
    let started = s.json(s.request(Method::POST, &format!("/jobs/{id}/start")))?;
    print_json(&started);
    Ok(())
}

/// Prints each event's JSON line; returns once the server ends the stream.
fn watch(s: &Session, job_id: &str, from_seq: u64) -> CliResult<Option<String>> {
    let resp = s.send(
        s.request(Method::GET, &format!("/jobs/{job_id}/events"))
            .query(&[("from_seq", from_seq)])
            .header(reqwest::header::ACCEPT, "text/event-stream"),
    )?;
    let mut last_state = None;
    let stdout = std::io::stdout();
    for line in BufReader::new(resp).lines() {
        let line = line.map_err(|e| CliError::Network(e.to_string()))?;
        let Some(data) = line.strip_prefix("data:") else { continue };
        let data = data.trim_start();
        if let Ok(ev) = serde_json::from_str::<Value>(data) {
            if ev["type"] == "state" {
                last_state = ev["state"].as_str().map(str::to_string);
            }
        }
        let mut out = stdout.lock();
        let _ = writeln!(out, "{data}");
        let _ = out.flush();
    }
    Ok(last_state)
}

fn evaluate(s: &Session, a: &EvaluateArgs) -> CliResult {
    let mut req = json!({"protocol": a.protocol});
    match (&a.detections, &a.detections_path) {
        (Some(path), _) => req["detections"] = read_local_json(path)?,
        (None, Some(p)) => req["detections_path"] = json!(p),
        (None, None) => return Err(CliError::Usage("--detections or --detections-path is required".into())),
    }
    for (key, value) in [
        ("job_id", &a.job),
        ("labelmap_path", &a.labelmap),
        ("eval_record_path", &a.eval_record),
        ("ground_truth_path", &a.ground_truth),
    ] {
        if let Some(v) = value {
            req[key] = json!(v);
        }
    }
    if let Some(step) = a.checkpoint_step {
        req["checkpoint_step"] = json!(step);
    }
    let report = s.json(s.request(Method::POST, "/evaluations").json(&req))?;
    if a.json_output {
        print_json(&report);
    } else {
        print!("{}", report["table"].as_str().unwrap_or_default());
    }
    Ok(())
}

fn render(s: &Session, a: &RenderArgs) -> CliResult {
    let mut dets = read_local_json(&a.detections)?;
    if let (Some(id), Some(list)) = (&a.image_id, dets.as_array_mut()) {
        list.retain(|d| d["image_id"].as_str() == Some(id.as_str()));
    }
    let mut req = json!({"image_path": a.image, "detections": dets, "labelmap_path": a.labelmap});
    if let Some(t) = a.score_threshold {
        req["spec"] = json!({"score_threshold": t});
    }
    let png = s.send(s.request(Method::POST, "/render").json(&req))?.bytes()?;
    write_local(&a.output, &png)?;
    println!("wrote {}", a.output.display());
    Ok(())
}

fn run_client(cli: &Cli) -> CliResult {
    let s = Session::new(cli)?;
    match &cli.command {
        Command::Serve { .. } | Command::SimTrainer => unreachable!("handled by run"),
        Command::Register { display_name, password } => {
            let body = json!({"display_name": display_name, "password": password});
            print_json(&s.json(s.request(Method::POST, "/accounts").json(&body))?);
        }
        Command::Login { display_name, password } => {
            let body = json!({"display_name": display_name, "password": password});
            let session = s.json(s.request(Method::POST, "/sessions").json(&body))?;
            let token = session["token"].as_str().unwrap_or_default().to_string();
            if let Some(path) = session_file() {
                let cached = CachedSession { server: s.base.clone(), token };
                let saved = path
                    .parent()
                    .map_or(Ok(()), fs::create_dir_all)
                    .and_then(|_| fs::write(&path, serde_json::to_vec(&cached).expect("session serializes")));
                if let Err(e) = saved {
                    eprintln!("warning: could not cache session in {}: {e}", path.display());
                }
            }
            println!("logged in until {}", session["expires_at"].as_str().unwrap_or("?"));
        }
        Command::Upload { local, remote } => upload(&s, local, remote)?,
        Command::Download { remote, local } => {
            let bytes = s.send(s.request(Method::GET, &format!("/files/{}", encode_path(remote))))?.bytes()?;
            write_local(local, &bytes)?;
            println!("{}\t{}", bytes.len(), local.display());
        }
        Command::Ls { prefix } => {
            let mut req = s.request(Method::GET, "/files");
            if let Some(p) = prefix {
                req = req.query(&[("prefix", p)]);
            }
            let files = s.json(req)?;
            for f in files.as_array().into_iter().flatten() {
                println!("{:>12}  {:<9} {}", f["size_bytes"], f["kind"].as_str().unwrap_or(""), f["rel_path"].as_str().unwrap_or(""));
            }
        }
        Command::Rm { path } => {
            s.send(s.request(Method::DELETE, &format!("/files/{}", encode_path(path))))?;
            println!("removed {path}");
        }
        Command::Preprocess(a) => {
            let req = preprocess_request(a)?;
            print_json(&s.json(s.request(Method::POST, "/preprocess").json(&req))?);
        }
        Command::Catalog => {
            for m in s.json(s.request(Method::GET, "/catalog"))?.as_array().into_iter().flatten() {
                println!("{}", m["identifier"].as_str().unwrap_or(""));
            }
        }
        Command::Train(a) => train(&s, a)?,
        Command::Jobs => {
            for j in s.json(s.request(Method::GET, "/jobs"))?.as_array().into_iter().flatten() {
                println!(
                    "{}  {:<9} step {}",
                    j["job_id"].as_str().unwrap_or(""),
                    j["state"].as_str().unwrap_or(""),
                    j["current_step"]
                );
            }
        }
        Command::Status { job_id } => print_json(&s.json(s.request(Method::GET, &format!("/jobs/{job_id}")))?),
        Command::Cancel { job_id } => print_json(&s.json(s.request(Method::POST, &format!("/jobs/{job_id}/cancel")))?),
        Command::Config { job_id } => print!("{}", s.send(s.request(Method::GET, &format!("/jobs/{job_id}/config")))?.text()?),
        Command::Watch { job_id, from_seq } => {
            watch(&s, job_id, *from_seq)?;
        }
        Command::Evaluate(a) => evaluate(&s, a)?,
        Command::Export { job_id, step, download } => {
            let body = json!({"checkpoint_step": step});
            let bundle = s.json(s.request(Method::POST, &format!("/jobs/{job_id}/export")).json(&body))?;
            if let Some(path) = download {
                let id = bundle["export_id"].as_str().unwrap_or_default();
                let tar = s.send(s.request(Method::GET, &format!("/exports/{id}/archive")))?.bytes()?;
                write_local(path, &tar)?;
            }
            print_json(&bundle);
        }
        Command::Render(a) => render(&s, a)?,
        Command::Scheduler => print_json(&s.json(s.request(Method::GET, "/scheduler/status"))?),
    }
    Ok(())
}

pub async fn serve(settings: ServerSettings) -> Result<(), SettingsError> {
    let jobs = settings.open()?;
    jobs.spawn_reaper(Duration::from_secs(1));
    let app = router(AppState::new(jobs), settings.console_dir.as_deref(), settings.max_body_bytes);
    let listener = tokio::net::TcpListener::bind(&settings.listen)
        .await
        .map_err(|e| SettingsError::Startup(format!("cannot listen on {}: {e}", settings.listen)))?;
    let addr = listener.local_addr().map_err(|e| SettingsError::Startup(e.to_string()))?;
    println!("detflow listening on http://{addr}");
    let _ = std::io::stdout().flush();
    tracing::info!(%addr, trainer = ?settings.trainer, gpus = settings.gpu_pool_size, "server started");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| SettingsError::Startup(e.to_string()))
}

fn run_server(config: Option<&Path>) -> i32 {
    let env: HashMap<String, String> = std::env::vars().collect();
    let settings = match ServerSettings::load(config, &env) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let _ = tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .try_init();
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return EXIT_USAGE;
        }
    };
    match runtime.block_on(serve(settings)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
    }
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match &cli.command {
        Command::Serve { config } => return run_server(config.as_deref()),
        Command::SimTrainer => {
            let stdin = std::io::stdin();
            return detflow_core::jobs::serve_stdio(BufReader::new(stdin), std::io::stdout());
        }
        _ => {}
    }
    match run_client(&cli) {
        Ok(()) => EXIT_OK,
        Err(CliError::Api(e)) => {
            eprintln!("error: {} ({}): {}", e.code, e.status, e.message);
            for d in e.details.iter().flatten() {
                eprintln!("  {d}");
            }
            EXIT_API
        }
        Err(CliError::Network(m)) => {
            eprintln!("error: cannot reach {}: {m}", cli.server);
            EXIT_NETWORK
        }
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
    }
}
