//! Server configuration: a TOML file, then `DETFLOW_*` environment
//! overrides.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use detflow_core::jobs::{JobManager, JobSettings, SimLauncher, SubprocessLauncher, TrainerLauncher};
use detflow_core::scheduler::Scheduler;
use detflow_core::workspace::{StoreSettings, WorkspaceStore};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainerKind {
    /// Simulated trainer on a thread inside the server.
    Sim,
    /// External program speaking the line protocol on stdin/stdout.
    Subprocess,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSettings {
    pub listen: String,
    pub gpu_pool_size: usize,
    pub storage_root: PathBuf,
    pub default_quota_bytes: u64,
    pub token_ttl_hours: i64,
    pub hash_iterations: u32,
    pub trainer: TrainerKind,
    /// Program for the subprocess trainer; defaults to this executable
    /// running `sim-trainer`.
    pub trainer_program: Option<PathBuf>,
    pub trainer_args: Vec<String>,
    /// Seconds without trainer output before a lease is forfeited; 0
    /// disables the check.
    pub heartbeat_timeout_secs: u64,
    pub cancel_grace_secs: u64,
    pub max_body_bytes: usize,
    /// Static web console bundle served at `/`.
    pub console_dir: Option<PathBuf>,
}

impl Default for ServerSettings {
    fn default() -> Self {
        let store = StoreSettings::default();
        Self {
            listen: "127.0.0.1:8080".into(),
            gpu_pool_size: 1,
            storage_root: PathBuf::from("detflow-data"),
            default_quota_bytes: store.default_quota_bytes,
            token_ttl_hours: 24,
            hash_iterations: store.hash_iterations,
            trainer: TrainerKind::Sim,
            trainer_program: None,
            trainer_args: Vec::new(),
            heartbeat_timeout_secs: 300,
            cancel_grace_secs: 10,
            max_body_bytes: 1 << 30,
            console_dir: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SettingsError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("environment variable {name}: {message}")]
    Env { name: String, message: String },
    #[error("{0}")]
    Startup(String),
}

fn env_value<T: std::str::FromStr>(env: &HashMap<String, String>, name: &str) -> Result<Option<T>, SettingsError>
where
    T::Err: std::fmt::Display,
{
    match env.get(name) {
        None => Ok(None),
        Some(raw) => raw.trim().parse().map(Some).map_err(|e: T::Err| SettingsError::Env {
            name: name.into(),
            message: e.to_string(),
        }),
    }
}

impl ServerSettings {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, SettingsError> {
        toml::from_str(text).map_err(|e| SettingsError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Reads `path` (if any), then applies overrides from `env`.
    pub fn load(path: Option<&Path>, env: &HashMap<String, String>) -> Result<Self, SettingsError> {
        let mut s = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| SettingsError::Read {
                    path: p.to_path_buf(),
                    source,
                })?;
                Self::from_toml(&text, p)?
            }
            None => Self::default(),
        };
        s.apply_env(env)?;
        Ok(s)
    }

    pub fn apply_env(&mut self, env: &HashMap<String, String>) -> Result<(), SettingsError> {
        if let Some(v) = env.get("DETFLOW_LISTEN") {
            self.listen = v.clone();
        }
        if let Some(v) = env_value(env, "DETFLOW_GPU_POOL_SIZE")? {
            self.gpu_pool_size = v;
        }
        if let Some(v) = env.get("DETFLOW_STORAGE_ROOT") {
            self.storage_root = PathBuf::from(v);
        }
        if let Some(v) = env_value(env, "DETFLOW_DEFAULT_QUOTA_BYTES")? {
            self.default_quota_bytes = v;
        }
        if let Some(v) = env_value(env, "DETFLOW_TOKEN_TTL_HOURS")? {
            self.token_ttl_hours = v;
        }
        if let Some(v) = env_value(env, "DETFLOW_HASH_ITERATIONS")? {
            self.hash_iterations = v;
        }
        if let Some(v) = env.get("DETFLOW_TRAINER") {
            self.trainer = match v.as_str() {
                "sim" => TrainerKind::Sim,
                "subprocess" => TrainerKind::Subprocess,
                other => {
                    return Err(SettingsError::Env {
                        name: "DETFLOW_TRAINER".into(),
                        message: format!("unknown trainer `{other}`; expected sim or subprocess"),
                    })
                }
            };
        }
        if let Some(v) = env.get("DETFLOW_TRAINER_PROGRAM") {
            self.trainer_program = Some(PathBuf::from(v));
        }
        if let Some(v) = env_value(env, "DETFLOW_HEARTBEAT_TIMEOUT_SECS")? {
            self.heartbeat_timeout_secs = v;
        }
        if let Some(v) = env_value(env, "DETFLOW_CANCEL_GRACE_SECS")? {
            self.cancel_grace_secs = v;
        }
        if let Some(v) = env_value(env, "DETFLOW_MAX_BODY_BYTES")? {
            self.max_body_bytes = v;
        }
        if let Some(v) = env.get("DETFLOW_CONSOLE_DIR") {
            self.console_dir = Some(PathBuf::from(v));
        }
        Ok(())
    }

    pub fn launcher(&self) -> Result<Arc<dyn TrainerLauncher>, SettingsError> {
        Ok(match self.trainer {
            TrainerKind::Sim => Arc::new(SimLauncher),
            TrainerKind::Subprocess => {
                let (program, args) = match &self.trainer_program {
                    Some(p) => (p.clone(), self.trainer_args.clone()),
                    None => (
                        std::env::current_exe().map_err(|e| SettingsError::Startup(format!("cannot locate own executable: {e}")))?,
                        vec!["sim-trainer".to_string()],
                    ),
                };
                Arc::new(SubprocessLauncher { program, args })
            }
        })
    }

    /// Opens the store and job manager described by these settings.
    pub fn open(&self) -> Result<JobManager, SettingsError> {
        let store = WorkspaceStore::open(
            &self.storage_root,
            StoreSettings {
                default_quota_bytes: self.default_quota_bytes,
                token_ttl: chrono::Duration::hours(self.token_ttl_hours),
                hash_iterations: self.hash_iterations,
            },
        )
        .map_err(|e| SettingsError::Startup(format!("cannot open storage at {}: {e}", self.storage_root.display())))?;
        let scheduler = Scheduler::with_pool_size(self.gpu_pool_size).map_err(|e| SettingsError::Startup(e.to_string()))?;
        let job_settings = JobSettings {
            cancel_grace: Duration::from_secs(self.cancel_grace_secs),
            heartbeat_timeout: (self.heartbeat_timeout_secs > 0).then(|| chrono::Duration::seconds(self.heartbeat_timeout_secs as i64)),
        };
        JobManager::open(Arc::new(store), scheduler, self.launcher()?, job_settings)
            .map_err(|e| SettingsError::Startup(format!("cannot open job manager: {e}")))
    }
}
