//! Training jobs: the lifecycle state machine, event handling, trainer
//! launch and event streaming.

mod event_log;
mod launcher;
mod protocol;
mod sim;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Weak};
use std::time::Duration;

use chrono::{DateTime, Utc};
use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};

pub use event_log::{EventLog, Follow, JobEvent, JobEventBody};
pub use launcher::{
    LaunchRequest, LauncherRegistry, LineStream, RunningTrainer, SimLauncher, SubprocessLauncher, TrainerControl,
    TrainerLauncher,
};
pub use protocol::{parse_trainer_line, LogLevel, TrainerCommand, TrainerEvent, EXITED_WITHOUT_TERMINAL};
pub use sim::{
    checkpoint_name, checkpoint_payload, run_sim_trainer, seed_from_extra, serve_stdio, sim_loss, sim_trainer_run,
    SimOptions, L0, L_INF,
};

use crate::clock::Clock;
use crate::config::{parse_config, render_config, validate, ConfigEnvironment, FieldError, TrainingConfig};
use crate::ingest::parse_labelmap_text;
use crate::scheduler::{Lease, QueueEntry, Scheduler, SchedulerEvent, SchedulerStatus};
use crate::workspace::{normalize_rel_path, write_atomic, FileKind, WorkspaceError, WorkspaceId, WorkspaceStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Created,
    Queued,
    Running,
    Succeeded,
    Failed,
    Cancelled,
}

impl JobState {
    pub const ALL: [JobState; 6] = [
        Self::Created,
        Self::Queued,
        Self::Running,
        Self::Succeeded,
        Self::Failed,
        Self::Cancelled,
    ];

    pub fn can_transition_to(self, to: JobState) -> bool {
        use JobState::*;
        matches!(
            (self, to),
            (Created, Queued) | (Queued, Running) | (Queued, Cancelled) | (Running, Succeeded) | (Running, Failed) | (Running, Cancelled)
        )
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Succeeded | Self::Failed | Self::Cancelled)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Created => "created",
            Self::Queued => "queued",
            Self::Running => "running",
            Self::Succeeded => "succeeded",
            Self::Failed => "failed",
            Self::Cancelled => "cancelled",
        }
    }
}

impl std::fmt::Display for JobState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: u64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub step: u64,
    /// Workspace-relative location of the imported file.
    pub rel_path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingJob {
    pub job_id: String,
    pub workspace_id: WorkspaceId,
    pub config: TrainingConfig,
    pub seed: u64,
    pub state: JobState,
    pub current_step: u64,
    pub loss_history: Vec<LossPoint>,
    pub checkpoints: Vec<CheckpointRecord>,
    pub created_at: DateTime<Utc>,
    pub queued_at: Option<DateTime<Utc>>,
    pub started_at: Option<DateTime<Utc>>,
    pub finished_at: Option<DateTime<Utc>>,
    pub gpu_id: Option<String>,
    pub lease_id: Option<String>,
    pub error: Option<String>,
}

impl TrainingJob {
    fn transition(&mut self, to: JobState) -> Result<(), JobError> {
        if !self.state.can_transition_to(to) {
            return Err(JobError::State {
                job_id: self.job_id.clone(),
                current: self.state,
                attempted: to,
            });
        }
        self.state = to;
        Ok(())
    }

    pub fn checkpoint_at(&self, step: u64) -> Option<&CheckpointRecord> {
        self.checkpoints.iter().find(|c| c.step == step)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum JobError {
    #[error("job `{0}` not found")]
    NotFound(String),
    #[error("job `{job_id}` is {current}; cannot move to {attempted}")]
    State {
        job_id: String,
        current: JobState,
        attempted: JobState,
    },
    #[error("invalid training config: {}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<FieldError>),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("trainer launch failed: {0}")]
    Launch(String),
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct JobSettings {
    /// How long a running trainer gets to exit after a stop request.
    pub cancel_grace: Duration,
    /// A lease with no trainer output for this long is forfeited.
    pub heartbeat_timeout: Option<chrono::Duration>,
}

impl Default for JobSettings {
    fn default() -> Self {
        Self {
            cancel_grace: Duration::from_secs(10),
            heartbeat_timeout: Some(chrono::Duration::seconds(300)),
        }
    }
}

struct WorkspaceEnv<'a> {
    store: &'a WorkspaceStore,
    ws: &'a WorkspaceId,
}

impl ConfigEnvironment for WorkspaceEnv<'_> {
    fn file_exists(&self, rel_path: &str) -> bool {
        self.store.exists(self.ws, rel_path)
    }

    fn labelmap_len(&self, rel_path: &str) -> Option<usize> {
        let bytes = self.store.get_file(self.ws, rel_path).ok()?;
        let text = String::from_utf8(bytes).ok()?;
        parse_labelmap_text(&text).ok().map(|lm| lm.len())
    }
}

#[derive(Default)]
struct Flag {
    set: Mutex<bool>,
    cond: Condvar,
}

impl Flag {
    fn raise(&self) {
        *self.set.lock() = true;
        self.cond.notify_all();
    }

    fn wait(&self, timeout: Duration) -> bool {
        let deadline = std::time::Instant::now() + timeout;
        let mut set = self.set.lock();
        while !*set {
            if self.cond.wait_until(&mut set, deadline).timed_out() {
                return *set;
            }
        }
        true
    }
}

struct JobSlot {
    job: Mutex<TrainingJob>,
    log: Arc<EventLog>,
    dir: PathBuf,
    control: Mutex<Option<Arc<dyn TrainerControl>>>,
    cancel_requested: AtomicBool,
    reader_done: Flag,
    export_lock: Mutex<()>,
}

struct Inner {
    store: Arc<WorkspaceStore>,
    clock: Arc<dyn Clock>,
    scheduler: Mutex<Scheduler>,
    jobs: RwLock<HashMap<String, Arc<JobSlot>>>,
    launcher: Arc<dyn TrainerLauncher>,
    settings: JobSettings,
    dir: PathBuf,
}

/// Owns every job, the scheduler and the trainers.
///
/// Lock order: scheduler before any job; a job lock is never held while
/// taking the scheduler lock.
#[derive(Clone)]
pub struct JobManager {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for JobManager {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("JobManager")
            .field("jobs", &self.inner.jobs.read().len())
            .field("launcher", &self.inner.launcher.name())
            .finish()
    }
}

fn persist(slot_dir: &Path, job: &TrainingJob) -> Result<(), JobError> {
    let bytes = serde_json::to_vec_pretty(job).expect("job serializes");
    write_atomic(&slot_dir.join("job.json"), &bytes)?;
    Ok(())
}

fn append(log: &EventLog, body: JobEventBody) {
    if let Err(e) = log.append(body) {
        tracing::error!("cannot persist job event: {e}");
    }
}

impl JobManager {
    /// Opens the job directory under the store root, reloading any jobs
    /// from a previous run. Jobs that were running are failed; queued jobs
    /// are queued again in their original order.
    pub fn open(
        store: Arc<WorkspaceStore>,
        scheduler: Scheduler,
        launcher: Arc<dyn TrainerLauncher>,
        settings: JobSettings,
    ) -> Result<Self, JobError> {
        let dir = store.root().join("jobs");
        std::fs::create_dir_all(&dir)?;
        let clock = Arc::clone(store.clock());
        let scheduler = scheduler.with_heartbeat_timeout(settings.heartbeat_timeout);
        let mgr = Self {
            inner: Arc::new(Inner {
                store,
                clock,
                scheduler: Mutex::new(scheduler),
                jobs: RwLock::new(HashMap::new()),
                launcher,
                settings,
                dir,
            }),
        };
        mgr.reload()?;
        Ok(mgr)
    }

    fn reload(&self) -> Result<(), JobError> {
        let mut requeue = Vec::new();
        for entry in std::fs::read_dir(&self.inner.dir)? {
            let dir = entry?.path();
            let Ok(bytes) = std::fs::read(dir.join("job.json")) else {
                continue;
            };
            let mut job: TrainingJob = serde_json::from_slice(&bytes)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{}: {e}", dir.display())))?;
            let log = Arc::new(EventLog::open(&dir.join("events.jsonl"))?);
            match job.state {
                JobState::Running => {
                    job.state = JobState::Failed;
                    job.error = Some("interrupted by server restart".into());
                    job.finished_at = Some(self.inner.clock.now());
                    job.lease_id = None;
                    append(&log, JobEventBody::Error { message: "interrupted by server restart".into() });
                    append(&log, JobEventBody::State { state: JobState::Failed });
                    persist(&dir, &job)?;
                }
                JobState::Queued => requeue.push((job.queued_at, job.job_id.clone())),
                _ => {}
            }
            if job.state.is_terminal() {
                log.close();
            }
            let slot = Arc::new(JobSlot {
                job: Mutex::new(job),
                log,
                dir,
                control: Mutex::new(None),
                cancel_requested: AtomicBool::new(false),
                reader_done: Flag::default(),
                export_lock: Mutex::new(()),
            });
            let id = slot.job.lock().job_id.clone();
            self.inner.jobs.write().insert(id, slot);
        }
        requeue.sort();
        let mut to_launch = Vec::new();
        {
            let mut sched = self.inner.scheduler.lock();
            for (_, id) in requeue {
                let sub = sched.submit(&id, self.inner.clock.now()).expect("fresh scheduler");
                to_launch.extend(self.mark_granted(&mut sched, sub.granted));
            }
        }
        self.launch_all(to_launch);
        Ok(())
    }

    pub fn store(&self) -> &Arc<WorkspaceStore> {
        &self.inner.store
    }

    pub fn launcher_name(&self) -> &str {
        self.inner.launcher.name()
    }

    fn slot_any(&self, job_id: &str) -> Result<Arc<JobSlot>, JobError> {
        self.inner
            .jobs
            .read()
            .get(job_id)
            .cloned()
            .ok_or_else(|| JobError::NotFound(job_id.into()))
    }

    /// Jobs of other workspaces are reported as missing.
    fn slot(&self, ws: &WorkspaceId, job_id: &str) -> Result<Arc<JobSlot>, JobError> {
        let slot = self.slot_any(job_id)?;
        if &slot.job.lock().workspace_id != ws {
            return Err(JobError::NotFound(job_id.into()));
        }
        Ok(slot)
    }

    pub fn create_job(&self, ws: &WorkspaceId, config: TrainingConfig) -> Result<TrainingJob, JobError> {
        let store = &self.inner.store;
        store.workspace(ws)?;
        validate(
            &config,
            &WorkspaceEnv { store, ws },
        )
        .map_err(|e| JobError::Invalid(e.field_errors().to_vec()))?;
        let seed = seed_from_extra(&config.extra).map_err(|m| {
            JobError::Invalid(vec![FieldError {
                field: "extra.seed".into(),
                message: m,
            }])
        })?;
        if self.inner.launcher.name() == "sim" {
            SimOptions::from_extra(seed, &config.extra).map_err(|m| {
                JobError::Invalid(vec![FieldError {
                    field: "extra".into(),
                    message: m,
                }])
            })?;
        }

        let job_id = uuid::Uuid::new_v4().simple().to_string();
        let dir = self.inner.dir.join(&job_id);
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("pipeline.config"), render_config(&config))?;
        let job = TrainingJob {
            job_id: job_id.clone(),
            workspace_id: ws.clone(),
            config,
            seed,
            state: JobState::Created,
            current_step: 0,
            loss_history: Vec::new(),
            checkpoints: Vec::new(),
            created_at: self.inner.clock.now(),
            queued_at: None,
            started_at: None,
            finished_at: None,
            gpu_id: None,
            lease_id: None,
            error: None,
        };
        persist(&dir, &job)?;
        let log = Arc::new(EventLog::open(&dir.join("events.jsonl"))?);
        append(&log, JobEventBody::State { state: JobState::Created });
        let slot = Arc::new(JobSlot {
            job: Mutex::new(job.clone()),
            log,
            dir,
            control: Mutex::new(None),
            cancel_requested: AtomicBool::new(false),
            reader_done: Flag::default(),
            export_lock: Mutex::new(()),
        });
        self.inner.jobs.write().insert(job_id, slot);
        Ok(job)
    }

    pub fn get_job(&self, ws: &WorkspaceId, job_id: &str) -> Result<TrainingJob, JobError> {
        Ok(self.slot(ws, job_id)?.job.lock().clone())
    }

    pub fn list_jobs(&self, ws: &WorkspaceId) -> Vec<TrainingJob> {
        let mut jobs: Vec<TrainingJob> = self
            .inner
            .jobs
            .read()
            .values()
            .map(|s| s.job.lock().clone())
            .filter(|j| &j.workspace_id == ws)
            .collect();
        jobs.sort_by(|a, b| (a.created_at, &a.job_id).cmp(&(b.created_at, &b.job_id)));
        jobs
    }

    pub fn start_job(&self, ws: &WorkspaceId, job_id: &str) -> Result<(TrainingJob, QueueEntry), JobError> {
        let slot = self.slot(ws, job_id)?;
        let now = self.inner.clock.now();
        let (entry, to_launch) = {
            let mut sched = self.inner.scheduler.lock();
            {
                let mut job = slot.job.lock();
                job.transition(JobState::Queued)?;
                job.queued_at = Some(now);
                persist(&slot.dir, &job)?;
                append(&slot.log, JobEventBody::State { state: JobState::Queued });
            }
            let sub = sched
                .submit(job_id, now)
                .map_err(|e| JobError::Protocol(e.to_string()))?;
            (sub.entry, self.mark_granted(&mut sched, sub.granted))
        };
        self.launch_all(to_launch);
        let job = slot.job.lock().clone();
        Ok((job, entry))
    }

    /// Moves freshly leased jobs to Running. Called with the scheduler
    /// locked; returns the slots that now need a trainer.
    fn mark_granted(&self, sched: &mut Scheduler, granted: Vec<Lease>) -> Vec<Arc<JobSlot>> {
        let mut pending = granted;
        let mut out = Vec::new();
        while let Some(lease) = pending.pop() {
            let slot = self.inner.jobs.read().get(&lease.job_id).cloned();
            let accepted = slot.as_ref().is_some_and(|slot| {
                let mut job = slot.job.lock();
                if job.transition(JobState::Running).is_err() {
                    return false;
                }
                job.started_at = Some(lease.acquired_at);
                job.gpu_id = Some(lease.gpu_id.clone());
                job.lease_id = Some(lease.lease_id.clone());
                if let Err(e) = persist(&slot.dir, &job) {
                    tracing::error!(job = %job.job_id, "cannot persist job: {e}");
                }
                append(&slot.log, JobEventBody::State { state: JobState::Running });
                true
            });
            if accepted {
                out.push(slot.expect("accepted slot"));
            } else {
                tracing::error!(job = %lease.job_id, "lease granted to a job that is not queued");
                if let Ok(more) = sched.release(&lease.lease_id, self.inner.clock.now()) {
                    pending.extend(more);
                }
            }
        }
        // grants were popped from the back; launch in grant order
        out.reverse();
        out
    }

    fn launch_all(&self, slots: Vec<Arc<JobSlot>>) {
        for slot in slots {
            self.launch(slot);
        }
    }

    fn launch(&self, slot: Arc<JobSlot>) {
        let req = {
            let job = slot.job.lock();
            LaunchRequest {
                job_id: job.job_id.clone(),
                config: job.config.clone(),
                config_path: slot.dir.join("pipeline.config"),
                output_dir: slot.dir.join("output"),
                work_dir: self.inner.store.files_dir(&job.workspace_id),
                seed: job.seed,
            }
        };
        let started = std::fs::create_dir_all(&req.output_dir)
            .and_then(|_| std::fs::create_dir_all(&req.work_dir))
            .map_err(|e| e.to_string())
            .and_then(|_| self.inner.launcher.launch(&req));
        let running = match started {
            Ok(r) => r,
            Err(e) => {
                slot.reader_done.raise();
                let message = format!("trainer launch failed: {e}");
                let _ = self.finish(&slot, JobState::Failed, Some(message), true);
                return;
            }
        };
        let control = Arc::clone(&running.control);
        *slot.control.lock() = Some(Arc::clone(&control));
        if slot.cancel_requested.load(Ordering::SeqCst) || slot.job.lock().state.is_terminal() {
            control.stop();
        }
        let weak = Arc::downgrade(&self.inner);
        let thread_slot = Arc::clone(&slot);
        let spawned = std::thread::Builder::new()
            .name(format!("job-{}", req.job_id))
            .spawn(move || read_trainer(weak, thread_slot, running.lines, control));
        if let Err(e) = spawned {
            slot.reader_done.raise();
            if let Some(c) = slot.control.lock().as_ref() {
                c.kill();
            }
            let _ = self.finish(&slot, JobState::Failed, Some(format!("cannot spawn reader: {e}")), true);
        }
    }

    /// Applies one trainer event to a running job.
    pub fn handle_event(&self, job_id: &str, ev: TrainerEvent) -> Result<TrainingJob, JobError> {
        let slot = self.slot_any(job_id)?;
        self.apply_event(&slot, ev)
    }

    fn apply_event(&self, slot: &Arc<JobSlot>, ev: TrainerEvent) -> Result<TrainingJob, JobError> {
        let lease_id = slot.job.lock().lease_id.clone();
        if let Some(lease_id) = lease_id {
            let _ = self.inner.scheduler.lock().heartbeat(&lease_id, self.inner.clock.now());
        }

        let mut job = slot.job.lock();
        if job.state != JobState::Running {
            return Err(JobError::Protocol(format!(
                "job `{}` is {}, not running; event ignored",
                job.job_id, job.state
            )));
        }
        let num_steps = job.config.hp.num_steps;
        match ev {
            TrainerEvent::Progress { step, loss } => {
                if step > num_steps {
                    return Err(JobError::Protocol(format!("progress step {step} beyond num_steps {num_steps}")));
                }
                if job.loss_history.last().is_some_and(|p| step <= p.step) {
                    return Err(JobError::Protocol(format!("progress step {step} does not advance")));
                }
                if !loss.is_finite() {
                    return Err(JobError::Protocol(format!("non-finite loss at step {step}")));
                }
                job.current_step = step;
                job.loss_history.push(LossPoint { step, loss });
                persist(&slot.dir, &job)?;
                append(&slot.log, JobEventBody::Progress { step, loss });
            }
            TrainerEvent::Checkpoint { step, path } => {
                if let Err(e) = self.import_checkpoint(slot, &mut job, step, &path) {
                    append(
                        &slot.log,
                        JobEventBody::Log {
                            level: LogLevel::Warn,
                            message: format!("checkpoint at step {step} not imported: {e}"),
                        },
                    );
                    return Err(e);
                }
                persist(&slot.dir, &job)?;
                append(&slot.log, JobEventBody::Checkpoint { step, path });
            }
            TrainerEvent::Log { level, message } => {
                append(&slot.log, JobEventBody::Log { level, message });
            }
            TrainerEvent::Completed { final_step } => {
                if final_step > num_steps {
                    return Err(JobError::Protocol(format!("final step {final_step} beyond num_steps {num_steps}")));
                }
                append(&slot.log, JobEventBody::Completed { final_step });
                if slot.cancel_requested.load(Ordering::SeqCst) {
                    return Ok(job.clone());
                }
                job.current_step = job.current_step.max(final_step);
                drop(job);
                return self.finish(slot, JobState::Succeeded, None, true);
            }
            TrainerEvent::Errored { message } => {
                append(&slot.log, JobEventBody::Error { message: message.clone() });
                if slot.cancel_requested.load(Ordering::SeqCst) {
                    return Ok(job.clone());
                }
                drop(job);
                return self.finish(slot, JobState::Failed, Some(message), true);
            }
        }
        Ok(job.clone())
    }

    fn import_checkpoint(&self, slot: &JobSlot, job: &mut TrainingJob, step: u64, path: &str) -> Result<(), JobError> {
        let num_steps = job.config.hp.num_steps;
        if step > num_steps {
            return Err(JobError::Protocol(format!("checkpoint step {step} beyond num_steps {num_steps}")));
        }
        let rel = normalize_rel_path(path).map_err(|e| JobError::Protocol(format!("checkpoint path: {e}")))?;
        let bytes = std::fs::read(slot.dir.join("output").join(&rel))
            .map_err(|e| JobError::Protocol(format!("cannot read checkpoint `{rel}`: {e}")))?;
        let dest = format!("jobs/{}/checkpoints/{rel}", job.job_id);
        self.inner
            .store
            .put_file(&job.workspace_id, &dest, &bytes, Some(FileKind::Checkpoint))?;
        job.checkpoints.retain(|c| c.step != step);
        job.checkpoints.push(CheckpointRecord { step, rel_path: dest });
        job.checkpoints.sort_by_key(|c| c.step);
        Ok(())
    }

    /// Terminal transition. Releases the job's lease (at most once, since
    /// the lease id is taken from the job) when `release` is set.
    fn finish(
        &self,
        slot: &Arc<JobSlot>,
        to: JobState,
        error: Option<String>,
        release: bool,
    ) -> Result<TrainingJob, JobError> {
        let (job, lease) = {
            let mut job = slot.job.lock();
            job.transition(to)?;
            job.finished_at = Some(self.inner.clock.now());
            if error.is_some() {
                job.error = error;
            }
            let lease = job.lease_id.take();
            persist(&slot.dir, &job)?;
            append(&slot.log, JobEventBody::State { state: to });
            slot.log.close();
            (job.clone(), lease)
        };
        if let (true, Some(lease)) = (release, lease) {
            let to_launch = {
                let mut sched = self.inner.scheduler.lock();
                match sched.release(&lease, self.inner.clock.now()) {
                    Ok(granted) => self.mark_granted(&mut sched, granted),
                    Err(e) => {
                        tracing::error!(job = %job.job_id, "lease release failed: {e}");
                        Vec::new()
                    }
                }
            };
            self.launch_all(to_launch);
        }
        Ok(job)
    }

    /// Cancels a queued or running job. A running trainer is asked to stop
    /// and is killed if it has not exited within the grace period.
    pub fn cancel_job(&self, ws: &WorkspaceId, job_id: &str) -> Result<TrainingJob, JobError> {
        let slot = self.slot(ws, job_id)?;
        {
            let mut sched = self.inner.scheduler.lock();
            let mut job = slot.job.lock();
            match job.state {
                JobState::Queued => {
                    job.transition(JobState::Cancelled)?;
                    sched
                        .cancel_queued(job_id)
                        .map_err(|e| JobError::Protocol(e.to_string()))?;
                    job.finished_at = Some(self.inner.clock.now());
                    persist(&slot.dir, &job)?;
                    append(&slot.log, JobEventBody::State { state: JobState::Cancelled });
                    slot.log.close();
                    return Ok(job.clone());
                }
                JobState::Running => {
                    if slot.cancel_requested.swap(true, Ordering::SeqCst) {
                        return Err(JobError::State {
                            job_id: job_id.into(),
                            current: job.state,
                            attempted: JobState::Cancelled,
                        });
                    }
                }
                current => {
                    return Err(JobError::State {
                        job_id: job_id.into(),
                        current,
                        attempted: JobState::Cancelled,
                    })
                }
            }
        }
        let control = slot.control.lock().clone();
        if let Some(control) = control {
            control.stop();
            if !slot.reader_done.wait(self.inner.settings.cancel_grace) {
                tracing::warn!(job = %job_id, "trainer ignored stop; killing");
                control.kill();
                slot.reader_done.wait(Duration::from_secs(5));
            }
        }
        self.finish(&slot, JobState::Cancelled, None, true)
    }

    /// Forfeits overdue leases, failing their jobs.
    pub fn reap_expired(&self) -> Vec<String> {
        let mut failed = Vec::new();
        let mut to_kill = Vec::new();
        let to_launch = {
            let mut sched = self.inner.scheduler.lock();
            let (expired, granted) = sched.reap_expired(self.inner.clock.now());
            for lease in expired {
                let Ok(slot) = self.slot_any(&lease.job_id) else { continue };
                let mut job = slot.job.lock();
                if job.lease_id.as_deref() != Some(lease.lease_id.as_str()) || job.transition(JobState::Failed).is_err() {
                    continue;
                }
                job.lease_id = None;
                job.finished_at = Some(self.inner.clock.now());
                job.error = Some("lease forfeited: trainer stopped sending heartbeats".into());
                let _ = persist(&slot.dir, &job);
                append(
                    &slot.log,
                    JobEventBody::Error {
                        message: job.error.clone().unwrap_or_default(),
                    },
                );
                append(&slot.log, JobEventBody::State { state: JobState::Failed });
                slot.log.close();
                failed.push(job.job_id.clone());
                let control = slot.control.lock().clone();
                to_kill.extend(control);
            }
            self.mark_granted(&mut sched, granted)
        };
        for c in to_kill {
            c.kill();
        }
        self.launch_all(to_launch);
        failed
    }

    /// Runs [`Self::reap_expired`] every `interval` until the manager is
    /// dropped.
    pub fn spawn_reaper(&self, interval: Duration) {
        let weak = Arc::downgrade(&self.inner);
        std::thread::spawn(move || loop {
            std::thread::sleep(interval);
            let Some(inner) = weak.upgrade() else { break };
            JobManager { inner }.reap_expired();
        });
    }

    pub fn events(&self, ws: &WorkspaceId, job_id: &str) -> Result<Arc<EventLog>, JobError> {
        Ok(Arc::clone(&self.slot(ws, job_id)?.log))
    }

    /// Blocks until the job reaches a terminal state or `timeout` passes.
    pub fn wait_terminal(&self, ws: &WorkspaceId, job_id: &str, timeout: Duration) -> Result<TrainingJob, JobError> {
        let slot = self.slot(ws, job_id)?;
        let deadline = std::time::Instant::now() + timeout;
        loop {
            let job = slot.job.lock().clone();
            let now = std::time::Instant::now();
            if job.state.is_terminal() || now >= deadline {
                return Ok(job);
            }
            slot.log.wait_beyond(slot.log.len() as u64, deadline - now);
        }
    }

    /// Runs `f` with the job's export lock held.
    pub fn with_export_lock<T>(
        &self,
        ws: &WorkspaceId,
        job_id: &str,
        f: impl FnOnce(&TrainingJob) -> T,
    ) -> Result<T, JobError> {
        let slot = self.slot(ws, job_id)?;
        let _guard = slot.export_lock.lock();
        let job = slot.job.lock().clone();
        Ok(f(&job))
    }

    /// The config text as handed to the trainer.
    pub fn rendered_config(&self, ws: &WorkspaceId, job_id: &str) -> Result<String, JobError> {
        let slot = self.slot(ws, job_id)?;
        let text = std::fs::read_to_string(slot.dir.join("pipeline.config"))?;
        debug_assert!(parse_config(&text).is_ok());
        Ok(text)
    }

    pub fn scheduler_status(&self) -> SchedulerStatus {
        self.inner.scheduler.lock().status()
    }

    pub fn scheduler_history(&self) -> Vec<SchedulerEvent> {
        self.inner.scheduler.lock().history().to_vec()
    }
}

fn read_trainer(inner: Weak<Inner>, slot: Arc<JobSlot>, lines: LineStream, control: Arc<dyn TrainerControl>) {
    for line in lines {
        let Some(inner) = inner.upgrade() else { break };
        let mgr = JobManager { inner };
        let ev = match line {
            Ok(line) if line.trim().is_empty() => continue,
            Ok(line) => parse_trainer_line(&line),
            Err(e) => TrainerEvent::warn(format!("unreadable trainer output: {e}")),
        };
        if let Err(e) = mgr.apply_event(&slot, ev) {
            tracing::warn!(job = %slot.job.lock().job_id, "{e}");
        }
    }
    if !control.wait_exit(Duration::from_secs(5)) {
        control.kill();
        control.wait_exit(Duration::from_secs(5));
    }
    slot.reader_done.raise();
    let Some(inner) = inner.upgrade() else { return };
    let mgr = JobManager { inner };
    let running = slot.job.lock().state == JobState::Running;
    if running && !slot.cancel_requested.load(Ordering::SeqCst) {
        append(
            &slot.log,
            JobEventBody::Error {
                message: EXITED_WITHOUT_TERMINAL.into(),
            },
        );
        let _ = mgr.finish(&slot, JobState::Failed, Some(EXITED_WITHOUT_TERMINAL.into()), true);
    }
}
