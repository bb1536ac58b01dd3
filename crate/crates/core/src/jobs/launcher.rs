use std::collections::BTreeMap;
use std::io::{self, BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

use super::protocol::{TrainerCommand, TrainerEvent};
use super::sim::{run_sim_trainer, SimOptions};
use crate::config::TrainingConfig;

/// Everything a launcher needs to start one training run.
#[derive(Debug, Clone)]
pub struct LaunchRequest {
    pub job_id: String,
    pub config: TrainingConfig,
    /// Rendered config text on disk.
    pub config_path: PathBuf,
    /// Where the trainer writes checkpoint files.
    pub output_dir: PathBuf,
    /// Working directory; workspace-relative paths in the config resolve
    /// against it.
    pub work_dir: PathBuf,
    pub seed: u64,
}

pub trait TrainerControl: Send + Sync {
    /// Asks the trainer to stop.
    fn stop(&self);
    /// Forced termination.
    fn kill(&self);
    /// Waits for the trainer to exit; false on timeout.
    fn wait_exit(&self, timeout: Duration) -> bool;
}

pub type LineStream = Box<dyn Iterator<Item = io::Result<String>> + Send>;

pub struct RunningTrainer {
    /// Trainer output, one protocol line per item. Ends when the trainer
    /// closes its output.
    pub lines: LineStream,
    pub control: Arc<dyn TrainerControl>,
}

pub trait TrainerLauncher: Send + Sync {
    fn name(&self) -> &str;
    fn launch(&self, req: &LaunchRequest) -> Result<RunningTrainer, String>;
}

#[derive(Default)]
struct Exit {
    done: Mutex<bool>,
    cond: Condvar,
}

impl Exit {
    fn mark(&self) {
        *self.done.lock() = true;
        self.cond.notify_all();
    }

    fn wait(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut done = self.done.lock();
        while !*done {
            if self.cond.wait_until(&mut done, deadline).timed_out() {
                return *done;
            }
        }
        true
    }
}

/// Runs the simulated trainer on a thread inside the server. Events still
/// travel as protocol lines so they go through the same parser as a real
/// trainer's output.
#[derive(Debug, Default, Clone, Copy)]
pub struct SimLauncher;

struct SimControl {
    stop: Arc<AtomicBool>,
    killed: Arc<AtomicBool>,
    exit: Arc<Exit>,
}

impl TrainerControl for SimControl {
    fn stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }

    fn kill(&self) {
        self.killed.store(true, Ordering::SeqCst);
        self.stop.store(true, Ordering::SeqCst);
    }

    fn wait_exit(&self, timeout: Duration) -> bool {
        self.exit.wait(timeout)
    }
}

impl TrainerLauncher for SimLauncher {
    fn name(&self) -> &str {
        "sim"
    }

    fn launch(&self, req: &LaunchRequest) -> Result<RunningTrainer, String> {
        let opts = SimOptions::from_extra(req.seed, &req.config.extra)?;
        let (tx, rx) = std::sync::mpsc::channel::<String>();
        let stop = Arc::new(AtomicBool::new(false));
        let killed = Arc::new(AtomicBool::new(false));
        let exit = Arc::new(Exit::default());
        let control = SimControl {
            stop: Arc::clone(&stop),
            killed: Arc::clone(&killed),
            exit: Arc::clone(&exit),
        };
        let config = req.config.clone();
        let output_dir = req.output_dir.clone();
        std::thread::Builder::new()
            .name(format!("sim-{}", req.job_id))
            .spawn(move || {
                let result = run_sim_trainer(&config, &opts, &output_dir, &stop, |ev| {
                    if killed.load(Ordering::SeqCst) {
                        return Err(io::Error::other("killed"));
                    }
                    tx.send(ev.to_line()).map_err(|_| io::Error::other("reader gone"))
                });
                if let Err(e) = result {
                    if !killed.load(Ordering::SeqCst) {
                        let _ = tx.send(
                            TrainerEvent::Errored {
                                message: format!("sim trainer i/o failure: {e}"),
                            }
                            .to_line(),
                        );
                    }
                }
                drop(tx);
                exit.mark();
            })
            .map_err(|e| format!("cannot spawn sim thread: {e}"))?;
        Ok(RunningTrainer {
            lines: Box::new(rx.into_iter().map(Ok)),
            control: Arc::new(control),
        })
    }
}

/// Runs an external program speaking the protocol on stdin/stdout.
#[derive(Debug, Clone)]
pub struct SubprocessLauncher {
    pub program: PathBuf,
    pub args: Vec<String>,
}

struct ProcessControl {
    child: Mutex<Child>,
    stdin: Mutex<Option<ChildStdin>>,
}

impl TrainerControl for ProcessControl {
    fn stop(&self) {
        if let Some(stdin) = self.stdin.lock().as_mut() {
            let _ = writeln!(stdin, "{}", TrainerCommand::Stop.to_line());
            let _ = stdin.flush();
        }
    }

    fn kill(&self) {
        let _ = self.child.lock().kill();
    }

    fn wait_exit(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        loop {
            match self.child.lock().try_wait() {
                Ok(Some(_)) | Err(_) => return true,
                Ok(None) => {}
            }
            if Instant::now() >= deadline {
                return false;
            }
            std::thread::sleep(Duration::from_millis(10));
        }
    }
}

impl TrainerLauncher for SubprocessLauncher {
    fn name(&self) -> &str {
        "subprocess"
    }

    fn launch(&self, req: &LaunchRequest) -> Result<RunningTrainer, String> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .current_dir(&req.work_dir)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| format!("cannot start `{}`: {e}", self.program.display()))?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let stderr = child.stderr.take().expect("piped stderr");

        let start = TrainerCommand::Start {
            config_path: req.config_path.display().to_string(),
            output_dir: req.output_dir.display().to_string(),
            seed: req.seed,
        };
        if let Err(e) = writeln!(stdin, "{}", start.to_line()).and_then(|_| stdin.flush()) {
            let _ = child.kill();
            let _ = child.wait();
            return Err(format!("cannot send start command: {e}"));
        }

        let job_id = req.job_id.clone();
        std::thread::spawn(move || {
            for line in BufReader::new(stderr).lines().map_while(Result::ok) {
                tracing::debug!(job = %job_id, "trainer stderr: {line}");
            }
        });

        Ok(RunningTrainer {
            lines: Box::new(BufReader::new(stdout).lines()),
            control: Arc::new(ProcessControl {
                child: Mutex::new(child),
                stdin: Mutex::new(Some(stdin)),
            }),
        })
    }
}

/// Launchers by name.
#[derive(Default, Clone)]
pub struct LauncherRegistry {
    launchers: BTreeMap<String, Arc<dyn TrainerLauncher>>,
}

impl std::fmt::Debug for LauncherRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.launchers.keys()).finish()
    }
}

impl LauncherRegistry {
    pub fn with_sim() -> Self {
        let mut r = Self::default();
        r.register(Arc::new(SimLauncher));
        r
    }

    pub fn register(&mut self, launcher: Arc<dyn TrainerLauncher>) {
        self.launchers.insert(launcher.name().to_string(), launcher);
    }

    pub fn get(&self, name: &str) -> Option<Arc<dyn TrainerLauncher>> {
        self.launchers.get(name).cloned()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.launchers.keys().map(String::as_str)
    }
}
