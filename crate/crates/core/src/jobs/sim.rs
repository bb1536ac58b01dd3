//! Deterministic stand-in trainer.
//!
//! Loss follows `l_inf + (l0 - l_inf) * exp(-step / tau) + noise * eps`
//! where `eps` is uniform in [-1, 1], drawn from a ChaCha8 generator keyed
//! by (seed, step) so any single step can be recomputed on its own.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::protocol::{TrainerCommand, TrainerEvent};
use crate::config::{parse_config, TrainingConfig};

pub const L0: f64 = 10.0;
pub const L_INF: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct SimOptions {
    pub seed: u64,
    pub noise_amp: f64,
    /// Emit an error event on reaching this step.
    pub fail_at_step: Option<u64>,
    /// Stop producing output at this step without any terminal event.
    pub crash_at_step: Option<u64>,
    /// Sleep after every progress event.
    pub step_delay: Duration,
}

impl SimOptions {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            noise_amp: 0.0,
            fail_at_step: None,
            crash_at_step: None,
            step_delay: Duration::ZERO,
        }
    }

    /// Reads `sim.noise_amp`, `sim.fail_at_step`, `sim.crash_at_step` and
    /// `sim.step_delay_ms` from a config's pass-through keys.
    pub fn from_extra(seed: u64, extra: &BTreeMap<String, String>) -> Result<Self, String> {
        fn get<T: std::str::FromStr>(extra: &BTreeMap<String, String>, key: &str) -> Result<Option<T>, String> {
            extra
                .get(key)
                .map(|v| v.parse().map_err(|_| format!("bad value `{v}` for {key}")))
                .transpose()
        }
        let noise_amp: f64 = get(extra, "sim.noise_amp")?.unwrap_or(0.0);
        if !(noise_amp >= 0.0 && noise_amp.is_finite()) {
            return Err(format!("sim.noise_amp must be >= 0, got {noise_amp}"));
        }
        Ok(Self {
            seed,
            noise_amp,
            fail_at_step: get(extra, "sim.fail_at_step")?,
            crash_at_step: get(extra, "sim.crash_at_step")?,
            step_delay: Duration::from_millis(get(extra, "sim.step_delay_ms")?.unwrap_or(0)),
        })
    }
}

/// The trainer seed carried in a config's `seed` pass-through key.
pub fn seed_from_extra(extra: &BTreeMap<String, String>) -> Result<u64, String> {
    extra
        .get("seed")
        .map(|v| v.parse().map_err(|_| format!("bad value `{v}` for seed")))
        .transpose()
        .map(|s| s.unwrap_or(0))
}

fn noise(seed: u64, step: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng.gen_range(-1.0..=1.0)
}

pub fn sim_loss(step: u64, num_steps: u64, seed: u64, noise_amp: f64) -> f64 {
    let tau = num_steps as f64 / 5.0;
    let mut loss = L_INF + (L0 - L_INF) * (-(step as f64) / tau).exp();
    if noise_amp != 0.0 {
        loss += noise_amp * noise(seed, step);
    }
    loss
}

pub fn checkpoint_name(step: u64) -> String {
    format!("model.ckpt-{step}")
}

#[derive(Serialize)]
struct CheckpointPayload<'a> {
    model: String,
    num_classes: u32,
    step: u64,
    loss: f64,
    seed: u64,
    trainer: &'a str,
}

/// Contents of a simulated checkpoint file.
pub fn checkpoint_payload(config: &TrainingConfig, step: u64, seed: u64, noise_amp: f64) -> Vec<u8> {
    let payload = CheckpointPayload {
        model: config.model.identifier(),
        num_classes: config.hp.num_classes,
        step,
        loss: sim_loss(step, config.hp.num_steps, seed, noise_amp),
        seed,
        trainer: "sim",
    };
    let mut out = serde_json::to_vec(&payload).expect("payload serializes");
    out.push(b'\n');
    out
}

/// The complete event stream for an uninterrupted run, without touching
/// the filesystem.
pub fn sim_trainer_run(config: &TrainingConfig, opts: &SimOptions) -> Vec<TrainerEvent> {
    let mut out = Vec::new();
    run_events(config, opts, &AtomicBool::new(false), |ev| {
        out.push(ev);
        Ok(())
    })
    .expect("in-memory sink");
    out
}

fn run_events(
    config: &TrainingConfig,
    opts: &SimOptions,
    stop: &AtomicBool,
    mut emit: impl FnMut(TrainerEvent) -> io::Result<()>,
) -> io::Result<()> {
    let n = config.hp.num_steps;
    let period = (n / 100).max(1);
    let every = config.hp.checkpoint_every.max(1);
    let mut last_checkpoint = None;
    let mut last_progress = 0;
    let mut step = 0;
    loop {
        if opts.crash_at_step.is_some_and(|c| step >= c) {
            return Ok(());
        }
        if opts.fail_at_step.is_some_and(|f| step >= f) {
            return emit(TrainerEvent::Errored {
                message: format!("injected failure at step {step}"),
            });
        }
        if stop.load(Ordering::SeqCst) {
            if last_checkpoint != Some(last_progress) {
                emit(TrainerEvent::Checkpoint {
                    step: last_progress,
                    path: checkpoint_name(last_progress),
                })?;
            }
            return emit(TrainerEvent::Errored {
                message: "stopped by request".into(),
            });
        }
        if step % period == 0 || step == n {
            emit(TrainerEvent::Progress {
                step,
                loss: sim_loss(step, n, opts.seed, opts.noise_amp),
            })?;
            last_progress = step;
            if !opts.step_delay.is_zero() {
                std::thread::sleep(opts.step_delay);
            }
        }
        if step % every == 0 || step == n {
            emit(TrainerEvent::Checkpoint {
                step,
                path: checkpoint_name(step),
            })?;
            last_checkpoint = Some(step);
        }
        if step == n {
            return emit(TrainerEvent::Completed { final_step: n });
        }
        // jump straight to the next step that emits something
        let next_progress = (step / period + 1) * period;
        let next_checkpoint = (step / every + 1) * every;
        step = next_progress.min(next_checkpoint).min(n);
    }
}

/// Runs the simulation, writing each checkpoint file into `output_dir`
/// before announcing it.
pub fn run_sim_trainer(
    config: &TrainingConfig,
    opts: &SimOptions,
    output_dir: &Path,
    stop: &AtomicBool,
    mut emit: impl FnMut(TrainerEvent) -> io::Result<()>,
) -> io::Result<()> {
    std::fs::create_dir_all(output_dir)?;
    run_events(config, opts, stop, |ev| {
        if let TrainerEvent::Checkpoint { step, path } = &ev {
            let bytes = checkpoint_payload(config, *step, opts.seed, opts.noise_amp);
            std::fs::write(output_dir.join(path), bytes)?;
        }
        emit(ev)
    })
}

/// Speaks the trainer protocol over the given streams: one start command,
/// then events on `output`, honouring a later stop command on `input`.
/// Returns the process exit code.
pub fn serve_stdio<R, W>(mut input: R, mut output: W) -> i32
where
    R: BufRead + Send + 'static,
    W: Write,
{
    let mut first = String::new();
    let fail = |output: &mut W, message: String| {
        let _ = writeln!(output, "{}", TrainerEvent::Errored { message }.to_line());
        let _ = output.flush();
        2
    };
    if let Err(e) = input.read_line(&mut first) {
        return fail(&mut output, format!("cannot read start command: {e}"));
    }
    let (config_path, output_dir, seed) = match serde_json::from_str::<TrainerCommand>(first.trim()) {
        Ok(TrainerCommand::Start {
            config_path,
            output_dir,
            seed,
        }) => (config_path, output_dir, seed),
        Ok(other) => return fail(&mut output, format!("expected start command, got {other:?}")),
        Err(e) => return fail(&mut output, format!("malformed start command: {e}")),
    };
    let config = match std::fs::read_to_string(&config_path)
        .map_err(|e| e.to_string())
        .and_then(|text| parse_config(&text).map_err(|e| e.to_string()))
    {
        Ok(c) => c,
        Err(e) => return fail(&mut output, format!("cannot load config `{config_path}`: {e}")),
    };
    let opts = match SimOptions::from_extra(seed, &config.extra) {
        Ok(o) => o,
        Err(e) => return fail(&mut output, e),
    };

    let stop = Arc::new(AtomicBool::new(false));
    {
        let stop = Arc::clone(&stop);
        std::thread::spawn(move || {
            let mut line = String::new();
            loop {
                line.clear();
                match input.read_line(&mut line) {
                    Ok(0) | Err(_) => break,
                    Ok(_) => {
                        if matches!(serde_json::from_str(line.trim()), Ok(TrainerCommand::Stop)) {
                            stop.store(true, Ordering::SeqCst);
                        }
                    }
                }
            }
        });
    }

    let mut terminal = false;
    let result = run_sim_trainer(&config, &opts, Path::new(&output_dir), &stop, |ev| {
        terminal |= ev.is_terminal();
        writeln!(output, "{}", ev.to_line())?;
        output.flush()
    });
    match result {
        Err(e) => fail(&mut output, format!("i/o failure: {e}")),
        Ok(()) if !terminal => 3,
        Ok(()) => 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{LrSchedule, HyperParams, ModelSpec, Architecture, Backbone};
    use crate::augment::AugmentationPlan;

    fn cfg(num_steps: u64, every: u64) -> TrainingConfig {
        TrainingConfig {
            model: ModelSpec::new(Architecture::Ssd, Backbone::MobileNetV2),
            hp: HyperParams {
                num_steps,
                batch_size: 1,
                lr: LrSchedule::constant(0.0002),
                num_classes: 2,
                checkpoint_every: every,
                augmentation: AugmentationPlan::default(),
            },
            labelmap_path: "labelmap.pbtxt".into(),
            train_record_path: "train.record".into(),
            eval_record_path: "eval.record".into(),
            extra: BTreeMap::new(),
        }
    }

    fn checkpoints(events: &[TrainerEvent]) -> Vec<u64> {
        events
            .iter()
            .filter_map(|e| match e {
                TrainerEvent::Checkpoint { step, .. } => Some(*step),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn loss_starts_at_l0() {
        assert_eq!(sim_loss(0, 200, 9, 0.0), L0);
        let events = sim_trainer_run(&cfg(200, 50), &SimOptions::new(9));
        assert_eq!(events[0], TrainerEvent::Progress { step: 0, loss: 10.0 });
    }

    #[test]
    fn checkpoint_cadence_and_completion() {
        let events = sim_trainer_run(&cfg(200, 50), &SimOptions::new(1));
        assert_eq!(checkpoints(&events), [0, 50, 100, 150, 200]);
        assert_eq!(events.last(), Some(&TrainerEvent::Completed { final_step: 200 }));
        assert_eq!(events.iter().filter(|e| e.is_terminal()).count(), 1);
        let events = sim_trainer_run(&cfg(7, 3), &SimOptions::new(1));
        assert_eq!(checkpoints(&events), [0, 3, 6, 7]);
    }

    #[test]
    fn noiseless_loss_strictly_decreases() {
        for n in [1, 5, 99, 200, 1234] {
            let events = sim_trainer_run(&cfg(n, n), &SimOptions::new(3));
            let losses: Vec<f64> = events
                .iter()
                .filter_map(|e| match e {
                    TrainerEvent::Progress { loss, .. } => Some(*loss),
                    _ => None,
                })
                .collect();
            assert!(losses.windows(2).all(|w| w[1] < w[0]), "n={n}");
        }
    }

    #[test]
    fn progress_period() {
        let events = sim_trainer_run(&cfg(1000, 1000), &SimOptions::new(0));
        let steps: Vec<u64> = events
            .iter()
            .filter_map(|e| match e {
                TrainerEvent::Progress { step, .. } => Some(*step),
                _ => None,
            })
            .collect();
        assert_eq!(steps.len(), 101);
        assert!(steps.iter().all(|s| s % 10 == 0));
    }

    #[test]
    fn deterministic_with_noise() {
        let mut opts = SimOptions::new(42);
        opts.noise_amp = 0.3;
        let a: Vec<String> = sim_trainer_run(&cfg(300, 100), &opts).iter().map(|e| e.to_line()).collect();
        let b: Vec<String> = sim_trainer_run(&cfg(300, 100), &opts).iter().map(|e| e.to_line()).collect();
        assert_eq!(a, b);
        opts.seed = 43;
        let c: Vec<String> = sim_trainer_run(&cfg(300, 100), &opts).iter().map(|e| e.to_line()).collect();
        assert_ne!(a, c);
    }

    #[test]
    fn fault_injection() {
        let mut opts = SimOptions::new(0);
        opts.fail_at_step = Some(60);
        let events = sim_trainer_run(&cfg(200, 50), &opts);
        assert!(matches!(events.last(), Some(TrainerEvent::Errored { .. })));
        let mut opts = SimOptions::new(0);
        opts.crash_at_step = Some(60);
        let events = sim_trainer_run(&cfg(200, 50), &opts);
        assert!(events.iter().all(|e| !e.is_terminal()));
    }

    #[test]
    fn options_from_extra() {
        let mut extra = BTreeMap::new();
        extra.insert("sim.noise_amp".to_string(), "0.5".to_string());
        extra.insert("sim.crash_at_step".to_string(), "10".to_string());
        extra.insert("seed".to_string(), "77".to_string());
        let seed = seed_from_extra(&extra).unwrap();
        let o = SimOptions::from_extra(seed, &extra).unwrap();
        assert_eq!((o.seed, o.noise_amp, o.crash_at_step), (77, 0.5, Some(10)));
        extra.insert("sim.noise_amp".to_string(), "-1".to_string());
        assert!(SimOptions::from_extra(0, &extra).is_err());
    }

    #[test]
    fn stdio_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let config_path = dir.path().join("pipeline.config");
        std::fs::write(&config_path, crate::config::render_config(&cfg(20, 10))).unwrap();
        let out_dir = dir.path().join("out");
        let start = TrainerCommand::Start {
            config_path: config_path.display().to_string(),
            output_dir: out_dir.display().to_string(),
            seed: 5,
        };
        let input = io::Cursor::new(format!("{}\n", start.to_line()).into_bytes());
        let mut output = Vec::new();
        assert_eq!(serve_stdio(input, &mut output), 0);
        let text = String::from_utf8(output).unwrap();
        let events: Vec<TrainerEvent> = text.lines().map(crate::jobs::parse_trainer_line).collect();
        let mut opts = SimOptions::new(5);
        opts.step_delay = Duration::ZERO;
        assert_eq!(events, sim_trainer_run(&cfg(20, 10), &opts));
        assert!(out_dir.join("model.ckpt-20").exists());

        let mut output = Vec::new();
        assert_eq!(serve_stdio(io::Cursor::new(b"garbage\n".to_vec()), &mut output), 2);
        assert!(String::from_utf8(output).unwrap().starts_with(r#"{"type":"error""#));
    }
}
