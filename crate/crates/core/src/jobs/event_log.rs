use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use tokio::sync::watch;

use super::protocol::{LogLevel, TrainerEvent};
use super::JobState;

/// What a job's event stream carries: state changes plus accepted trainer
/// events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum JobEventBody {
    State { state: JobState },
    Progress { step: u64, loss: f64 },
    Checkpoint { step: u64, path: String },
    Log { level: LogLevel, message: String },
    Completed { final_step: u64 },
    Error { message: String },
}

impl From<TrainerEvent> for JobEventBody {
    fn from(ev: TrainerEvent) -> Self {
        match ev {
            TrainerEvent::Progress { step, loss } => Self::Progress { step, loss },
            TrainerEvent::Checkpoint { step, path } => Self::Checkpoint { step, path },
            TrainerEvent::Log { level, message } => Self::Log { level, message },
            TrainerEvent::Completed { final_step } => Self::Completed { final_step },
            TrainerEvent::Errored { message } => Self::Error { message },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobEvent {
    pub seq: u64,
    #[serde(flatten)]
    pub body: JobEventBody,
}

struct Inner {
    events: Vec<JobEvent>,
    closed: bool,
    file: Option<File>,
}

/// Append-only, optionally file-backed event log with blocking and async
/// wake-ups for subscribers.
pub struct EventLog {
    inner: Mutex<Inner>,
    cond: Condvar,
    version: watch::Sender<u64>,
}

impl std::fmt::Debug for EventLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.lock();
        f.debug_struct("EventLog")
            .field("len", &inner.events.len())
            .field("closed", &inner.closed)
            .finish()
    }
}

impl EventLog {
    fn with(events: Vec<JobEvent>, file: Option<File>) -> Self {
        Self {
            inner: Mutex::new(Inner {
                events,
                closed: false,
                file,
            }),
            cond: Condvar::new(),
            version: watch::Sender::new(0),
        }
    }

    pub fn in_memory() -> Self {
        Self::with(Vec::new(), None)
    }

    /// Opens (or creates) a JSON-lines log, loading what is already there.
    pub fn open(path: &Path) -> io::Result<Self> {
        let mut events = Vec::new();
        if path.exists() {
            for line in BufReader::new(File::open(path)?).lines() {
                let line = line?;
                if line.is_empty() {
                    continue;
                }
                let ev: JobEvent = serde_json::from_str(&line)
                    .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{}: {e}", path.display())))?;
                events.push(ev);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self::with(events, Some(file)))
    }

    /// Appends and wakes subscribers. Returns the new event's sequence
    /// number, or `None` if the log is already closed.
    pub fn append(&self, body: JobEventBody) -> io::Result<Option<u64>> {
        let mut inner = self.inner.lock();
        if inner.closed {
            return Ok(None);
        }
        let seq = inner.events.len() as u64;
        let ev = JobEvent { seq, body };
        if let Some(file) = inner.file.as_mut() {
            let mut line = serde_json::to_vec(&ev).expect("job event serializes");
            line.push(b'\n');
            file.write_all(&line)?;
        }
        inner.events.push(ev);
        drop(inner);
        self.notify();
        Ok(Some(seq))
    }

    /// Marks end of stream; later appends are dropped.
    pub fn close(&self) {
        self.inner.lock().closed = true;
        self.notify();
    }

    fn notify(&self) {
        self.cond.notify_all();
        self.version.send_modify(|v| *v += 1);
    }

    pub fn is_closed(&self) -> bool {
        self.inner.lock().closed
    }

    pub fn len(&self) -> usize {
        self.inner.lock().events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Events with `seq >= from`, and whether the log is closed.
    pub fn read_from(&self, from: u64) -> (Vec<JobEvent>, bool) {
        let inner = self.inner.lock();
        let start = (from as usize).min(inner.events.len());
        (inner.events[start..].to_vec(), inner.closed)
    }

    /// Blocks until more than `seen` events exist or the log closes.
    /// Returns false on timeout.
    pub fn wait_beyond(&self, seen: u64, timeout: Duration) -> bool {
        let mut inner = self.inner.lock();
        let deadline = std::time::Instant::now() + timeout;
        while inner.events.len() as u64 <= seen && !inner.closed {
            if self.cond.wait_until(&mut inner, deadline).timed_out() {
                return false;
            }
        }
        true
    }

    /// Change notifications for async readers. Subscribe before reading
    /// so no wake-up is missed.
    pub fn subscribe(&self) -> watch::Receiver<u64> {
        self.version.subscribe()
    }

    /// Blocking iterator: replays from `from`, then follows live events
    /// until the log closes.
    pub fn follow(self: &Arc<Self>, from: u64) -> Follow {
        Follow {
            log: Arc::clone(self),
            next: from,
            buffered: Vec::new().into_iter(),
        }
    }
}

pub struct Follow {
    log: Arc<EventLog>,
    next: u64,
    buffered: std::vec::IntoIter<JobEvent>,
}

impl Iterator for Follow {
    type Item = JobEvent;

    fn next(&mut self) -> Option<JobEvent> {
        loop {
            if let Some(ev) = self.buffered.next() {
                self.next = ev.seq + 1;
                return Some(ev);
            }
            let (events, closed) = self.log.read_from(self.next);
            if !events.is_empty() {
                self.buffered = events.into_iter();
                continue;
            }
            if closed {
                return None;
            }
            self.log.wait_beyond(self.next, Duration::from_secs(3600));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn progress(step: u64) -> JobEventBody {
        JobEventBody::Progress { step, loss: 1.0 }
    }

    #[test]
    fn replay_then_end() {
        let log = Arc::new(EventLog::in_memory());
        for s in 0..3 {
            log.append(progress(s)).unwrap();
        }
        log.close();
        assert_eq!(log.follow(0).count(), 3);
        assert_eq!(log.follow(1).map(|e| e.seq).collect::<Vec<_>>(), [1, 2]);
        assert_eq!(log.follow(10).count(), 0);
        assert_eq!(log.append(progress(9)).unwrap(), None);
    }

    #[test]
    fn concurrent_followers_see_same_sequence() {
        let log = Arc::new(EventLog::in_memory());
        let readers: Vec<_> = (0..2)
            .map(|_| {
                let log = Arc::clone(&log);
                std::thread::spawn(move || log.follow(0).collect::<Vec<_>>())
            })
            .collect();
        for s in 0..50 {
            log.append(progress(s)).unwrap();
        }
        log.close();
        let seen: Vec<_> = readers.into_iter().map(|r| r.join().unwrap()).collect();
        assert_eq!(seen[0].len(), 50);
        assert_eq!(seen[0], seen[1]);
    }

    #[test]
    fn file_backed_reload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        {
            let log = EventLog::open(&path).unwrap();
            log.append(JobEventBody::State { state: JobState::Queued }).unwrap();
            log.append(progress(5)).unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "{\"seq\":0,\"type\":\"state\",\"state\":\"queued\"}\n{\"seq\":1,\"type\":\"progress\",\"step\":5,\"loss\":1.0}\n"
        );
        let log = EventLog::open(&path).unwrap();
        assert_eq!(log.len(), 2);
        assert_eq!(log.append(progress(6)).unwrap(), Some(2));
    }
}
