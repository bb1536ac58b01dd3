//! FIFO GPU lease scheduler.
//!
//! The scheduler is a plain value; callers serialize access (the job
//! manager keeps it behind a mutex). Every decision takes `now`
//! explicitly so it can be driven by tests without a clock.

use std::collections::{BTreeMap, HashMap, VecDeque};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SchedulerError {
    #[error("job `{0}` is already queued or running")]
    Duplicate(String),
    #[error("no active lease `{0}`")]
    UnknownLease(String),
    #[error("job `{0}` is not queued")]
    NotQueued(String),
    #[error("invalid GPU pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lease {
    pub lease_id: String,
    pub job_id: String,
    pub gpu_id: String,
    pub acquired_at: DateTime<Utc>,
    /// The lease is forfeited if no heartbeat arrives before this instant.
    pub deadline: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub job_id: String,
    pub enqueued_at: DateTime<Utc>,
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulerStatus {
    pub capacity: usize,
    pub queue: Vec<QueueEntry>,
    pub leases: Vec<Lease>,
    pub free_gpus: Vec<String>,
}

/// One line of the audit trail, in decision order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SchedulerEvent {
    Enqueued { job_id: String },
    Granted { lease_id: String, job_id: String, gpu_id: String },
    Released { lease_id: String, job_id: String, gpu_id: String },
    Expired { lease_id: String, job_id: String, gpu_id: String },
    Dequeued { job_id: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Submitted {
    pub entry: QueueEntry,
    /// Leases granted by the dispatch that follows the submission.
    pub granted: Vec<Lease>,
}

#[derive(Debug, Clone)]
pub struct Scheduler {
    gpus: Vec<String>,
    busy: HashMap<String, String>,
    queue: VecDeque<(String, DateTime<Utc>)>,
    leases: BTreeMap<String, Lease>,
    lease_of_job: HashMap<String, String>,
    heartbeat_timeout: Option<Duration>,
    next_lease: u64,
    history: Vec<SchedulerEvent>,
}

impl Scheduler {
    pub fn new(gpus: Vec<String>) -> Result<Self, SchedulerError> {
        if gpus.is_empty() {
            return Err(SchedulerError::Pool("at least one GPU is required".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = gpus.iter().find(|g| !seen.insert(*g)) {
            return Err(SchedulerError::Pool(format!("duplicate gpu id `{dup}`")));
        }
        Ok(Self {
            gpus,
            busy: HashMap::new(),
            queue: VecDeque::new(),
            leases: BTreeMap::new(),
            lease_of_job: HashMap::new(),
            heartbeat_timeout: None,
            next_lease: 0,
            history: Vec::new(),
        })
    }

    /// Pool of logical GPUs `gpu0..gpu{n-1}`.
    pub fn with_pool_size(n: usize) -> Result<Self, SchedulerError> {
        Self::new((0..n).map(|i| format!("gpu{i}")).collect())
    }

    pub fn with_heartbeat_timeout(mut self, timeout: Option<Duration>) -> Self {
        self.heartbeat_timeout = timeout;
        self
    }

    pub fn capacity(&self) -> usize {
        self.gpus.len()
    }

    pub fn history(&self) -> &[SchedulerEvent] {
        &self.history
    }

    pub fn lease_for_job(&self, job_id: &str) -> Option<&Lease> {
        self.lease_of_job.get(job_id).and_then(|l| self.leases.get(l))
    }

    pub fn is_queued(&self, job_id: &str) -> bool {
        self.queue.iter().any(|(j, _)| j == job_id)
    }

    pub fn submit(&mut self, job_id: &str, now: DateTime<Utc>) -> Result<Submitted, SchedulerError> {
        if self.is_queued(job_id) || self.lease_of_job.contains_key(job_id) {
            return Err(SchedulerError::Duplicate(job_id.into()));
        }
        let entry = QueueEntry {
            job_id: job_id.into(),
            enqueued_at: now,
            position: self.queue.len(),
        };
        self.queue.push_back((job_id.into(), now));
        self.history.push(SchedulerEvent::Enqueued { job_id: job_id.into() });
        let granted = self.dispatch(now);
        Ok(Submitted { entry, granted })
    }

    /// Grants the queue head a lease while a GPU is free.
    pub fn dispatch(&mut self, now: DateTime<Utc>) -> Vec<Lease> {
        let mut granted = Vec::new();
        while !self.queue.is_empty() {
            let Some(gpu) = self.gpus.iter().find(|g| !self.busy.contains_key(*g)).cloned() else {
                break;
            };
            let (job_id, _) = self.queue.pop_front().expect("non-empty queue");
            self.next_lease += 1;
            let lease = Lease {
                lease_id: format!("lease-{}", self.next_lease),
                job_id: job_id.clone(),
                gpu_id: gpu.clone(),
                acquired_at: now,
                deadline: self.heartbeat_timeout.map(|t| now + t),
            };
            self.busy.insert(gpu.clone(), lease.lease_id.clone());
            self.lease_of_job.insert(job_id.clone(), lease.lease_id.clone());
            self.leases.insert(lease.lease_id.clone(), lease.clone());
            self.history.push(SchedulerEvent::Granted {
                lease_id: lease.lease_id.clone(),
                job_id,
                gpu_id: gpu,
            });
            granted.push(lease);
        }
        granted
    }

    fn remove_lease(&mut self, lease_id: &str) -> Result<Lease, SchedulerError> {
        let lease = self
            .leases
            .remove(lease_id)
            .ok_or_else(|| SchedulerError::UnknownLease(lease_id.into()))?;
        self.busy.remove(&lease.gpu_id);
        self.lease_of_job.remove(&lease.job_id);
        Ok(lease)
    }

    /// Returns the GPU to the pool and dispatches immediately.
    pub fn release(&mut self, lease_id: &str, now: DateTime<Utc>) -> Result<Vec<Lease>, SchedulerError> {
        let lease = self.remove_lease(lease_id)?;
        self.history.push(SchedulerEvent::Released {
            lease_id: lease.lease_id,
            job_id: lease.job_id,
            gpu_id: lease.gpu_id,
        });
        Ok(self.dispatch(now))
    }

    pub fn cancel_queued(&mut self, job_id: &str) -> Result<(), SchedulerError> {
        let idx = self
            .queue
            .iter()
            .position(|(j, _)| j == job_id)
            .ok_or_else(|| SchedulerError::NotQueued(job_id.into()))?;
        self.queue.remove(idx);
        self.history.push(SchedulerEvent::Dequeued { job_id: job_id.into() });
        Ok(())
    }

    pub fn heartbeat(&mut self, lease_id: &str, now: DateTime<Utc>) -> Result<(), SchedulerError> {
        let timeout = self.heartbeat_timeout;
        let lease = self
            .leases
            .get_mut(lease_id)
            .ok_or_else(|| SchedulerError::UnknownLease(lease_id.into()))?;
        lease.deadline = timeout.map(|t| now + t);
        Ok(())
    }

    /// Forfeits every lease whose deadline has passed, then dispatches.
    /// Returns `(expired, granted)`.
    pub fn reap_expired(&mut self, now: DateTime<Utc>) -> (Vec<Lease>, Vec<Lease>) {
        let overdue: Vec<String> = self
            .leases
            .values()
            .filter(|l| l.deadline.is_some_and(|d| d <= now))
            .map(|l| l.lease_id.clone())
            .collect();
        let mut expired = Vec::new();
        for id in overdue {
            let lease = self.remove_lease(&id).expect("listed lease");
            self.history.push(SchedulerEvent::Expired {
                lease_id: lease.lease_id.clone(),
                job_id: lease.job_id.clone(),
                gpu_id: lease.gpu_id.clone(),
            });
            expired.push(lease);
        }
        let granted = if expired.is_empty() { Vec::new() } else { self.dispatch(now) };
        (expired, granted)
    }

    pub fn status(&self) -> SchedulerStatus {
        SchedulerStatus {
            capacity: self.gpus.len(),
            queue: self
                .queue
                .iter()
                .enumerate()
                .map(|(position, (job_id, enqueued_at))| QueueEntry {
                    job_id: job_id.clone(),
                    enqueued_at: *enqueued_at,
                    position,
                })
                .collect(),
            leases: self.leases.values().cloned().collect(),
            free_gpus: self.gpus.iter().filter(|g| !self.busy.contains_key(*g)).cloned().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t0() -> DateTime<Utc> {
        DateTime::from_timestamp(1_700_000_000, 0).unwrap()
    }

    #[test]
    fn free_gpu_dispatches_immediately() {
        let mut s = Scheduler::with_pool_size(1).unwrap();
        let sub = s.submit("j1", t0()).unwrap();
        assert_eq!(sub.entry.position, 0);
        assert_eq!(sub.granted.len(), 1);
        assert_eq!(sub.granted[0].job_id, "j1");
    }

    #[test]
    fn busy_gpu_leaves_job_at_head() {
        let mut s = Scheduler::with_pool_size(1).unwrap();
        s.submit("j1", t0()).unwrap();
        let sub = s.submit("j2", t0()).unwrap();
        assert_eq!(sub.entry.position, 0);
        assert!(sub.granted.is_empty());
        assert_eq!(s.submit("j2", t0()), Err(SchedulerError::Duplicate("j2".into())));
        assert_eq!(s.submit("j1", t0()), Err(SchedulerError::Duplicate("j1".into())));
    }

    #[test]
    fn two_gpus_three_jobs() {
        let mut s = Scheduler::with_pool_size(2).unwrap();
        let granted: Vec<String> = ["a", "b", "c"]
            .iter()
            .flat_map(|j| s.submit(j, t0()).unwrap().granted)
            .map(|l| l.job_id)
            .collect();
        assert_eq!(granted, ["a", "b"]);
        let st = s.status();
        assert_eq!(st.leases.len(), 2);
        assert_eq!(st.queue.iter().map(|e| e.job_id.as_str()).collect::<Vec<_>>(), ["c"]);
        assert!(st.free_gpus.is_empty());
        assert!(s.dispatch(t0()).is_empty());
    }

    #[test]
    fn release_hands_gpu_to_next_and_rejects_repeat() {
        let mut s = Scheduler::with_pool_size(1).unwrap();
        let l1 = s.submit("a", t0()).unwrap().granted.remove(0);
        s.submit("b", t0()).unwrap();
        let next = s.release(&l1.lease_id, t0()).unwrap();
        assert_eq!(next[0].job_id, "b");
        assert_eq!(next[0].gpu_id, l1.gpu_id);
        assert!(matches!(s.release(&l1.lease_id, t0()), Err(SchedulerError::UnknownLease(_))));
        s.release(&next[0].lease_id, t0()).unwrap();
        let st = s.status();
        assert_eq!(st.free_gpus.len() + st.leases.len(), st.capacity);
        assert_eq!(st.free_gpus, ["gpu0"]);
    }

    #[test]
    fn submit_three_on_one_gpu() {
        let mut s = Scheduler::with_pool_size(1).unwrap();
        for j in ["a", "b", "c"] {
            s.submit(j, t0()).unwrap();
        }
        let st = s.status();
        assert_eq!(st.leases.len(), 1);
        assert_eq!(st.queue.iter().map(|e| (e.job_id.as_str(), e.position)).collect::<Vec<_>>(), [("b", 0), ("c", 1)]);
    }

    #[test]
    fn cancel_queued_removes_entry() {
        let mut s = Scheduler::with_pool_size(1).unwrap();
        s.submit("a", t0()).unwrap();
        s.submit("b", t0()).unwrap();
        s.cancel_queued("b").unwrap();
        assert!(s.status().queue.is_empty());
        assert_eq!(s.cancel_queued("a"), Err(SchedulerError::NotQueued("a".into())));
    }

    #[test]
    fn missed_heartbeats_forfeit_lease() {
        let mut s = Scheduler::with_pool_size(1)
            .unwrap()
            .with_heartbeat_timeout(Some(Duration::seconds(30)));
        let l = s.submit("a", t0()).unwrap().granted.remove(0);
        s.submit("b", t0()).unwrap();
        s.heartbeat(&l.lease_id, t0() + Duration::seconds(20)).unwrap();
        let (expired, _) = s.reap_expired(t0() + Duration::seconds(45));
        assert!(expired.is_empty());
        let (expired, granted) = s.reap_expired(t0() + Duration::seconds(50));
        assert_eq!(expired[0].job_id, "a");
        assert_eq!(granted[0].job_id, "b");
        assert!(s.release(&l.lease_id, t0()).is_err());
    }

    #[test]
    fn pool_validation() {
        assert!(Scheduler::new(vec![]).is_err());
        assert!(Scheduler::new(vec!["x".into(), "x".into()]).is_err());
    }
}
