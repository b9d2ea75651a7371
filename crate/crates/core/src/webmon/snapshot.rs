use std::sync::{Arc, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SystemSummary {
    pub ram_total_mib: f64,
    pub ram_used_mib: f64,
    pub load_avg: [f64; 3],
    pub running: usize,
    pub pending: usize,
    pub postponed: usize,
    pub done: usize,
    pub failed: usize,
    /// `None` while the worker count is bounded by the isolation slots only.
    pub worker_cap: Option<usize>,
}

/// One job row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobView {
    pub name: String,
    pub task: Option<String>,
    pub state: String,
    /// Start of the current or last attempt, Unix seconds.
    pub tstart: Option<f64>,
    /// Seconds since `tstart` (running) or length of the last attempt.
    pub duration: Option<f64>,
    /// Last sampled resident memory, MiB.
    pub rss: Option<f64>,
    pub attempts: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskView {
    pub name: String,
    pub state: String,
    pub jobs: Vec<JobView>,
    pub children: Vec<TaskView>,
}

/// Immutable view of the pool published for monitors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub timestamp: DateTime<Utc>,
    pub system: SystemSummary,
    /// Executing and scheduled jobs.
    pub jobs: Vec<JobView>,
    /// Executing and scheduled tasks with their non-terminal jobs.
    pub tasks: Vec<TaskView>,
    /// Failed tasks with their jobs.
    pub failures: Vec<TaskView>,
    /// Failed jobs that belong to no task.
    pub failed_jobs: Vec<JobView>,
}

impl StateSnapshot {
    pub fn empty(timestamp: DateTime<Utc>) -> Self {
        StateSnapshot {
            timestamp,
            system: SystemSummary::default(),
            jobs: Vec::new(),
            tasks: Vec::new(),
            failures: Vec::new(),
            failed_jobs: Vec::new(),
        }
    }
}

/// Shared slot through which the pool publishes snapshots. Readers clone
/// the inner `Arc` and never block the publisher for longer than that.
#[derive(Clone, Debug)]
pub struct SnapshotHandle(Arc<RwLock<Arc<StateSnapshot>>>);

impl SnapshotHandle {
    pub fn new(initial: StateSnapshot) -> Self {
        SnapshotHandle(Arc::new(RwLock::new(Arc::new(initial))))
    }

    pub fn publish(&self, snap: StateSnapshot) {
        let snap = Arc::new(snap);
        match self.0.write() {
            Ok(mut guard) => *guard = snap,
            Err(poisoned) => *poisoned.into_inner() = snap,
        }
    }

    pub fn get(&self) -> Arc<StateSnapshot> {
        match self.0.read() {
            Ok(guard) => Arc::clone(&guard),
            Err(poisoned) => Arc::clone(&poisoned.into_inner()),
        }
    }
}
