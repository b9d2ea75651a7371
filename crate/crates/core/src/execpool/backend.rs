//! Process backends driving the pool: real OS children or a simulation with
//! a virtual clock.

use std::collections::BTreeMap;
use std::io;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};

use crate::profiler::{self, ChildUsage, ProfiledChild, SpawnRequest};

pub type ProcId = u64;

/// Everything the scheduler needs from the process layer. The pool calls it
/// from a single control thread.
pub trait ProcessBackend {
    /// Monotonic scheduler clock.
    fn now(&self) -> Duration;
    fn wall_clock(&self) -> DateTime<Utc>;
    /// Waits for the next scheduler tick.
    fn sleep(&mut self, dur: Duration);
    fn spawn(&mut self, req: &SpawnRequest) -> io::Result<ProcId>;
    /// Non-blocking; returns the child's usage exactly once, after it exited.
    fn try_reap(&mut self, id: ProcId) -> io::Result<Option<ChildUsage>>;
    fn rss_mib(&mut self, id: ProcId) -> Option<f64>;
    fn kill(&mut self, id: ProcId);
    fn os_pid(&self, id: ProcId) -> Option<i32>;
    fn total_ram_mib(&self) -> f64;
}

/// Real child processes under `wait4` accounting.
pub struct OsBackend {
    start: Instant,
    children: BTreeMap<ProcId, ProfiledChild>,
    total_ram_mib: f64,
}

impl OsBackend {
    pub fn new() -> Self {
        OsBackend {
            start: Instant::now(),
            children: BTreeMap::new(),
            total_ram_mib: profiler::system_memory_mib()
                .map(|(t, _)| t)
                .unwrap_or(f64::INFINITY),
        }
    }
}

impl Default for OsBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl ProcessBackend for OsBackend {
    fn now(&self) -> Duration {
        self.start.elapsed()
    }

    fn wall_clock(&self) -> DateTime<Utc> {
        Utc::now()
    }

    fn sleep(&mut self, dur: Duration) {
        std::thread::sleep(dur);
    }

    fn spawn(&mut self, req: &SpawnRequest) -> io::Result<ProcId> {
        let child = ProfiledChild::spawn(req)?;
        let id = child.pid() as ProcId;
        self.children.insert(id, child);
        Ok(id)
    }

    fn try_reap(&mut self, id: ProcId) -> io::Result<Option<ChildUsage>> {
        let child = self.children.get_mut(&id).ok_or_else(|| {
            io::Error::new(io::ErrorKind::NotFound, format!("unknown child {id}"))
        })?;
        let usage = child.try_reap()?;
        if usage.is_some() {
            self.children.remove(&id);
        }
        Ok(usage)
    }

    fn rss_mib(&mut self, id: ProcId) -> Option<f64> {
        self.children.get_mut(&id)?.sample_rss_mib()
    }

    fn kill(&mut self, id: ProcId) {
        if let Some(child) = self.children.get(&id) {
            child.kill();
        }
    }

    fn os_pid(&self, id: ProcId) -> Option<i32> {
        self.children.get(&id).map(ProfiledChild::pid)
    }

    fn total_ram_mib(&self) -> f64 {
        self.total_ram_mib
    }
}
