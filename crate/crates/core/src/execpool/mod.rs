//! Constraint-aware multi-process execution pool.
//!
//! Jobs are external processes. Each running job is bound to one CPU set
//! taken from its category's isolation policy; no logical CPU is ever
//! shared by two running jobs. The scheduler is a single-threaded loop over
//! child exits and timers: it reaps children, enforces per-job and global
//! timeouts, applies the low-memory kill-and-postpone rule and starts
//! pending jobs in FIFO order as slots free up.

mod affinity;
mod backend;
mod events;
mod job;
pub mod sim;
mod task;
mod watchdog;

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::io;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};

pub use affinity::{affinity_of, bind_affinity, AffinityError};
pub use backend::{OsBackend, ProcId, ProcessBackend};
pub use events::{parse_log_line, EventKind, EventLog, Level, LogLine, PoolEvent};
pub use job::{Job, JobCallback, JobId, JobReport, JobState};
pub use sim::{SimBackend, SimScript};
pub use task::{Task, TaskCallback, TaskId, TaskReport, TaskState};
pub use watchdog::{memory_watchdog_tick, WatchdogDecision, WorkerSample};

use crate::profiler::{ChildUsage, ExitStatus, ResourceLog, RunRecord, SpawnRequest};
pub use crate::topology::CpuSet;
use crate::topology::{slots_for, AffinityPolicy, TopologyMap};
use crate::webmon::{JobView, SnapshotHandle, StateSnapshot, SystemSummary, TaskView};
use task::{derive_state, TaskNode};

#[derive(Debug, thiserror::Error)]
pub enum PoolError {
    #[error("pool is shut down")]
    ShutDown,
    #[error("a job named '{0}' was already submitted")]
    DuplicateName(String),
    #[error("invalid job name '{0}': must be non-empty without whitespace")]
    InvalidName(String),
    #[error("job '{0}' has an empty argv")]
    EmptyArgv(String),
    #[error("no affinity policy configured for category '{0}'")]
    UnknownCategory(String),
    #[error("unknown task id")]
    UnknownTask,
    #[error("invalid pool configuration: {0}")]
    InvalidConfig(String),
    #[error("no jobs to run")]
    NothingToRun,
    #[error("resource log {path}: {source}")]
    ResourceLog { path: String, source: io::Error },
}

#[derive(Clone, Debug)]
pub struct PoolConfig {
    pub policy_by_category: BTreeMap<String, AffinityPolicy>,
    /// Fraction of total RAM above which the watchdog intervenes.
    pub mem_limit_fraction: f64,
    /// Overrides the backend's total RAM figure.
    pub mem_total_mib: Option<f64>,
    pub global_timeout: Option<Duration>,
    pub max_workers_override: Option<usize>,
    /// Watchdog kills beyond this many postponements end the job as Failed.
    pub max_postpones: u32,
    pub watchdog_period: Duration,
    /// Scheduler loop period.
    pub tick: Duration,
    /// Minimum interval between snapshot publications without state changes.
    pub publish_period: Duration,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            policy_by_category: BTreeMap::from([
                ("algorithm".to_string(), AffinityPolicy::PhysCore),
                ("measure".to_string(), AffinityPolicy::LogicalCpu),
                ("measure-mt".to_string(), AffinityPolicy::NumaNode),
            ]),
            mem_limit_fraction: 0.9,
            mem_total_mib: None,
            global_timeout: None,
            max_workers_override: None,
            max_postpones: 3,
            watchdog_period: Duration::from_secs(1),
            tick: Duration::from_millis(10),
            publish_period: Duration::from_secs(1),
        }
    }
}

/// Outcome counts of one `run_loop`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunSummary {
    /// Jobs that were not terminal when the run began, plus those submitted
    /// during it.
    pub submitted: usize,
    pub done: usize,
    pub failed: usize,
    pub timed_out: usize,
    pub killed: usize,
    pub watchdog_kills: usize,
    pub postponements: usize,
    /// Watchdog kills that ended a job because its postpone limit was spent.
    pub postpone_exhausted: usize,
    pub restarts: usize,
    pub max_running: usize,
    pub global_timeout_hit: bool,
    pub interrupted: bool,
}

impl RunSummary {
    pub fn terminal(&self) -> usize {
        self.done + self.failed + self.timed_out + self.killed
    }

    pub fn failures(&self) -> usize {
        self.failed + self.timed_out + self.killed
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum KillReason {
    Timeout,
    Watchdog,
    Global,
    Interrupt,
}

struct JobEntry {
    spec: Job,
    state: JobState,
    attempts: u32,
    timeout_restarts: u32,
    postponements: u32,
    proc: Option<ProcId>,
    cpuset: Option<CpuSet>,
    started_at: Option<Duration>,
    started_wall: Option<DateTime<Utc>>,
    last_wall_s: Option<f64>,
    last_rss: Option<f64>,
    kill_reason: Option<KillReason>,
}

/// The execution pool. `B` is the process layer; [`OsBackend`] runs real
/// children, [`SimBackend`] runs scripted ones on a virtual clock.
pub struct ExecPool<B: ProcessBackend = OsBackend> {
    cfg: PoolConfig,
    backend: B,
    slots: BTreeMap<AffinityPolicy, Vec<CpuSet>>,
    busy_cpus: BTreeSet<usize>,
    jobs: Vec<JobEntry>,
    names: HashMap<String, JobId>,
    tasks: Vec<TaskNode>,
    pending: VecDeque<JobId>,
    postponed: VecDeque<JobId>,
    running: BTreeSet<JobId>,
    worker_cap: Option<usize>,
    shut_down: bool,
    events: EventLog,
    resources: Option<ResourceLog>,
    records: Vec<RunRecord>,
    snapshot: SnapshotHandle,
    interrupt: Arc<AtomicBool>,
    summary: RunSummary,
    run_start: Duration,
    last_watchdog: Duration,
    last_publish: Duration,
    dirty: bool,
    fatal: Option<PoolError>,
}

impl ExecPool<OsBackend> {
    pub fn os(cfg: PoolConfig, topo: &TopologyMap) -> Result<Self, PoolError> {
        Self::new(cfg, topo, OsBackend::new())
    }
}

impl<B: ProcessBackend> ExecPool<B> {
    pub fn new(cfg: PoolConfig, topo: &TopologyMap, backend: B) -> Result<Self, PoolError> {
        if !(cfg.mem_limit_fraction > 0.0 && cfg.mem_limit_fraction <= 1.0) {
            return Err(PoolError::InvalidConfig(format!(
                "mem_limit_fraction must be in (0, 1], got {}",
                cfg.mem_limit_fraction
            )));
        }
        if cfg.max_workers_override == Some(0) {
            return Err(PoolError::InvalidConfig(
                "max_workers_override must be positive".into(),
            ));
        }
        if cfg.tick.is_zero() {
            return Err(PoolError::InvalidConfig("tick must be positive".into()));
        }
        let slots = cfg
            .policy_by_category
            .values()
            .map(|&p| (p, slots_for(p, topo)))
            .collect();
        let snapshot = SnapshotHandle::new(StateSnapshot::empty(backend.wall_clock()));
        Ok(ExecPool {
            worker_cap: cfg.max_workers_override,
            cfg,
            backend,
            slots,
            busy_cpus: BTreeSet::new(),
            jobs: Vec::new(),
            names: HashMap::new(),
            tasks: Vec::new(),
            pending: VecDeque::new(),
            postponed: VecDeque::new(),
            running: BTreeSet::new(),
            shut_down: false,
            events: EventLog::default(),
            resources: None,
            records: Vec::new(),
            snapshot,
            interrupt: Arc::new(AtomicBool::new(false)),
            summary: RunSummary::default(),
            run_start: Duration::ZERO,
            last_watchdog: Duration::ZERO,
            last_publish: Duration::ZERO,
            dirty: true,
            fatal: None,
        })
    }

    /// Mirrors lifecycle events into `path`.
    pub fn with_event_log(mut self, path: &Path) -> io::Result<Self> {
        self.events = EventLog::to_file(path)?;
        Ok(self)
    }

    /// Appends one record per attempt to `path` (created with its header).
    pub fn with_resource_log(mut self, path: &Path) -> io::Result<Self> {
        let log = ResourceLog::new(path);
        log.ensure_header()?;
        self.resources = Some(log);
        Ok(self)
    }

    pub fn config(&self) -> &PoolConfig {
        &self.cfg
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    pub fn snapshot_handle(&self) -> SnapshotHandle {
        self.snapshot.clone()
    }

    /// Setting the flag makes the loop kill running jobs and drop the queue.
    pub fn interrupt_handle(&self) -> Arc<AtomicBool> {
        Arc::clone(&self.interrupt)
    }

    /// Replaces the interrupt flag, e.g. with one registered for signals.
    pub fn with_interrupt(mut self, flag: Arc<AtomicBool>) -> Self {
        self.interrupt = flag;
        self
    }

    pub fn events(&self) -> &[PoolEvent] {
        self.events.events()
    }

    /// Every attempt's record, in completion order.
    pub fn records(&self) -> &[RunRecord] {
        &self.records
    }

    pub fn job_id(&self, name: &str) -> Option<JobId> {
        self.names.get(name).copied()
    }

    pub fn job_state(&self, id: JobId) -> JobState {
        self.jobs[id.0].state
    }

    pub fn attempts(&self, id: JobId) -> u32 {
        self.jobs[id.0].attempts
    }

    pub fn postponements(&self, id: JobId) -> u32 {
        self.jobs[id.0].postponements
    }

    pub fn job_name(&self, id: JobId) -> &str {
        &self.jobs[id.0].spec.name
    }

    pub fn job_ids(&self) -> impl Iterator<Item = JobId> {
        (0..self.jobs.len()).map(JobId)
    }

    pub fn task_state(&self, id: TaskId) -> TaskState {
        self.tasks[id.0].state
    }

    pub fn worker_cap(&self) -> Option<usize> {
        self.worker_cap
    }

    pub fn running_count(&self) -> usize {
        self.running.len()
    }

    pub fn is_shut_down(&self) -> bool {
        self.shut_down
    }

    /// Rejects further submissions.
    pub fn shutdown(&mut self) {
        self.shut_down = true;
    }

    pub fn add_task(&mut self, task: Task) -> Result<TaskId, PoolError> {
        if let Some(parent) = task.parent {
            if parent.0 >= self.tasks.len() {
                return Err(PoolError::UnknownTask);
            }
        }
        let id = TaskId(self.tasks.len());
        self.tasks.push(TaskNode {
            name: task.name,
            parent: task.parent,
            children: Vec::new(),
            jobs: Vec::new(),
            state: TaskState::Pending,
            started: false,
            finished: false,
            on_start: task.on_start,
            on_done: task.on_done,
        });
        if let Some(parent) = task.parent {
            self.tasks[parent.0].children.push(id);
        }
        Ok(id)
    }

    /// Enqueues `job` as Pending behind every job already queued.
    pub fn submit(&mut self, job: Job) -> Result<JobId, PoolError> {
        if self.shut_down {
            return Err(PoolError::ShutDown);
        }
        if job.name.is_empty() || job.name.chars().any(char::is_whitespace) {
            return Err(PoolError::InvalidName(job.name));
        }
        if self.names.contains_key(&job.name) {
            return Err(PoolError::DuplicateName(job.name));
        }
        if job.argv.is_empty() {
            return Err(PoolError::EmptyArgv(job.name));
        }
        if !self.cfg.policy_by_category.contains_key(&job.category) {
            return Err(PoolError::UnknownCategory(job.category));
        }
        if let Some(t) = job.task {
            if t.0 >= self.tasks.len() {
                return Err(PoolError::UnknownTask);
            }
        }
        let id = JobId(self.jobs.len());
        self.names.insert(job.name.clone(), id);
        let detail = format!("category={}", job.category);
        let task = job.task;
        self.jobs.push(JobEntry {
            spec: job,
            state: JobState::Pending,
            attempts: 0,
            timeout_restarts: 0,
            postponements: 0,
            proc: None,
            cpuset: None,
            started_at: None,
            started_wall: None,
            last_wall_s: None,
            last_rss: None,
            kill_reason: None,
        });
        if let Some(t) = task {
            self.tasks[t.0].jobs.push(id);
            self.refresh_tasks_from(t);
        }
        self.pending.push_back(id);
        self.summary.submitted += 1;
        self.emit(Level::Info, id, EventKind::Submit, detail);
        self.dirty = true;
        Ok(id)
    }

    /// Runs until every job is terminal. Jobs may not be added while it
    /// runs; use [`begin_run`](Self::begin_run) and [`step`](Self::step) to
    /// interleave submissions.
    pub fn run_loop(&mut self) -> Result<RunSummary, PoolError> {
        if self.jobs.iter().all(|j| j.state.is_terminal()) {
            return Err(PoolError::NothingToRun);
        }
        self.begin_run();
        while self.step()? {}
        Ok(self.finish_run())
    }

    /// Resets run accounting and the global-timeout clock.
    pub fn begin_run(&mut self) {
        let now = self.backend.now();
        self.summary = RunSummary {
            submitted: self.jobs.iter().filter(|j| !j.state.is_terminal()).count(),
            ..RunSummary::default()
        };
        self.run_start = now;
        self.last_watchdog = now;
    }

    pub fn finish_run(&mut self) -> RunSummary {
        self.publish();
        std::mem::take(&mut self.summary)
    }

    /// One scheduler iteration. Returns `false` once nothing is running,
    /// pending or postponed.
    pub fn step(&mut self) -> Result<bool, PoolError> {
        self.reap_and_notify();
        if let Some(e) = self.fatal.take() {
            self.abort_all(KillReason::Interrupt, "resource log failure");
            self.drain_kills();
            return Err(e);
        }
        self.check_interrupt_and_global_timeout();
        self.check_timeouts();
        self.watchdog_if_due();
        self.schedule();
        self.summary.max_running = self.summary.max_running.max(self.running.len());
        let now = self.backend.now();
        if self.dirty || now.saturating_sub(self.last_publish) >= self.cfg.publish_period {
            self.publish();
        }
        if self.running.is_empty() && self.pending.is_empty() && self.postponed.is_empty() {
            return Ok(false);
        }
        self.backend.sleep(self.cfg.tick);
        Ok(true)
    }

    /// Reaps every exited child once, updates job and task states and fires
    /// callbacks. Returns the jobs that reached a terminal state.
    pub fn reap_and_notify(&mut self) -> Vec<JobId> {
        let mut completed = Vec::new();
        let running: Vec<JobId> = self.running.iter().copied().collect();
        for id in running {
            let proc = self.jobs[id.0].proc.expect("running job has a process");
            match self.backend.try_reap(proc) {
                Ok(Some(usage)) => {
                    if self.handle_exit(id, usage) {
                        completed.push(id);
                    }
                }
                Ok(None) => {}
                Err(e) => {
                    self.emit(
                        Level::Error,
                        id,
                        EventKind::Warning,
                        format!("reap failed: {e}"),
                    );
                    let usage = ChildUsage {
                        status: ExitStatus::NotStarted,
                        cpu_s: 0.0,
                        peak_rss_mib: 0.0,
                    };
                    if self.handle_exit(id, usage) {
                        completed.push(id);
                    }
                }
            }
        }
        completed
    }

    fn handle_exit(&mut self, id: JobId, usage: ChildUsage) -> bool {
        let now = self.backend.now();
        let entry = &mut self.jobs[id.0];
        let wall = now
            .saturating_sub(entry.started_at.unwrap_or(now))
            .as_secs_f64();
        let record = RunRecord {
            job: entry.spec.name.clone(),
            attempt: entry.attempts,
            wall_s: wall,
            cpu_s: usage.cpu_s,
            peak_rss_mib: usage.peak_rss_mib,
            exit: usage.status,
            started: entry
                .started_wall
                .unwrap_or_else(|| self.backend.wall_clock()),
        };
        entry.proc = None;
        entry.last_wall_s = Some(wall);
        entry.last_rss = None;
        if let Some(cpus) = entry.cpuset.take() {
            for c in cpus.iter() {
                self.busy_cpus.remove(&c);
            }
        }
        self.running.remove(&id);
        self.dirty = true;
        self.store_record(record.clone());

        let exit = usage.status;
        let entry = &mut self.jobs[id.0];
        let restarts = entry.spec.restarts_on_timeout;
        match entry.kill_reason.take() {
            Some(KillReason::Timeout) if entry.timeout_restarts < restarts => {
                entry.timeout_restarts += 1;
                entry.state = JobState::Pending;
                let detail = format!(
                    "restart {}/{} after timeout",
                    entry.timeout_restarts, restarts
                );
                self.pending.push_back(id);
                self.summary.restarts += 1;
                self.emit(Level::Warn, id, EventKind::Restart, detail);
                false
            }
            Some(KillReason::Timeout) => {
                self.finish(id, JobState::TimedOut, Some(record), format!("exit={exit}"));
                true
            }
            Some(KillReason::Watchdog) if entry.postponements < self.cfg.max_postpones => {
                entry.postponements += 1;
                entry.state = JobState::Postponed;
                let detail = format!("postponements={}", entry.postponements);
                self.postponed.push_back(id);
                self.summary.postponements += 1;
                self.emit(Level::Warn, id, EventKind::Postpone, detail);
                false
            }
            Some(KillReason::Watchdog) => {
                self.summary.postpone_exhausted += 1;
                self.finish(
                    id,
                    JobState::Failed,
                    Some(record),
                    "postpone limit reached".to_string(),
                );
                true
            }
            Some(KillReason::Global) => {
                self.finish(
                    id,
                    JobState::TimedOut,
                    Some(record),
                    "global timeout".to_string(),
                );
                true
            }
            Some(KillReason::Interrupt) => {
                self.finish(
                    id,
                    JobState::Killed,
                    Some(record),
                    "interrupted".to_string(),
                );
                true
            }
            None if exit.success() => {
                self.finish(id, JobState::Done, Some(record), format!("exit={exit}"));
                true
            }
            None => {
                self.finish(id, JobState::Failed, Some(record), format!("exit={exit}"));
                true
            }
        }
    }

    fn store_record(&mut self, record: RunRecord) {
        if let Some(log) = &self.resources {
            if let Err(e) = log.append(&record) {
                if self.fatal.is_none() {
                    self.fatal = Some(PoolError::ResourceLog {
                        path: log.path().display().to_string(),
                        source: e,
                    });
                }
            }
        }
        self.records.push(record);
    }

    /// Moves a job into a terminal state and runs the completion side
    /// effects.
    fn finish(&mut self, id: JobId, state: JobState, record: Option<RunRecord>, detail: String) {
        debug_assert!(state.is_terminal());
        self.jobs[id.0].state = state;
        let (level, kind) = match state {
            JobState::Done => (Level::Info, EventKind::Done),
            JobState::Failed => (Level::Warn, EventKind::Fail),
            JobState::TimedOut => (Level::Warn, EventKind::Timeout),
            _ => (Level::Warn, EventKind::Kill),
        };
        match state {
            JobState::Done => self.summary.done += 1,
            JobState::Failed => self.summary.failed += 1,
            JobState::TimedOut => self.summary.timed_out += 1,
            _ => self.summary.killed += 1,
        }
        self.emit(level, id, kind, detail);

        let entry = &self.jobs[id.0];
        let report = JobReport {
            id,
            name: entry.spec.name.clone(),
            state,
            attempts: entry.attempts,
            record,
        };
        if let Some(mut cb) = self.jobs[id.0].spec.on_done.take() {
            if let Err(e) = guarded(|| cb(&report)) {
                self.emit(
                    Level::Error,
                    id,
                    EventKind::CallbackError,
                    format!("on_done: {e}"),
                );
            }
            self.jobs[id.0].spec.on_done = Some(cb);
        }
        if let Some(t) = self.jobs[id.0].spec.task {
            self.refresh_tasks_from(t);
        }
        // A finished peer makes room for postponed jobs.
        while let Some(p) = self.postponed.pop_front() {
            self.resume(p);
        }
        self.dirty = true;
    }

    fn resume(&mut self, id: JobId) {
        self.jobs[id.0].state = JobState::Pending;
        self.pending.push_back(id);
        self.emit(Level::Info, id, EventKind::Resume, String::new());
    }

    fn kill(&mut self, id: JobId, reason: KillReason, detail: String) {
        let entry = &mut self.jobs[id.0];
        if entry.kill_reason.is_some() {
            return;
        }
        entry.kill_reason = Some(reason);
        if let Some(proc) = entry.proc {
            self.backend.kill(proc);
        }
        let kind = if reason == KillReason::Timeout {
            EventKind::Timeout
        } else {
            EventKind::Kill
        };
        self.emit(Level::Warn, id, kind, detail);
    }

    fn check_interrupt_and_global_timeout(&mut self) {
        if self.interrupt.load(Ordering::SeqCst) && !self.summary.interrupted {
            self.summary.interrupted = true;
            self.shut_down = true;
            self.abort_all(KillReason::Interrupt, "interrupted");
        }
        let now = self.backend.now();
        if let Some(limit) = self.cfg.global_timeout {
            if !self.summary.global_timeout_hit && now.saturating_sub(self.run_start) >= limit {
                self.summary.global_timeout_hit = true;
                self.abort_all(KillReason::Global, "global timeout");
            }
        }
    }

    /// Kills every running job and ends every queued one as Killed.
    fn abort_all(&mut self, reason: KillReason, why: &str) {
        let running: Vec<JobId> = self.running.iter().copied().collect();
        for id in running {
            self.kill(id, reason, why.to_string());
        }
        let queued: Vec<JobId> = self
            .pending
            .drain(..)
            .chain(self.postponed.drain(..))
            .collect();
        for id in queued {
            self.finish(id, JobState::Killed, None, format!("{why} while queued"));
        }
        // finish() may have resumed postponed jobs into the queue.
        let queued: Vec<JobId> = self.pending.drain(..).collect();
        for id in queued {
            self.finish(id, JobState::Killed, None, format!("{why} while queued"));
        }
    }

    /// Blocks until every killed child has been reaped.
    fn drain_kills(&mut self) {
        while !self.running.is_empty() {
            self.reap_and_notify();
            if !self.running.is_empty() {
                self.backend.sleep(self.cfg.tick);
            }
        }
    }

    fn check_timeouts(&mut self) {
        let now = self.backend.now();
        let expired: Vec<(JobId, Duration)> = self
            .running
            .iter()
            .filter_map(|&id| {
                let e = &self.jobs[id.0];
                let limit = e.spec.timeout?;
                let started = e.started_at?;
                (e.kill_reason.is_none() && now.saturating_sub(started) >= limit)
                    .then_some((id, limit))
            })
            .collect();
        for (id, limit) in expired {
            let attempt = self.jobs[id.0].attempts;
            self.kill(
                id,
                KillReason::Timeout,
                format!("exceeded {:.3}s on attempt {attempt}", limit.as_secs_f64()),
            );
        }
    }

    fn mem_limit_mib(&self) -> f64 {
        let total = self
            .cfg
            .mem_total_mib
            .unwrap_or_else(|| self.backend.total_ram_mib());
        self.cfg.mem_limit_fraction * total
    }

    fn watchdog_if_due(&mut self) {
        let now = self.backend.now();
        if now.saturating_sub(self.last_watchdog) < self.cfg.watchdog_period {
            return;
        }
        self.last_watchdog = now;
        let mut ids = Vec::new();
        let mut samples = Vec::new();
        let candidates: Vec<JobId> = self.running.iter().copied().collect();
        for id in candidates {
            let e = &self.jobs[id.0];
            if e.kill_reason.is_some() {
                continue;
            }
            let (Some(proc), Some(started)) = (e.proc, e.started_at) else {
                continue;
            };
            let Some(rss) = self.backend.rss_mib(proc) else {
                continue;
            };
            self.jobs[id.0].last_rss = Some(rss);
            ids.push(id);
            samples.push(WorkerSample {
                rss_mib: rss,
                elapsed: now.saturating_sub(started),
            });
        }
        self.dirty = true;
        let limit = self.mem_limit_mib();
        let Some(decision) = memory_watchdog_tick(&samples, limit) else {
            return;
        };
        let victim = ids[decision.victim];
        let total: f64 = samples.iter().map(|s| s.rss_mib).sum();
        self.summary.watchdog_kills += 1;
        self.kill(
            victim,
            KillReason::Watchdog,
            format!(
                "low memory: rss={:.1} total={:.1} limit={:.1} heavy={}",
                samples[decision.victim].rss_mib, total, limit, decision.heavy
            ),
        );
        if decision.shrink_cap {
            let cap = samples.len().saturating_sub(1).max(1);
            let cap = self.worker_cap.map_or(cap, |c| c.min(cap));
            self.worker_cap = Some(cap);
            self.emit_pool(
                Level::Warn,
                EventKind::Shrink,
                format!("worker cap lowered to {cap}"),
            );
        }
    }

    fn find_slot(&self, policy: AffinityPolicy) -> Option<CpuSet> {
        self.slots
            .get(&policy)?
            .iter()
            .find(|s| s.iter().all(|c| !self.busy_cpus.contains(&c)))
            .cloned()
    }

    fn schedule(&mut self) {
        if self.running.is_empty() && self.pending.is_empty() {
            while let Some(p) = self.postponed.pop_front() {
                self.resume(p);
            }
        }
        let cap = self.worker_cap.unwrap_or(usize::MAX);
        let mut full: BTreeSet<AffinityPolicy> = BTreeSet::new();
        let mut i = 0;
        while i < self.pending.len() && self.running.len() < cap {
            let id = self.pending[i];
            let policy = self.cfg.policy_by_category[&self.jobs[id.0].spec.category];
            if full.contains(&policy) {
                i += 1;
                continue;
            }
            match self.find_slot(policy) {
                Some(cpus) => {
                    self.pending.remove(i);
                    self.start(id, cpus);
                }
                None => {
                    full.insert(policy);
                    i += 1;
                }
            }
        }
    }

    fn start(&mut self, id: JobId, cpus: CpuSet) {
        let now = self.backend.now();
        let wall = self.backend.wall_clock();
        let entry = &mut self.jobs[id.0];
        entry.attempts += 1;
        entry.state = JobState::Running;
        entry.started_at = Some(now);
        entry.started_wall = Some(wall);
        entry.last_rss = None;
        let req = SpawnRequest {
            argv: entry.spec.argv.clone(),
            workdir: Some(entry.spec.workdir.clone()),
            stdout: Some(entry.spec.stdout_path()),
            stderr: Some(entry.spec.stderr_path()),
            cpuset: Some(cpus.clone()),
        };
        self.dirty = true;
        match self.backend.spawn(&req) {
            Ok(proc) => {
                let entry = &mut self.jobs[id.0];
                entry.proc = Some(proc);
                let attempt = entry.attempts;
                for c in cpus.iter() {
                    self.busy_cpus.insert(c);
                }
                entry.cpuset = Some(cpus.clone());
                self.running.insert(id);
                let pid = self
                    .backend
                    .os_pid(proc)
                    .map(|p| format!(" pid={p}"))
                    .unwrap_or_default();
                self.emit(
                    Level::Info,
                    id,
                    EventKind::Start,
                    format!("attempt={attempt} cpus={cpus}{pid}"),
                );
                let report = self.report(id, None);
                if let Some(mut cb) = self.jobs[id.0].spec.on_start.take() {
                    if let Err(e) = guarded(|| cb(&report)) {
                        self.emit(
                            Level::Error,
                            id,
                            EventKind::CallbackError,
                            format!("on_start: {e}"),
                        );
                    }
                    self.jobs[id.0].spec.on_start = Some(cb);
                }
                if let Some(t) = self.jobs[id.0].spec.task {
                    self.refresh_tasks_from(t);
                }
            }
            Err(e) => {
                let entry = &self.jobs[id.0];
                let record = RunRecord::not_started(&entry.spec.name, entry.attempts, wall);
                self.store_record(record.clone());
                self.jobs[id.0].last_wall_s = Some(0.0);
                self.finish(
                    id,
                    JobState::Failed,
                    Some(record),
                    format!("cannot start: {e}"),
                );
            }
        }
    }

    fn report(&self, id: JobId, record: Option<RunRecord>) -> JobReport {
        let e = &self.jobs[id.0];
        JobReport {
            id,
            name: e.spec.name.clone(),
            state: e.state,
            attempts: e.attempts,
            record,
        }
    }

    /// Recomputes task states from `start` up to its root, firing task
    /// callbacks on the first start and on completion.
    fn refresh_tasks_from(&mut self, start: TaskId) {
        let mut cur = Some(start);
        while let Some(tid) = cur {
            let node = &self.tasks[tid.0];
            let job_states: Vec<JobState> =
                node.jobs.iter().map(|j| self.jobs[j.0].state).collect();
            let sub_states: Vec<TaskState> = node
                .children
                .iter()
                .map(|c| self.tasks[c.0].state)
                .collect();
            let any_started = node.started
                || job_states.iter().any(|s| *s != JobState::Pending)
                || node.children.iter().any(|c| self.tasks[c.0].started);
            let all_finished = (!node.jobs.is_empty() || !node.children.is_empty())
                && job_states.iter().all(JobState::is_terminal)
                && node.children.iter().all(|c| self.tasks[c.0].finished);
            let state = derive_state(&job_states, &sub_states, any_started);

            let node = &mut self.tasks[tid.0];
            node.state = state;
            let fire_start = any_started && !node.started;
            node.started |= any_started;
            let fire_done = all_finished && !node.finished;
            node.finished |= all_finished;
            let report = TaskReport {
                id: tid,
                name: node.name.clone(),
                state,
            };
            if fire_start {
                if let Some(mut cb) = self.tasks[tid.0].on_start.take() {
                    if let Err(e) = guarded(|| cb(&report)) {
                        self.emit_named(
                            Level::Error,
                            &report.name,
                            EventKind::CallbackError,
                            format!("task on_start: {e}"),
                        );
                    }
                    self.tasks[tid.0].on_start = Some(cb);
                }
            }
            if fire_done {
                if let Some(mut cb) = self.tasks[tid.0].on_done.take() {
                    if let Err(e) = guarded(|| cb(&report)) {
                        self.emit_named(
                            Level::Error,
                            &report.name,
                            EventKind::CallbackError,
                            format!("task on_done: {e}"),
                        );
                    }
                    self.tasks[tid.0].on_done = Some(cb);
                }
            }
            cur = self.tasks[tid.0].parent;
        }
    }

    fn emit(&mut self, level: Level, id: JobId, kind: EventKind, detail: String) {
        let name = self.jobs[id.0].spec.name.clone();
        self.emit_named(level, &name, kind, detail);
    }

    fn emit_pool(&mut self, level: Level, kind: EventKind, detail: String) {
        self.emit_named(level, "-", kind, detail);
    }

    fn emit_named(&mut self, level: Level, job: &str, kind: EventKind, detail: String) {
        let ev = PoolEvent {
            at: self.backend.now(),
            wall: self.backend.wall_clock(),
            level,
            job: job.to_string(),
            kind,
            detail,
        };
        self.events.push(ev);
    }

    fn job_view(&self, id: JobId, now: Duration) -> JobView {
        let e = &self.jobs[id.0];
        let running = e.state == JobState::Running;
        JobView {
            name: e.spec.name.clone(),
            task: e.spec.task.map(|t| self.tasks[t.0].name.clone()),
            state: e.state.to_string(),
            tstart: if e.state == JobState::Pending {
                None
            } else {
                e.started_wall.map(|w| w.timestamp_millis() as f64 / 1000.0)
            },
            duration: if running {
                e.started_at.map(|s| now.saturating_sub(s).as_secs_f64())
            } else {
                e.last_wall_s
            },
            rss: if running { e.last_rss } else { None },
            attempts: e.attempts,
        }
    }

    fn task_view(&self, tid: TaskId, now: Duration, failures: bool) -> Option<TaskView> {
        let node = &self.tasks[tid.0];
        let keep = if failures {
            node.state == TaskState::Failed
        } else {
            matches!(node.state, TaskState::Pending | TaskState::Running)
        };
        if !keep {
            return None;
        }
        let jobs = node
            .jobs
            .iter()
            .filter(|j| failures || !self.jobs[j.0].state.is_terminal())
            .map(|&j| self.job_view(j, now))
            .collect();
        let children = node
            .children
            .iter()
            .filter_map(|&c| self.task_view(c, now, failures))
            .collect();
        Some(TaskView {
            name: node.name.clone(),
            state: node.state.to_string(),
            jobs,
            children,
        })
    }

    /// Builds a consistent view of the current state.
    pub fn snapshot(&self) -> StateSnapshot {
        let now = self.backend.now();
        let jobs: Vec<JobView> = self
            .job_ids()
            .filter(|id| !self.jobs[id.0].state.is_terminal())
            .map(|id| self.job_view(id, now))
            .collect();
        let roots: Vec<TaskId> = (0..self.tasks.len())
            .map(TaskId)
            .filter(|t| self.tasks[t.0].parent.is_none())
            .collect();
        let tasks = roots
            .iter()
            .filter_map(|&t| self.task_view(t, now, false))
            .collect();
        let failures = roots
            .iter()
            .filter_map(|&t| self.task_view(t, now, true))
            .collect();
        let failed_jobs = self
            .job_ids()
            .filter(|id| self.jobs[id.0].state.is_failure() && self.jobs[id.0].spec.task.is_none())
            .map(|id| self.job_view(id, now))
            .collect();
        let count = |s: JobState| self.jobs.iter().filter(|j| j.state == s).count();
        let system = SystemSummary {
            ram_total_mib: self
                .cfg
                .mem_total_mib
                .unwrap_or_else(|| self.backend.total_ram_mib()),
            ram_used_mib: self
                .running
                .iter()
                .filter_map(|id| self.jobs[id.0].last_rss)
                .sum(),
            load_avg: crate::profiler::load_average().unwrap_or([0.0; 3]),
            running: self.running.len(),
            pending: self.pending.len(),
            postponed: self.postponed.len(),
            done: count(JobState::Done),
            failed: self.jobs.iter().filter(|j| j.state.is_failure()).count(),
            worker_cap: self.worker_cap,
        };
        StateSnapshot {
            timestamp: self.backend.wall_clock(),
            system,
            jobs,
            tasks,
            failures,
            failed_jobs,
        }
    }

    fn publish(&mut self) {
        self.snapshot.publish(self.snapshot());
        self.last_publish = self.backend.now();
        self.dirty = false;
    }
}

/// Runs a callback, converting both errors and panics into `Err`.
fn guarded<F: FnOnce() -> Result<(), String>>(f: F) -> Result<(), String> {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(payload) => Err(payload
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| payload.downcast_ref::<String>().cloned())
            .map(|s| format!("panic: {s}"))
            .unwrap_or_else(|| "panic".to_string())),
    }
}

#[cfg(test)]
mod tests;
