use std::fmt;
use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::task::TaskId;
use crate::profiler::RunRecord;

/// Handle of a submitted job.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct JobId(pub(crate) usize);

impl JobId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum JobState {
    Pending,
    Running,
    Postponed,
    Done,
    Failed,
    TimedOut,
    Killed,
}

impl JobState {
    pub fn is_terminal(&self) -> bool {
        matches!(
            self,
            JobState::Done | JobState::Failed | JobState::TimedOut | JobState::Killed
        )
    }

    /// Terminal and not successful.
    pub fn is_failure(&self) -> bool {
        self.is_terminal() && *self != JobState::Done
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// What callbacks see about a job.
#[derive(Clone, Debug)]
pub struct JobReport {
    pub id: JobId,
    pub name: String,
    pub state: JobState,
    pub attempts: u32,
    pub record: Option<RunRecord>,
}

pub type JobCallback = Box<dyn FnMut(&JobReport) -> Result<(), String> + Send>;

/// An external process to run under the pool.
pub struct Job {
    pub(crate) name: String,
    pub(crate) argv: Vec<String>,
    pub(crate) workdir: PathBuf,
    pub(crate) stdout: Option<PathBuf>,
    pub(crate) stderr: Option<PathBuf>,
    pub(crate) category: String,
    pub(crate) timeout: Option<Duration>,
    pub(crate) restarts_on_timeout: u32,
    pub(crate) task: Option<TaskId>,
    pub(crate) on_start: Option<JobCallback>,
    pub(crate) on_done: Option<JobCallback>,
}

impl Job {
    /// A job in the default `algorithm` category, running in the current
    /// directory.
    pub fn new<S: Into<String>>(
        name: impl Into<String>,
        argv: impl IntoIterator<Item = S>,
    ) -> Self {
        Job {
            name: name.into(),
            argv: argv.into_iter().map(Into::into).collect(),
            workdir: PathBuf::from("."),
            stdout: None,
            stderr: None,
            category: "algorithm".to_string(),
            timeout: None,
            restarts_on_timeout: 0,
            task: None,
            on_start: None,
            on_done: None,
        }
    }

    pub fn workdir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.workdir = dir.into();
        self
    }

    pub fn stdout(mut self, path: impl Into<PathBuf>) -> Self {
        self.stdout = Some(path.into());
        self
    }

    pub fn stderr(mut self, path: impl Into<PathBuf>) -> Self {
        self.stderr = Some(path.into());
        self
    }

    pub fn category(mut self, category: impl Into<String>) -> Self {
        self.category = category.into();
        self
    }

    pub fn timeout(mut self, timeout: Option<Duration>) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn restarts_on_timeout(mut self, restarts: u32) -> Self {
        self.restarts_on_timeout = restarts;
        self
    }

    pub fn task(mut self, task: TaskId) -> Self {
        self.task = Some(task);
        self
    }

    pub fn on_start(
        mut self,
        cb: impl FnMut(&JobReport) -> Result<(), String> + Send + 'static,
    ) -> Self {
        self.on_start = Some(Box::new(cb));
        self
    }

    pub fn on_done(
        mut self,
        cb: impl FnMut(&JobReport) -> Result<(), String> + Send + 'static,
    ) -> Self {
        self.on_done = Some(Box::new(cb));
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn argv(&self) -> &[String] {
        &self.argv
    }

    /// `<workdir>/logs/<name>.out` unless overridden.
    pub fn stdout_path(&self) -> PathBuf {
        self.stdout
            .clone()
            .unwrap_or_else(|| self.workdir.join("logs").join(format!("{}.out", self.name)))
    }

    pub fn stderr_path(&self) -> PathBuf {
        self.stderr
            .clone()
            .unwrap_or_else(|| self.workdir.join("logs").join(format!("{}.err", self.name)))
    }
}

impl fmt::Debug for Job {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Job")
            .field("name", &self.name)
            .field("argv", &self.argv)
            .field("category", &self.category)
            .field("timeout", &self.timeout)
            .field("restarts_on_timeout", &self.restarts_on_timeout)
            .field("task", &self.task)
            .finish_non_exhaustive()
    }
}
