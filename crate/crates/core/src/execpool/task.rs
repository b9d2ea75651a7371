//! Task hierarchy: a forest grouping related jobs.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::job::{JobId, JobState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaskId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskState {
    Pending,
    Running,
    Done,
    Failed,
}

impl fmt::Display for TaskState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug)]
pub struct TaskReport {
    pub id: TaskId,
    pub name: String,
    pub state: TaskState,
}

pub type TaskCallback = Box<dyn FnMut(&TaskReport) -> Result<(), String> + Send>;

pub struct Task {
    pub(crate) name: String,
    pub(crate) parent: Option<TaskId>,
    pub(crate) on_start: Option<TaskCallback>,
    pub(crate) on_done: Option<TaskCallback>,
}

impl Task {
    pub fn new(name: impl Into<String>) -> Self {
        Task {
            name: name.into(),
            parent: None,
            on_start: None,
            on_done: None,
        }
    }

    pub fn parent(mut self, parent: TaskId) -> Self {
        self.parent = Some(parent);
        self
    }

    pub fn on_start(
        mut self,
        cb: impl FnMut(&TaskReport) -> Result<(), String> + Send + 'static,
    ) -> Self {
        self.on_start = Some(Box::new(cb));
        self
    }

    pub fn on_done(
        mut self,
        cb: impl FnMut(&TaskReport) -> Result<(), String> + Send + 'static,
    ) -> Self {
        self.on_done = Some(Box::new(cb));
        self
    }
}

pub(crate) struct TaskNode {
    pub name: String,
    pub parent: Option<TaskId>,
    pub children: Vec<TaskId>,
    pub jobs: Vec<JobId>,
    pub state: TaskState,
    pub started: bool,
    pub finished: bool,
    pub on_start: Option<TaskCallback>,
    pub on_done: Option<TaskCallback>,
}

/// Derives a task state from its children's states.
///
/// Failed if any child failed terminally; Done if it has children and all
/// are Done; Running once any child started; Pending otherwise.
pub(crate) fn derive_state(
    jobs: &[JobState],
    subtasks: &[TaskState],
    any_started: bool,
) -> TaskState {
    if jobs.iter().any(JobState::is_failure) || subtasks.contains(&TaskState::Failed) {
        return TaskState::Failed;
    }
    let has_children = !jobs.is_empty() || !subtasks.is_empty();
    if has_children
        && jobs.iter().all(|s| *s == JobState::Done)
        && subtasks.iter().all(|s| *s == TaskState::Done)
    {
        return TaskState::Done;
    }
    if any_started
        || jobs.iter().any(|s| *s != JobState::Pending)
        || subtasks.iter().any(|s| *s != TaskState::Pending)
    {
        TaskState::Running
    } else {
        TaskState::Pending
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_rules() {
        use JobState as J;
        use TaskState as T;
        assert_eq!(derive_state(&[], &[], false), T::Pending);
        assert_eq!(
            derive_state(&[J::Done, J::Done], &[T::Done], false),
            T::Done
        );
        assert_eq!(derive_state(&[J::Done, J::Running], &[], false), T::Running);
        assert_eq!(derive_state(&[J::Done, J::Pending], &[], false), T::Running);
        assert_eq!(derive_state(&[J::Pending], &[], false), T::Pending);
        assert_eq!(
            derive_state(&[J::TimedOut, J::Running], &[], false),
            T::Failed
        );
        assert_eq!(derive_state(&[J::Done], &[T::Failed], false), T::Failed);
        assert_eq!(derive_state(&[J::Pending], &[], true), T::Running);
    }
}
