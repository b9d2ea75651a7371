//! Pool lifecycle events and the line-oriented event log
//! (`timestamp level jobname event detail`).

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use chrono::{DateTime, SecondsFormat, Utc};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Level {
    Info,
    Warn,
    Error,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Info => "INFO",
            Level::Warn => "WARN",
            Level::Error => "ERROR",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EventKind {
    Submit,
    Start,
    Done,
    Fail,
    Timeout,
    Restart,
    Postpone,
    Resume,
    Kill,
    Shrink,
    CallbackError,
    Warning,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::Submit => "submit",
            EventKind::Start => "start",
            EventKind::Done => "done",
            EventKind::Fail => "fail",
            EventKind::Timeout => "timeout",
            EventKind::Restart => "restart",
            EventKind::Postpone => "postpone",
            EventKind::Resume => "resume",
            EventKind::Kill => "kill",
            EventKind::Shrink => "shrink",
            EventKind::CallbackError => "callback-error",
            EventKind::Warning => "warning",
        }
    }

    /// Events after which the job no longer occupies a worker slot.
    pub fn releases_slot(&self) -> bool {
        matches!(
            self,
            EventKind::Done
                | EventKind::Fail
                | EventKind::Timeout
                | EventKind::Restart
                | EventKind::Postpone
                | EventKind::Kill
        )
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        const ALL: [EventKind; 12] = [
            EventKind::Submit,
            EventKind::Start,
            EventKind::Done,
            EventKind::Fail,
            EventKind::Timeout,
            EventKind::Restart,
            EventKind::Postpone,
            EventKind::Resume,
            EventKind::Kill,
            EventKind::Shrink,
            EventKind::CallbackError,
            EventKind::Warning,
        ];
        ALL.into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown event '{s}'"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolEvent {
    /// Scheduler clock at emission.
    pub at: Duration,
    pub wall: DateTime<Utc>,
    pub level: Level,
    /// `-` for pool-level events.
    pub job: String,
    pub kind: EventKind,
    pub detail: String,
}

impl PoolEvent {
    pub fn to_line(&self) -> String {
        let detail = self.detail.replace('\n', " ");
        format!(
            "{} {} {} {} {}",
            self.wall.to_rfc3339_opts(SecondsFormat::Millis, true),
            self.level,
            self.job,
            self.kind,
            detail
        )
        .trim_end()
        .to_string()
    }
}

/// A parsed event-log line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogLine {
    pub timestamp: String,
    pub level: String,
    pub job: String,
    pub kind: EventKind,
    pub detail: String,
}

pub fn parse_log_line(line: &str) -> Option<LogLine> {
    let mut it = line.splitn(5, ' ');
    let timestamp = it.next()?.to_string();
    let level = it.next()?.to_string();
    let job = it.next()?.to_string();
    let kind = it.next()?.parse().ok()?;
    let detail = it.next().unwrap_or("").to_string();
    Some(LogLine {
        timestamp,
        level,
        job,
        kind,
        detail,
    })
}

/// In-memory event trace, optionally mirrored to a log file one line per
/// event.
#[derive(Debug, Default)]
pub struct EventLog {
    events: Vec<PoolEvent>,
    file: Option<File>,
}

impl EventLog {
    pub fn to_file(path: &Path) -> io::Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(EventLog {
            events: Vec::new(),
            file: Some(file),
        })
    }

    pub fn push(&mut self, event: PoolEvent) {
        match event.level {
            Level::Info => log::debug!("{} {} {}", event.job, event.kind, event.detail),
            Level::Warn => log::warn!("{} {} {}", event.job, event.kind, event.detail),
            Level::Error => log::error!("{} {} {}", event.job, event.kind, event.detail),
        }
        if let Some(f) = &mut self.file {
            let mut line = event.to_line();
            line.push('\n');
            if let Err(e) = f.write_all(line.as_bytes()) {
                log::error!("event log write failed: {e}");
            }
        }
        self.events.push(event);
    }

    pub fn events(&self) -> &[PoolEvent] {
        &self.events
    }
}
