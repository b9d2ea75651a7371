//! Child-process resource profiling: wall time, CPU time, peak resident
//! memory and exit status per job attempt, plus the `resources.csv` log.
//!
//! Accounting comes from `wait4(2)`, which covers the direct child and any
//! descendants it reaped itself. Algorithms are therefore exec'd directly,
//! never through a shell wrapper.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::str::FromStr;
use std::time::{Duration, Instant};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::execpool::bind_affinity;
use crate::fmt::sig9;
use crate::topology::CpuSet;

/// Bit-exact header of `resources.csv`.
pub const RESOURCES_HEADER: &str = "job,attempt,wall_s,cpu_s,peak_rss_mib,exit,started";

const MIB: f64 = 1024.0 * 1024.0;

/// How a child attempt ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExitStatus {
    Code(i32),
    Signal(i32),
    /// The executable could not be started at all.
    NotStarted,
}

impl ExitStatus {
    pub fn success(&self) -> bool {
        matches!(self, ExitStatus::Code(0))
    }
}

impl fmt::Display for ExitStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExitStatus::Code(c) => write!(f, "{c}"),
            ExitStatus::Signal(s) => write!(f, "sig{s}"),
            ExitStatus::NotStarted => f.write_str("-1"),
        }
    }
}

impl FromStr for ExitStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "-1" {
            return Ok(ExitStatus::NotStarted);
        }
        if let Some(sig) = s.strip_prefix("sig") {
            return sig
                .parse()
                .map(ExitStatus::Signal)
                .map_err(|_| format!("bad signal marker '{s}'"));
        }
        s.parse()
            .map(ExitStatus::Code)
            .map_err(|_| format!("bad exit status '{s}'"))
    }
}

/// Resource profile of one job attempt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub job: String,
    pub attempt: u32,
    pub wall_s: f64,
    pub cpu_s: f64,
    pub peak_rss_mib: f64,
    pub exit: ExitStatus,
    pub started: DateTime<Utc>,
}

impl RunRecord {
    pub fn not_started(job: &str, attempt: u32, started: DateTime<Utc>) -> Self {
        RunRecord {
            job: job.to_string(),
            attempt,
            wall_s: 0.0,
            cpu_s: 0.0,
            peak_rss_mib: 0.0,
            exit: ExitStatus::NotStarted,
            started,
        }
    }

    fn csv_fields(&self) -> [String; 7] {
        [
            self.job.clone(),
            self.attempt.to_string(),
            sig9(self.wall_s),
            sig9(self.cpu_s),
            sig9(self.peak_rss_mib),
            self.exit.to_string(),
            self.started.to_rfc3339_opts(SecondsFormat::Millis, true),
        ]
    }
}

/// Append-only `resources.csv` writer.
///
/// Every record is serialized into a buffer and written with a single
/// `write` on an `O_APPEND` descriptor, so concurrent appends never
/// interleave within a line.
#[derive(Clone, Debug)]
pub struct ResourceLog {
    path: PathBuf,
}

impl ResourceLog {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        ResourceLog { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Creates the file with its header if it does not exist yet.
    pub fn ensure_header(&self) -> io::Result<()> {
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)?;
        if file.metadata()?.len() == 0 {
            file.write_all(format!("{RESOURCES_HEADER}\n").as_bytes())?;
        }
        Ok(())
    }

    pub fn append(&self, record: &RunRecord) -> io::Result<()> {
        append_record(record, &self.path)
    }
}

/// Appends one CSV line for `record`, writing the header first when the file
/// is new or empty.
pub fn append_record(record: &RunRecord, logpath: &Path) -> io::Result<()> {
    let mut file = OpenOptions::new().create(true).append(true).open(logpath)?;
    let mut buf = Vec::with_capacity(128);
    if file.metadata()?.len() == 0 {
        buf.extend_from_slice(RESOURCES_HEADER.as_bytes());
        buf.push(b'\n');
    }
    {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(&mut buf);
        w.write_record(record.csv_fields())
            .map_err(io::Error::other)?;
        w.flush()?;
    }
    file.write_all(&buf)?;
    Ok(())
}

/// Reads every record of a `resources.csv` file in file order.
pub fn read_records(logpath: &Path) -> io::Result<Vec<RunRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(logpath)
        .map_err(io::Error::other)?;
    let bad = |line: usize, what: &str| {
        io::Error::new(
            io::ErrorKind::InvalidData,
            format!("{}: line {line}: {what}", logpath.display()),
        )
    };
    let mut out = Vec::new();
    for (idx, row) in reader.records().enumerate() {
        let row = row.map_err(io::Error::other)?;
        let line = idx + 2;
        if row.len() != 7 {
            return Err(bad(line, "expected 7 fields"));
        }
        let num = |i: usize| row[i].parse::<f64>().map_err(|_| bad(line, "bad number"));
        out.push(RunRecord {
            job: row[0].to_string(),
            attempt: row[1].parse().map_err(|_| bad(line, "bad attempt"))?,
            wall_s: num(2)?,
            cpu_s: num(3)?,
            peak_rss_mib: num(4)?,
            exit: row[5].parse().map_err(|e: String| bad(line, &e))?,
            started: DateTime::parse_from_rfc3339(&row[6])
                .map_err(|_| bad(line, "bad timestamp"))?
                .with_timezone(&Utc),
        });
    }
    Ok(out)
}

/// Everything needed to start one child process.
#[derive(Clone, Debug, Default)]
pub struct SpawnRequest {
    pub argv: Vec<String>,
    pub workdir: Option<PathBuf>,
    pub stdout: Option<PathBuf>,
    pub stderr: Option<PathBuf>,
    pub cpuset: Option<CpuSet>,
}

/// OS accounting of a reaped child.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChildUsage {
    pub status: ExitStatus,
    pub cpu_s: f64,
    pub peak_rss_mib: f64,
}

/// A running child started in its own process group.
#[derive(Debug)]
pub struct ProfiledChild {
    pid: i32,
    started: Instant,
    started_at: DateTime<Utc>,
    sampled_peak_mib: f64,
    reaped: bool,
}

impl ProfiledChild {
    pub fn spawn(req: &SpawnRequest) -> io::Result<ProfiledChild> {
        let (program, args) = req
            .argv
            .split_first()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "empty argv"))?;
        let mut cmd = Command::new(program);
        cmd.args(args).stdin(Stdio::null()).process_group(0);
        if let Some(dir) = &req.workdir {
            cmd.current_dir(dir);
        }
        cmd.stdout(redirect(req.stdout.as_deref())?);
        cmd.stderr(redirect(req.stderr.as_deref())?);
        let started_at = Utc::now();
        let started = Instant::now();
        let child = cmd.spawn()?;
        let pid = child.id() as i32;
        // The std handle is dropped without waiting; reaping goes through wait4.
        drop(child);
        if let Some(cpus) = &req.cpuset {
            if let Err(e) = bind_affinity(pid, cpus) {
                log::warn!("pid {pid}: affinity {{{cpus}}} not applied: {e}");
            }
        }
        Ok(ProfiledChild {
            pid,
            started,
            started_at,
            sampled_peak_mib: 0.0,
            reaped: false,
        })
    }

    pub fn pid(&self) -> i32 {
        self.pid
    }

    pub fn started_at(&self) -> DateTime<Utc> {
        self.started_at
    }

    pub fn elapsed(&self) -> Duration {
        self.started.elapsed()
    }

    /// Current resident set size, also folded into the sampled peak.
    pub fn sample_rss_mib(&mut self) -> Option<f64> {
        if self.reaped {
            return None;
        }
        let rss = process_rss_mib(self.pid)?;
        self.sampled_peak_mib = self.sampled_peak_mib.max(rss);
        Some(rss)
    }

    /// Non-blocking reap. Returns the usage once the child has exited.
    pub fn try_reap(&mut self) -> io::Result<Option<ChildUsage>> {
        if self.reaped {
            return Err(io::Error::other("child already reaped"));
        }
        let mut status: libc::c_int = 0;
        // SAFETY: rusage is plain data filled by the kernel.
        let mut usage: libc::rusage = unsafe { std::mem::zeroed() };
        let rc = unsafe { libc::wait4(self.pid, &mut status, libc::WNOHANG, &mut usage) };
        if rc == 0 {
            return Ok(None);
        }
        if rc < 0 {
            return Err(io::Error::last_os_error());
        }
        self.reaped = true;
        let status = if libc::WIFEXITED(status) {
            ExitStatus::Code(libc::WEXITSTATUS(status))
        } else if libc::WIFSIGNALED(status) {
            ExitStatus::Signal(libc::WTERMSIG(status))
        } else {
            ExitStatus::Code(status)
        };
        let tv = |t: libc::timeval| t.tv_sec as f64 + t.tv_usec as f64 * 1e-6;
        // ru_maxrss is reported in KiB on Linux.
        let os_peak = usage.ru_maxrss as f64 / 1024.0;
        Ok(Some(ChildUsage {
            status,
            cpu_s: tv(usage.ru_utime) + tv(usage.ru_stime),
            peak_rss_mib: os_peak.max(self.sampled_peak_mib),
        }))
    }

    /// Sends `SIGKILL` to the child's process group.
    pub fn kill(&self) {
        if self.reaped {
            return;
        }
        // SAFETY: plain syscalls; the group id equals the child pid.
        unsafe {
            if libc::kill(-self.pid, libc::SIGKILL) != 0 {
                libc::kill(self.pid, libc::SIGKILL);
            }
        }
    }

    /// Blocks until the child exits, polling every `tick`.
    pub fn wait(&mut self, tick: Duration) -> io::Result<ChildUsage> {
        loop {
            if let Some(u) = self.try_reap()? {
                return Ok(u);
            }
            std::thread::sleep(tick);
        }
    }
}

fn redirect(path: Option<&Path>) -> io::Result<Stdio> {
    match path {
        Some(p) => {
            if let Some(parent) = p.parent() {
                std::fs::create_dir_all(parent)?;
            }
            Ok(Stdio::from(File::create(p)?))
        }
        None => Ok(Stdio::null()),
    }
}

/// Runs `argv` to completion (or until `timeout`) and returns its profile.
/// A missing executable yields a record with [`ExitStatus::NotStarted`].
pub fn profile_child(
    job: &str,
    attempt: u32,
    argv: &[String],
    cpuset: Option<&CpuSet>,
    timeout: Option<Duration>,
) -> RunRecord {
    let req = SpawnRequest {
        argv: argv.to_vec(),
        cpuset: cpuset.cloned(),
        ..Default::default()
    };
    let mut child = match ProfiledChild::spawn(&req) {
        Ok(c) => c,
        Err(e) => {
            log::warn!("{job}: cannot start {:?}: {e}", argv.first());
            return RunRecord::not_started(job, attempt, Utc::now());
        }
    };
    let sample_every = Duration::from_secs(1);
    let mut next_sample = Duration::ZERO;
    let mut killed = false;
    loop {
        match child.try_reap() {
            Ok(Some(usage)) => {
                return RunRecord {
                    job: job.to_string(),
                    attempt,
                    wall_s: child.elapsed().as_secs_f64(),
                    cpu_s: usage.cpu_s,
                    peak_rss_mib: usage.peak_rss_mib,
                    exit: usage.status,
                    started: child.started_at(),
                }
            }
            Ok(None) => {}
            Err(e) => {
                log::error!("{job}: wait4 failed: {e}");
                return RunRecord::not_started(job, attempt, child.started_at());
            }
        }
        let elapsed = child.elapsed();
        if elapsed >= next_sample {
            child.sample_rss_mib();
            next_sample = elapsed + sample_every;
        }
        if !killed && timeout.is_some_and(|t| elapsed >= t) {
            child.kill();
            killed = true;
        }
        std::thread::sleep(Duration::from_millis(1));
    }
}

/// Resident set size of a live process from `/proc/<pid>/statm`.
pub fn process_rss_mib(pid: i32) -> Option<f64> {
    let statm = std::fs::read_to_string(format!("/proc/{pid}/statm")).ok()?;
    let pages: f64 = statm.split_whitespace().nth(1)?.parse().ok()?;
    // SAFETY: sysconf has no preconditions.
    let page = unsafe { libc::sysconf(libc::_SC_PAGESIZE) } as f64;
    Some(pages * page / MIB)
}

/// Host memory in MiB: `(total, available)`.
pub fn system_memory_mib() -> Option<(f64, f64)> {
    let info = std::fs::read_to_string("/proc/meminfo").ok()?;
    let field = |name: &str| {
        info.lines()
            .find(|l| l.starts_with(name))
            .and_then(|l| l.split_whitespace().nth(1))
            .and_then(|v| v.parse::<f64>().ok())
            .map(|kib| kib / 1024.0)
    };
    let total = field("MemTotal:")?;
    let available = field("MemAvailable:").unwrap_or(total);
    Some((total, available))
}

/// 1, 5 and 15 minute load averages.
pub fn load_average() -> Option<[f64; 3]> {
    let text = std::fs::read_to_string("/proc/loadavg").ok()?;
    let mut it = text.split_whitespace().map(|v| v.parse::<f64>().ok());
    Some([it.next()??, it.next()??, it.next()??])
}
