//! Deterministic process simulation for scheduler tests.
//!
//! A simulated job's behaviour is encoded in its argv:
//!
//! ```text
//! sim run=<secs> [rss=<mib>] [rss_at=<secs>] [exit=<code>]
//! ```
//!
//! The process exits with `exit` (default 0) after `run` seconds of virtual
//! time and holds `rss` MiB once `rss_at` seconds have elapsed (1 MiB
//! before). Any argv not starting with `sim` fails to spawn with `NotFound`.

use std::collections::BTreeMap;
use std::io;
use std::time::Duration;

use chrono::{DateTime, TimeZone, Utc};

use super::backend::{ProcId, ProcessBackend};
use crate::profiler::{ChildUsage, ExitStatus, SpawnRequest};

#[derive(Clone, Debug, PartialEq)]
pub struct SimScript {
    pub run: Duration,
    pub rss_mib: f64,
    pub rss_at: Duration,
    pub exit: i32,
}

impl SimScript {
    pub fn parse(argv: &[String]) -> io::Result<SimScript> {
        if argv.first().map(String::as_str) != Some("sim") {
            return Err(io::Error::new(
                io::ErrorKind::NotFound,
                "not a simulated executable",
            ));
        }
        let mut script = SimScript {
            run: Duration::from_secs(1),
            rss_mib: 1.0,
            rss_at: Duration::ZERO,
            exit: 0,
        };
        let bad = |a: &str| {
            io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("bad sim argument '{a}'"),
            )
        };
        for arg in &argv[1..] {
            let (key, value) = arg.split_once('=').ok_or_else(|| bad(arg))?;
            let secs = || {
                value
                    .parse::<f64>()
                    .map(Duration::from_secs_f64)
                    .map_err(|_| bad(arg))
            };
            match key {
                "run" => script.run = secs()?,
                "rss" => script.rss_mib = value.parse().map_err(|_| bad(arg))?,
                "rss_at" => script.rss_at = secs()?,
                "exit" => script.exit = value.parse().map_err(|_| bad(arg))?,
                _ => return Err(bad(arg)),
            }
        }
        Ok(script)
    }

    /// argv for this script.
    pub fn argv(&self) -> Vec<String> {
        vec![
            "sim".to_string(),
            format!("run={}", self.run.as_secs_f64()),
            format!("rss={}", self.rss_mib),
            format!("rss_at={}", self.rss_at.as_secs_f64()),
            format!("exit={}", self.exit),
        ]
    }
}

struct SimProc {
    script: SimScript,
    started: Duration,
    killed: bool,
    peak: f64,
}

impl SimProc {
    fn rss_at(&self, now: Duration) -> f64 {
        if now.saturating_sub(self.started) >= self.script.rss_at {
            self.script.rss_mib
        } else {
            1.0
        }
    }
}

/// Virtual-clock backend. `sleep` advances time instantly.
pub struct SimBackend {
    now: Duration,
    epoch: DateTime<Utc>,
    next_id: ProcId,
    procs: BTreeMap<ProcId, SimProc>,
    total_ram_mib: f64,
    spawned: Vec<SpawnRequest>,
}

impl SimBackend {
    pub fn new(total_ram_mib: f64) -> Self {
        SimBackend {
            now: Duration::ZERO,
            epoch: Utc.with_ymd_and_hms(2000, 1, 1, 0, 0, 0).unwrap(),
            next_id: 1,
            procs: BTreeMap::new(),
            total_ram_mib,
            spawned: Vec::new(),
        }
    }

    /// Every spawn request seen so far, in order.
    pub fn spawned(&self) -> &[SpawnRequest] {
        &self.spawned
    }

    pub fn live_processes(&self) -> usize {
        self.procs.len()
    }
}

impl ProcessBackend for SimBackend {
    fn now(&self) -> Duration {
        self.now
    }

    fn wall_clock(&self) -> DateTime<Utc> {
        self.epoch + chrono::Duration::from_std(self.now).expect("virtual time fits")
    }

    fn sleep(&mut self, dur: Duration) {
        self.now += dur;
        let now = self.now;
        for p in self.procs.values_mut().filter(|p| !p.killed) {
            p.peak = p.peak.max(p.rss_at(now));
        }
    }

    fn spawn(&mut self, req: &SpawnRequest) -> io::Result<ProcId> {
        let script = SimScript::parse(&req.argv)?;
        self.spawned.push(req.clone());
        let id = self.next_id;
        self.next_id += 1;
        let peak = if script.rss_at.is_zero() {
            script.rss_mib
        } else {
            1.0
        };
        self.procs.insert(
            id,
            SimProc {
                script,
                started: self.now,
                killed: false,
                peak,
            },
        );
        Ok(id)
    }

    fn try_reap(&mut self, id: ProcId) -> io::Result<Option<ChildUsage>> {
        let p = self.procs.get(&id).ok_or_else(|| {
            io::Error::new(io::ErrorKind::NotFound, format!("unknown sim process {id}"))
        })?;
        let elapsed = self.now.saturating_sub(p.started);
        let status = if p.killed {
            ExitStatus::Signal(libc::SIGKILL)
        } else if elapsed >= p.script.run {
            ExitStatus::Code(p.script.exit)
        } else {
            return Ok(None);
        };
        let usage = ChildUsage {
            status,
            cpu_s: elapsed.min(p.script.run).as_secs_f64(),
            peak_rss_mib: p.peak,
        };
        self.procs.remove(&id);
        Ok(Some(usage))
    }

    fn rss_mib(&mut self, id: ProcId) -> Option<f64> {
        let now = self.now;
        let p = self.procs.get(&id).filter(|p| !p.killed)?;
        Some(p.rss_at(now))
    }

    fn kill(&mut self, id: ProcId) {
        if let Some(p) = self.procs.get_mut(&id) {
            p.killed = true;
        }
    }

    fn os_pid(&self, _id: ProcId) -> Option<i32> {
        None
    }

    fn total_ram_mib(&self) -> f64 {
        self.total_ram_mib
    }
}
