//! The benchmark pipeline: shuffles, algorithm runs, level unification,
//! evaluation, aggregation and export.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use crate::algos::{unify_output_dir, AlgoAdapter, AlgoError, Registry, RunInputs};
use crate::execpool::{ExecPool, Job, JobId, JobState, PoolConfig, PoolError, RunSummary, Task};
use crate::measures::Measure;
use crate::netdata::{read_nsl, shuffle, split_dataset_stem, write_nsl, NetError, NetFormat};
use crate::results::{ResultError, ResultKey, ResultStore, EFFICIENCY_MEASURES};
use crate::topology::{detect_topology, TopologyError, TopologyMap};
use crate::webmon;

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARTIAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{origin}: line {line}: {reason}")]
    Syntax {
        origin: String,
        line: usize,
        reason: String,
    },
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("bad value for '{key}': {reason}")]
    BadValue { key: String, reason: String },
    #[error("no datasets given")]
    NoDatasets,
    #[error("dataset pattern '{0}' matches no files")]
    NoMatch(String),
    #[error("no algorithms given")]
    NoAlgorithms,
    #[error("unknown measure '{0}'")]
    UnknownMeasure(String),
    #[error("measure '{measure}' needs a ground truth, missing for {dataset}")]
    MissingTruth { measure: String, dataset: String },
    #[error(transparent)]
    Algo(#[from] AlgoError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Results(#[from] ResultError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl BenchError {
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Config(_) => EXIT_CONFIG,
            _ => EXIT_PARTIAL,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    /// Network files or glob patterns.
    pub datasets: Vec<String>,
    pub shuffles: u64,
    /// Number of output levels kept per algorithm run.
    pub levels: usize,
    pub algorithms: Vec<String>,
    pub measures: Vec<String>,
    pub timeout: Option<Duration>,
    pub global_timeout: Option<Duration>,
    pub restarts: u32,
    pub mem_limit_fraction: f64,
    pub seed: u64,
    pub outdir: PathBuf,
    /// 0 disables the web monitor.
    pub webport: u16,
    pub topology: Option<PathBuf>,
    pub max_workers: Option<usize>,
    /// Executable providing the `randcommuns` and `measure` subcommands.
    pub exe: Option<PathBuf>,
    /// Command templates of external algorithms by name.
    pub algorithm_commands: BTreeMap<String, String>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            datasets: Vec::new(),
            shuffles: 4,
            levels: 10,
            algorithms: Vec::new(),
            measures: Vec::new(),
            timeout: None,
            global_timeout: None,
            restarts: 0,
            mem_limit_fraction: 0.9,
            seed: 0,
            outdir: PathBuf::from("results"),
            webport: 0,
            topology: None,
            max_workers: None,
            exe: None,
            algorithm_commands: BTreeMap::new(),
        }
    }
}

fn list(value: &str) -> Vec<String> {
    value
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.into(),
        reason: e.to_string(),
    })
}

fn parse_secs(key: &str, value: &str) -> Result<Option<Duration>, ConfigError> {
    let secs: f64 = parse_num(key, value)?;
    if !secs.is_finite() || secs < 0.0 {
        return Err(ConfigError::BadValue {
            key: key.into(),
            reason: "expected seconds >= 0".into(),
        });
    }
    Ok((secs > 0.0).then(|| Duration::from_secs_f64(secs)))
}

impl BenchConfig {
    /// Sets one option from its textual form. Config files and command-line
    /// flags both go through here; `algorithm.<name>` keys define
    /// external algorithms by command template.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        match key {
            "datasets" => self.datasets = list(value),
            "shuffles" => self.shuffles = parse_num(key, value)?,
            "levels" => self.levels = parse_num(key, value)?,
            "algorithms" => self.algorithms = list(value),
            "measures" => self.measures = list(value),
            "timeout" => self.timeout = parse_secs(key, value)?,
            "global_timeout" => self.global_timeout = parse_secs(key, value)?,
            "restarts" => self.restarts = parse_num(key, value)?,
            "mem_limit" => self.mem_limit_fraction = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "outdir" => self.outdir = PathBuf::from(value),
            "webport" => self.webport = parse_num(key, value)?,
            "topology" => self.topology = Some(PathBuf::from(value)),
            "workers" => self.max_workers = Some(parse_num(key, value)?),
            "exe" => self.exe = Some(PathBuf::from(value)),
            _ => match key.strip_prefix("algorithm.") {
                Some(name) if !name.is_empty() => {
                    self.algorithm_commands
                        .insert(name.to_string(), value.to_string());
                }
                _ => return Err(ConfigError::UnknownKey(key.to_string())),
            },
        }
        Ok(())
    }

    /// Applies a `key = value` file; `#` starts a comment.
    pub fn apply_file_text(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                origin: origin.to_string(),
                line: idx + 1,
                reason: "expected 'key = value'".into(),
            })?;
            self.set(k.trim(), v).map_err(|e| ConfigError::Syntax {
                origin: origin.to_string(),
                line: idx + 1,
                reason: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = fs::read_to_string(path)?;
        self.apply_file_text(&text, &path.display().to_string())
    }

    fn exe(&self) -> io::Result<PathBuf> {
        match &self.exe {
            Some(p) => Ok(p.clone()),
            None => std::env::current_exe(),
        }
    }

    pub fn registry(&self) -> Result<Registry, ConfigError> {
        let mut reg = Registry::new();
        reg.register(AlgoAdapter::randcommuns(self.exe()?))?;
        for (name, template) in &self.algorithm_commands {
            if name == "randcommuns" {
                continue;
            }
            reg.register(AlgoAdapter::template(name.clone(), template)?)?;
        }
        Ok(reg)
    }

    pub fn measure_list(&self) -> Result<Vec<Measure>, ConfigError> {
        if self.measures.is_empty() {
            return Ok(Measure::ALL.to_vec());
        }
        let mut out = Vec::new();
        for m in &self.measures {
            let m: Measure = m
                .parse()
                .map_err(|_| ConfigError::UnknownMeasure(m.clone()))?;
            if !out.contains(&m) {
                out.push(m);
            }
        }
        Ok(out)
    }
}

/// One input network with its optional ground truth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub path: PathBuf,
    /// `<nettype>[^<instance>]`
    pub stem: String,
    pub nettype: String,
    pub instance: Option<String>,
    pub truth: Option<PathBuf>,
}

impl Dataset {
    pub fn from_path(path: &Path) -> Result<Dataset, ConfigError> {
        NetFormat::from_path(path)?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .filter(|s| !s.is_empty() && !s.contains(char::is_whitespace))
            .ok_or_else(|| ConfigError::BadValue {
                key: "datasets".into(),
                reason: format!("unusable file name {}", path.display()),
            })?;
        let (nettype, instance) = split_dataset_stem(&stem);
        let truth = path.with_extension("cnl");
        Ok(Dataset {
            path: path.to_path_buf(),
            stem,
            nettype,
            instance,
            truth: truth.is_file().then_some(truth),
        })
    }
}

/// Expands dataset paths and glob patterns, sorted and deduplicated.
pub fn resolve_datasets(patterns: &[String]) -> Result<Vec<Dataset>, ConfigError> {
    if patterns.is_empty() {
        return Err(ConfigError::NoDatasets);
    }
    let mut paths = BTreeSet::new();
    for pat in patterns {
        let matched: Vec<PathBuf> = match glob::glob(pat) {
            Ok(it) => it.filter_map(Result::ok).filter(|p| p.is_file()).collect(),
            Err(e) => {
                return Err(ConfigError::BadValue {
                    key: "datasets".into(),
                    reason: e.to_string(),
                })
            }
        };
        if matched.is_empty() {
            return Err(ConfigError::NoMatch(pat.clone()));
        }
        paths.extend(matched);
    }
    let sets: Vec<Dataset> = paths
        .iter()
        .map(|p| Dataset::from_path(p))
        .collect::<Result<_, _>>()?;
    let mut stems = BTreeSet::new();
    for d in &sets {
        if !stems.insert(&d.stem) {
            return Err(ConfigError::BadValue {
                key: "datasets".into(),
                reason: format!("two datasets share the name '{}'", d.stem),
            });
        }
    }
    Ok(sets)
}

/// Validated inputs of one benchmark run.
#[derive(Debug)]
pub struct Plan {
    pub datasets: Vec<Dataset>,
    pub algorithms: Vec<AlgoAdapter>,
    pub measures: Vec<Measure>,
    pub topology: TopologyMap,
}

pub fn plan(cfg: &BenchConfig) -> Result<Plan, ConfigError> {
    let bad = |key: &str, reason: &str| ConfigError::BadValue {
        key: key.into(),
        reason: reason.into(),
    };
    if cfg.shuffles == 0 {
        return Err(bad("shuffles", "must be at least 1"));
    }
    if cfg.levels == 0 {
        return Err(bad("levels", "must be at least 1"));
    }
    if !(cfg.mem_limit_fraction > 0.0 && cfg.mem_limit_fraction <= 1.0) {
        return Err(bad("mem_limit", "must be in (0, 1]"));
    }
    if cfg.algorithms.is_empty() {
        return Err(ConfigError::NoAlgorithms);
    }
    let registry = cfg.registry()?;
    let algorithms: Vec<AlgoAdapter> = cfg
        .algorithms
        .iter()
        .map(|a| registry.lookup(a).cloned())
        .collect::<Result<_, _>>()?;
    let measures = cfg.measure_list()?;
    let datasets = resolve_datasets(&cfg.datasets)?;
    for d in &datasets {
        if d.truth.is_some() {
            continue;
        }
        if let Some(m) = measures.iter().find(|m| m.needs_truth()) {
            return Err(ConfigError::MissingTruth {
                measure: m.name().into(),
                dataset: d.stem.clone(),
            });
        }
        if let Some(a) = algorithms.iter().find(|a| a.needs_truth()) {
            return Err(ConfigError::MissingTruth {
                measure: a.name().into(),
                dataset: d.stem.clone(),
            });
        }
    }
    let topology = match &cfg.topology {
        Some(p) => TopologyMap::from_file(p)?,
        None => detect_topology(),
    };
    Ok(Plan {
        datasets,
        algorithms,
        measures,
        topology,
    })
}

/// Files and directories of a run under `outdir`.
#[derive(Clone, Debug)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunLayout { root: root.into() }
    }
    pub fn shuffle_net(&self, d: &Dataset, k: u64, ext: &str) -> PathBuf {
        self.root
            .join("data")
            .join(&d.stem)
            .join(format!("{}^{k}.{ext}", d.stem))
    }
    pub fn algo_dir(&self, alg: &str, d: &Dataset, k: u64) -> PathBuf {
        self.root
            .join("algs")
            .join(alg)
            .join(&d.stem)
            .join(k.to_string())
    }
    pub fn log_base(&self, kind: &str, job: &str) -> PathBuf {
        self.root
            .join("logs")
            .join(kind)
            .join(job.replace('/', "_"))
    }
    pub fn measure_out(&self, alg: &str, d: &Dataset, k: u64, m: Measure, level: usize) -> PathBuf {
        self.root
            .join("measures")
            .join(alg)
            .join(&d.stem)
            .join(k.to_string())
            .join(format!("{}^{level}.csv", m.name()))
    }
    pub fn results(&self) -> PathBuf {
        self.root.join("results")
    }
    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.csv")
    }
    pub fn efficiency(&self) -> PathBuf {
        self.root.join("efficiency.csv")
    }
    pub fn events(&self) -> PathBuf {
        self.root.join("events.log")
    }
    pub fn resources(&self) -> PathBuf {
        self.root.join("resources.csv")
    }
    pub fn state(&self) -> PathBuf {
        self.root.join("state.json")
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchOutcome {
    pub exit_code: i32,
    pub algorithm_jobs: usize,
    pub measure_jobs: usize,
    /// Failed jobs plus post-processing failures.
    pub failures: usize,
    pub interrupted: bool,
    pub algorithm_run: RunSummary,
    pub measure_run: RunSummary,
}

/// Writes the shuffled copies `1..=shuffles` of every dataset.
pub fn generate_shuffles(
    datasets: &[Dataset],
    shuffles: u64,
    seed: u64,
    layout: &RunLayout,
) -> Result<BTreeMap<(String, u64), PathBuf>, BenchError> {
    let mut out = BTreeMap::new();
    for d in datasets {
        let net = read_nsl(&d.path).map_err(ConfigError::from)?;
        let ext = if net.directed { "nsa" } else { "nse" };
        for k in 1..=shuffles {
            let path = layout.shuffle_net(d, k, ext);
            fs::create_dir_all(path.parent().expect("shuffle path has a parent"))?;
            write_nsl(&shuffle(&net, k, seed), &path)?;
            out.insert((d.stem.clone(), k), path);
        }
    }
    Ok(out)
}

struct AlgoRun {
    job: JobId,
    alg: String,
    dataset: usize,
    shuffle: u64,
}

struct MeasureRun {
    job: JobId,
    alg: String,
    dataset: usize,
    shuffle: u64,
    level: usize,
    measure: Measure,
    out: PathBuf,
}

fn key(alg: &str, d: &Dataset, shuffle: u64, level: u32, measure: &str) -> ResultKey {
    ResultKey {
        algorithm: alg.to_string(),
        nettype: d.nettype.clone(),
        instance: d.instance.clone(),
        shuffle,
        level,
        measure: measure.to_string(),
    }
}

fn read_measure_value(path: &Path, measure: Measure) -> Option<f64> {
    let text = fs::read_to_string(path).ok()?;
    let line = text.lines().rev().find(|l| !l.trim().is_empty())?;
    let (name, value) = line.split_once(',')?;
    if name.trim() != measure.name() {
        return None;
    }
    value.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

fn remove_if_exists(path: &Path) -> io::Result<()> {
    match fs::symlink_metadata(path) {
        Ok(m) if m.is_dir() => fs::remove_dir_all(path),
        Ok(_) => fs::remove_file(path),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(e),
    }
}

/// Runs the whole pipeline. `interrupt` stops the run when set.
pub fn run_benchmark(
    cfg: &BenchConfig,
    interrupt: Option<Arc<AtomicBool>>,
) -> Result<BenchOutcome, BenchError> {
    let plan = plan(cfg)?;
    let exe = cfg.exe()?;
    let layout = RunLayout::new(&cfg.outdir);
    fs::create_dir_all(&layout.root)?;

    log::info!(
        "{} datasets, {} shuffles, algorithms {:?}, measures {:?}",
        plan.datasets.len(),
        cfg.shuffles,
        cfg.algorithms,
        plan.measures.iter().map(|m| m.name()).collect::<Vec<_>>()
    );
    let nets = generate_shuffles(&plan.datasets, cfg.shuffles, cfg.seed, &layout)?;

    let pool_cfg = PoolConfig {
        mem_limit_fraction: cfg.mem_limit_fraction,
        global_timeout: cfg.global_timeout,
        max_workers_override: cfg.max_workers,
        ..PoolConfig::default()
    };
    let mut pool = ExecPool::os(pool_cfg, &plan.topology)?
        .with_event_log(&layout.events())?
        .with_resource_log(&layout.resources())?;
    if let Some(flag) = interrupt {
        pool = pool.with_interrupt(flag);
    }
    let server = match cfg.webport {
        0 => None,
        port => Some(webmon::serve(pool.snapshot_handle(), "0.0.0.0", port)?),
    };
    let store = ResultStore::open(layout.results())?;
    let mut outcome = BenchOutcome::default();

    // Algorithm runs.
    let mut algo_runs = Vec::new();
    for adapter in &plan.algorithms {
        let alg = adapter.name().to_string();
        let root = pool.add_task(Task::new(alg.clone()))?;
        for (di, d) in plan.datasets.iter().enumerate() {
            let task = pool.add_task(Task::new(format!("{alg}/{}", d.stem)).parent(root))?;
            for k in 1..=cfg.shuffles {
                let dir = layout.algo_dir(&alg, d, k);
                remove_if_exists(&dir)?;
                remove_if_exists(&dir.with_file_name(format!("{k}-orig")))?;
                fs::create_dir_all(&dir)?;
                let inputs = RunInputs {
                    net: &nets[&(d.stem.clone(), k)],
                    outdir: &dir,
                    seed: cfg.seed.wrapping_add(k),
                    truth: d.truth.as_deref(),
                };
                let argv = adapter
                    .build_argv(&inputs, adapter.defaults())
                    .map_err(ConfigError::from)?;
                let name = format!("{alg}/{}/{k}", d.stem);
                let logs = layout.log_base("algs", &name);
                fs::create_dir_all(logs.parent().expect("log path has a parent"))?;
                let job = Job::new(name, argv)
                    .category(adapter.category())
                    .timeout(cfg.timeout)
                    .restarts_on_timeout(cfg.restarts)
                    .stdout(logs.with_extension("out"))
                    .stderr(logs.with_extension("err"))
                    .task(task);
                algo_runs.push(AlgoRun {
                    job: pool.submit(job)?,
                    alg: alg.clone(),
                    dataset: di,
                    shuffle: k,
                });
            }
        }
    }
    outcome.algorithm_jobs = algo_runs.len();
    outcome.algorithm_run = pool.run_loop()?;
    outcome.failures += outcome.algorithm_run.failures();
    outcome.interrupted = outcome.algorithm_run.interrupted;

    // Efficiency values from the last attempt of each successful run.
    let mut last_record = BTreeMap::new();
    for r in pool.records() {
        last_record.insert(r.job.clone(), r.clone());
    }

    // Unification and evaluation.
    let mut measure_runs = Vec::new();
    if !outcome.interrupted {
        for run in &algo_runs {
            if pool.job_state(run.job) != JobState::Done {
                continue;
            }
            let d = &plan.datasets[run.dataset];
            if let Some(rec) = last_record.get(pool.job_name(run.job)) {
                let keys: Vec<ResultKey> = EFFICIENCY_MEASURES
                    .iter()
                    .map(|m| key(&run.alg, d, run.shuffle, 0, m))
                    .collect();
                store.record_many(&keys, &[rec.wall_s, rec.cpu_s, rec.peak_rss_mib])?;
            }
            let dir = layout.algo_dir(&run.alg, d, run.shuffle);
            let levels = match unify_output_dir(&dir, cfg.levels) {
                Ok(l) => l,
                Err(e) => {
                    log::error!("{}: {e}", pool.job_name(run.job));
                    outcome.failures += 1;
                    continue;
                }
            };
            let task = pool.add_task(Task::new(format!("eval/{}", pool.job_name(run.job))))?;
            for (level, cl) in levels.iter().enumerate() {
                for &m in &plan.measures {
                    let out = layout.measure_out(&run.alg, d, run.shuffle, m, level);
                    fs::create_dir_all(out.parent().expect("measure output has a parent"))?;
                    remove_if_exists(&out)?;
                    let mut argv = vec![
                        exe.display().to_string(),
                        "measure".to_string(),
                        m.name().to_string(),
                        "--cl".to_string(),
                        cl.display().to_string(),
                        "--out".to_string(),
                        out.display().to_string(),
                    ];
                    if m.needs_truth() {
                        let truth = d.truth.as_ref().expect("checked while planning");
                        argv.extend(["--truth".to_string(), truth.display().to_string()]);
                    } else {
                        let net = &nets[&(d.stem.clone(), run.shuffle)];
                        argv.extend(["--net".to_string(), net.display().to_string()]);
                    }
                    let name = format!(
                        "{}/{}/{}/{}/{level}",
                        m.name(),
                        run.alg,
                        d.stem,
                        run.shuffle
                    );
                    let logs = layout.log_base("measures", &name);
                    fs::create_dir_all(logs.parent().expect("log path has a parent"))?;
                    let job = Job::new(name, argv)
                        .category("measure")
                        .timeout(cfg.timeout)
                        .stdout(logs.with_extension("out"))
                        .stderr(logs.with_extension("err"))
                        .task(task);
                    measure_runs.push(MeasureRun {
                        job: pool.submit(job)?,
                        alg: run.alg.clone(),
                        dataset: run.dataset,
                        shuffle: run.shuffle,
                        level,
                        measure: m,
                        out,
                    });
                }
            }
        }
        outcome.measure_jobs = measure_runs.len();
        if !measure_runs.is_empty() {
            outcome.measure_run = pool.run_loop()?;
            outcome.failures += outcome.measure_run.failures();
            outcome.interrupted |= outcome.measure_run.interrupted;
        }
    }

    for run in &measure_runs {
        if pool.job_state(run.job) != JobState::Done {
            continue;
        }
        let d = &plan.datasets[run.dataset];
        match read_measure_value(&run.out, run.measure) {
            Some(v) => {
                store.record(
                    &key(
                        &run.alg,
                        d,
                        run.shuffle,
                        run.level as u32,
                        run.measure.name(),
                    ),
                    v,
                )?;
            }
            None => {
                log::error!(
                    "{}: no value in {}",
                    pool.job_name(run.job),
                    run.out.display()
                );
                outcome.failures += 1;
            }
        }
    }

    store.export_summary(&layout.summary(), Some(&layout.efficiency()))?;
    let snapshot = pool.snapshot();
    fs::write(
        layout.state(),
        serde_json::to_string_pretty(&snapshot).map_err(io::Error::from)?,
    )?;
    drop(server);

    outcome.exit_code = if outcome.failures > 0 || outcome.interrupted {
        EXIT_PARTIAL
    } else {
        EXIT_OK
    };
    log::info!(
        "{} algorithm jobs, {} measure jobs, {} failures; summary in {}",
        outcome.algorithm_jobs,
        outcome.measure_jobs,
        outcome.failures,
        layout.summary().display()
    );
    Ok(outcome)
}
