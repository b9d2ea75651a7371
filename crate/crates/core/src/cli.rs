//! Command-line front end.

use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use crate::algos::randcommuns;
use crate::bench::{run_benchmark, BenchConfig, RunLayout, EXIT_CONFIG, EXIT_OK, EXIT_PARTIAL};
use crate::clustering::{read_cnl, write_cnl};
use crate::fmt::sig9;
use crate::measures::{evaluate, Measure};
use crate::netdata::{gen_planted_partition, read_nsl, shuffle, write_nsl};
use crate::results::ResultStore;
use crate::webmon::{self, SnapshotHandle, StateSnapshot};

#[derive(Parser, Debug)]
#[command(
    name = "clusterbench",
    version,
    about = "Benchmarking of clustering algorithms on networks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run the full benchmark.
    Run(RunArgs),
    /// Generate a planted-partition network with its ground truth.
    Gen(GenArgs),
    /// Write shuffled copies of a network.
    Shuffle(ShuffleArgs),
    /// Evaluate one clustering and append `measure,value` to a CSV file.
    Measure(MeasureArgs),
    /// Random connected clusters shaped after a ground truth.
    Randcommuns(RandcommunsArgs),
    /// Browse the final state of a finished run.
    Serve(ServeArgs),
    /// Rebuild the summary files of a run from its result store.
    Export(ExportArgs),
}

#[derive(Args, Debug, Default)]
pub struct RunArgs {
    /// Network files or glob patterns; `<nettype>[^<instance>].nse` with an
    /// optional `.cnl` ground truth next to each.
    pub datasets: Vec<String>,
    /// `key = value` config file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub shuffles: Option<u64>,
    /// Output levels kept per run.
    #[arg(long)]
    pub levels: Option<usize>,
    /// Comma-separated algorithm names.
    #[arg(long)]
    pub algorithms: Option<String>,
    /// Comma-separated measure names (default: all).
    #[arg(long)]
    pub measures: Option<String>,
    /// External algorithm as `name=command template`, e.g.
    /// `louvain=bin/louvain {net} {outdir}`.
    #[arg(long = "algorithm", value_name = "NAME=TEMPLATE")]
    pub algorithm_commands: Vec<String>,
    /// Per-job timeout, seconds.
    #[arg(long)]
    pub timeout: Option<f64>,
    /// Whole-run timeout, seconds.
    #[arg(long)]
    pub global_timeout: Option<f64>,
    /// Restarts of a job after a timeout.
    #[arg(long)]
    pub restarts: Option<u32>,
    /// Fraction of physical RAM the workers may use.
    #[arg(long)]
    pub mem_limit: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub outdir: Option<PathBuf>,
    /// Web monitor port; 0 disables it.
    #[arg(long)]
    pub webport: Option<u16>,
    /// Manual topology file, one `numa_id core_id cpu_id` line per CPU.
    #[arg(long)]
    pub topology: Option<PathBuf>,
    /// Upper bound on concurrent workers.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Executable providing the `measure` and `randcommuns` subcommands.
    #[arg(long)]
    pub exe: Option<PathBuf>,
}

impl RunArgs {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut kv = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                kv.push((k.to_string(), v));
            }
        };
        put(
            "datasets",
            (!self.datasets.is_empty()).then(|| self.datasets.join(",")),
        );
        put("shuffles", self.shuffles.map(|v| v.to_string()));
        put("levels", self.levels.map(|v| v.to_string()));
        put("algorithms", self.algorithms.clone());
        put("measures", self.measures.clone());
        put("timeout", self.timeout.map(|v| v.to_string()));
        put("global_timeout", self.global_timeout.map(|v| v.to_string()));
        put("restarts", self.restarts.map(|v| v.to_string()));
        put("mem_limit", self.mem_limit.map(|v| v.to_string()));
        put("seed", self.seed.map(|v| v.to_string()));
        put(
            "outdir",
            self.outdir.as_ref().map(|p| p.display().to_string()),
        );
        put("webport", self.webport.map(|v| v.to_string()));
        put(
            "topology",
            self.topology.as_ref().map(|p| p.display().to_string()),
        );
        put("workers", self.workers.map(|v| v.to_string()));
        put("exe", self.exe.as_ref().map(|p| p.display().to_string()));
        kv
    }

    /// Defaults, then the config file, then flags.
    pub fn to_config(&self) -> Result<BenchConfig, String> {
        let mut cfg = BenchConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)
                .map_err(|e| format!("{}: {e}", path.display()))?;
        }
        for (k, v) in self.overrides() {
            cfg.set(&k, &v).map_err(|e| e.to_string())?;
        }
        for spec in &self.algorithm_commands {
            let (name, template) = spec
                .split_once('=')
                .ok_or_else(|| format!("--algorithm expects NAME=TEMPLATE, got '{spec}'"))?;
            cfg.set(&format!("algorithm.{}", name.trim()), template)
                .map_err(|e| e.to_string())?;
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub nodes: usize,
    #[arg(long)]
    pub clusters: usize,
    /// Edge probability inside a cluster.
    #[arg(long, default_value_t = 0.3)]
    pub p_in: f64,
    /// Edge probability between clusters.
    #[arg(long, default_value_t = 0.01)]
    pub p_out: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub outdir: PathBuf,
    /// File stem; defaults to `planted^<seed>`.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Args, Debug)]
pub struct ShuffleArgs {
    #[arg(long)]
    pub net: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub count: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub outdir: PathBuf,
}

#[derive(Args, Debug)]
pub struct MeasureArgs {
    pub name: String,
    #[arg(long)]
    pub net: Option<PathBuf>,
    #[arg(long)]
    pub cl: PathBuf,
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// CSV file to append to; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RandcommunsArgs {
    #[arg(long)]
    pub net: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// Output directory of a run.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub webport: u16,
    #[arg(long, default_value = "0.0.0.0")]
    pub host: String,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    /// Output directory of a run.
    #[arg(long)]
    pub run: PathBuf,
}

fn interrupt_flag() -> io::Result<Arc<AtomicBool>> {
    let flag = Arc::new(AtomicBool::new(false));
    for sig in [signal_hook::consts::SIGINT, signal_hook::consts::SIGTERM] {
        signal_hook::flag::register(sig, Arc::clone(&flag))?;
    }
    Ok(flag)
}

fn fail(msg: impl std::fmt::Display) -> i32 {
    eprintln!("error: {msg}");
    EXIT_PARTIAL
}

pub fn run(cli: Cli) -> i32 {
    match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::Gen(args) => cmd_gen(&args).unwrap_or_else(fail),
        Command::Shuffle(args) => cmd_shuffle(&args).unwrap_or_else(fail),
        Command::Measure(args) => cmd_measure(&args).unwrap_or_else(fail),
        Command::Randcommuns(args) => cmd_randcommuns(&args).unwrap_or_else(fail),
        Command::Serve(args) => cmd_serve(&args).unwrap_or_else(fail),
        Command::Export(args) => cmd_export(&args).unwrap_or_else(fail),
    }
}

fn cmd_run(args: &RunArgs) -> i32 {
    let cfg = match args.to_config() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let flag = match interrupt_flag() {
        Ok(f) => f,
        Err(e) => return fail(e),
    };
    match run_benchmark(&cfg, Some(flag)) {
        Ok(outcome) => outcome.exit_code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn cmd_gen(args: &GenArgs) -> Result<i32, String> {
    let (net, truth) =
        gen_planted_partition(args.nodes, args.clusters, args.p_in, args.p_out, args.seed)
            .map_err(|e| e.to_string())?;
    let name = args
        .name
        .clone()
        .unwrap_or_else(|| format!("planted^{}", args.seed));
    fs::create_dir_all(&args.outdir).map_err(|e| e.to_string())?;
    let net_path = args.outdir.join(format!("{name}.nse"));
    let truth_path = args.outdir.join(format!("{name}.cnl"));
    write_nsl(&net, &net_path).map_err(|e| e.to_string())?;
    write_cnl(&truth, &truth_path).map_err(|e| e.to_string())?;
    println!("{}\n{}", net_path.display(), truth_path.display());
    Ok(EXIT_OK)
}

fn cmd_shuffle(args: &ShuffleArgs) -> Result<i32, String> {
    let net = read_nsl(&args.net).map_err(|e| e.to_string())?;
    let stem = args
        .net
        .file_stem()
        .ok_or("network path has no file name")?
        .to_string_lossy();
    let ext = if net.directed { "nsa" } else { "nse" };
    fs::create_dir_all(&args.outdir).map_err(|e| e.to_string())?;
    for k in 1..=args.count {
        let path = args.outdir.join(format!("{stem}^{k}.{ext}"));
        write_nsl(&shuffle(&net, k, args.seed), &path).map_err(|e| e.to_string())?;
        println!("{}", path.display());
    }
    Ok(EXIT_OK)
}

fn cmd_measure(args: &MeasureArgs) -> Result<i32, String> {
    let m: Measure = args
        .name
        .parse()
        .map_err(|e: crate::measures::MeasureError| e.to_string())?;
    let net = args
        .net
        .as_deref()
        .map(read_nsl)
        .transpose()
        .map_err(|e| e.to_string())?;
    let cl = read_cnl(&args.cl).map_err(|e| e.to_string())?;
    let truth = args
        .truth
        .as_deref()
        .map(read_cnl)
        .transpose()
        .map_err(|e| e.to_string())?;
    let r = evaluate(m, net.as_ref(), &cl, truth.as_ref()).map_err(|e| e.to_string())?;
    let row = format!("{},{}\n", m.name(), sig9(r.value));
    match &args.out {
        Some(path) => append_row(path, &row).map_err(|e| format!("{}: {e}", path.display()))?,
        None => print!("{row}"),
    }
    Ok(EXIT_OK)
}

fn append_row(path: &Path, row: &str) -> io::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?
        .write_all(row.as_bytes())
}

fn cmd_randcommuns(args: &RandcommunsArgs) -> Result<i32, String> {
    let net = read_nsl(&args.net).map_err(|e| e.to_string())?;
    let truth = read_cnl(&args.truth).map_err(|e| e.to_string())?;
    let out = randcommuns(&net, &truth, args.seed);
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| e.to_string())?;
    }
    write_cnl(&out, &args.out).map_err(|e| e.to_string())?;
    Ok(EXIT_OK)
}

fn cmd_serve(args: &ServeArgs) -> Result<i32, String> {
    let path = RunLayout::new(&args.run).state();
    let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let snap: StateSnapshot =
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    let flag = interrupt_flag().map_err(|e| e.to_string())?;
    let server = webmon::serve(SnapshotHandle::new(snap), &args.host, args.webport)
        .map_err(|e| e.to_string())?;
    println!(
        "serving {} on http://{}/",
        args.run.display(),
        server.local_addr()
    );
    while !flag.load(Ordering::SeqCst) {
        std::thread::sleep(Duration::from_millis(100));
    }
    server.shutdown();
    Ok(EXIT_OK)
}

fn cmd_export(args: &ExportArgs) -> Result<i32, String> {
    let layout = RunLayout::new(&args.run);
    if !layout.results().is_dir() {
        return Err(format!("{} has no result store", args.run.display()));
    }
    let store = ResultStore::open(layout.results()).map_err(|e| e.to_string())?;
    store
        .export_summary(&layout.summary(), Some(&layout.efficiency()))
        .map_err(|e| e.to_string())?;
    println!("{}", layout.summary().display());
    Ok(EXIT_OK)
}
