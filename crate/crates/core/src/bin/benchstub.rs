//! Deterministic stand-in workload for tests.
//!
//! ```text
//! benchstub sleep <secs>
//! benchstub busy <secs>
//! benchstub alloc <mib> <hold_secs>
//! benchstub ramp <mib> <secs>
//! benchstub exit <code>
//! benchstub cluster <net> <outdir> <levels>
//! ```

use std::fs;
use std::hint::black_box;
use std::path::Path;
use std::process::ExitCode;
use std::thread::sleep;
use std::time::{Duration, Instant};

use clusterbench::clustering::{write_cnl, Clustering};
use clusterbench::netdata::read_nsl;

const PAGE: usize = 4096;

fn num(args: &[String], i: usize) -> f64 {
    args.get(i).and_then(|s| s.parse().ok()).unwrap_or_else(|| {
        eprintln!("benchstub: expected a number at argument {i}");
        std::process::exit(2)
    })
}

fn touch(buf: &mut [u8]) {
    for i in (0..buf.len()).step_by(PAGE) {
        buf[i] = 1;
    }
}

fn busy(secs: f64) {
    let end = Instant::now() + Duration::from_secs_f64(secs);
    let mut x = 0u64;
    while Instant::now() < end {
        for i in 0..10_000u64 {
            x = black_box(x.wrapping_mul(6364136223846793005).wrapping_add(i));
        }
    }
    black_box(x);
}

/// Writes `levels` clusterings of the network: level `i` groups nodes in
/// sorted order into chunks of `2^(i+1)`.
fn cluster(net: &Path, outdir: &Path, levels: usize) -> Result<(), String> {
    let net = read_nsl(net).map_err(|e| e.to_string())?;
    let mut nodes: Vec<String> = net.nodes().to_vec();
    nodes.sort_by(|a, b| match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        _ => a.cmp(b),
    });
    fs::create_dir_all(outdir).map_err(|e| e.to_string())?;
    for level in 0..levels {
        let size = 1usize << (level + 1).min(30);
        let c = Clustering::new(nodes.chunks(size).map(<[String]>::to_vec).collect())
            .map_err(|e| e.to_string())?;
        write_cnl(&c, &outdir.join(format!("out_{level}.cnl"))).map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match args.first().map(String::as_str) {
        Some("sleep") => sleep(Duration::from_secs_f64(num(&args, 1))),
        Some("busy") => busy(num(&args, 1)),
        Some("alloc") => {
            let mut buf = vec![0u8; (num(&args, 1) * 1048576.0) as usize];
            touch(&mut buf);
            sleep(Duration::from_secs_f64(num(&args, 2)));
            black_box(&buf);
        }
        Some("ramp") => {
            let (mib, secs) = (num(&args, 1) as usize, num(&args, 2));
            let step = Duration::from_secs_f64(secs / mib.max(1) as f64);
            let mut chunks = Vec::with_capacity(mib);
            for _ in 0..mib {
                let mut c = vec![0u8; 1048576];
                touch(&mut c);
                chunks.push(c);
                sleep(step);
            }
            black_box(&chunks);
        }
        Some("exit") => return ExitCode::from(num(&args, 1) as u8),
        Some("cluster") if args.len() >= 4 => {
            if let Err(e) = cluster(
                Path::new(&args[1]),
                Path::new(&args[2]),
                num(&args, 3) as usize,
            ) {
                eprintln!("benchstub: {e}");
                return ExitCode::FAILURE;
            }
        }
        _ => {
            eprintln!("usage: benchstub sleep|busy|alloc|ramp|exit|cluster ...");
            return ExitCode::from(2);
        }
    }
    ExitCode::SUCCESS
}
