//! Benchmarking of external clustering algorithms: isolated parallel
//! execution with resource profiling, dataset generation and shuffling,
//! accuracy measures, result aggregation and a live web monitor.

pub mod algos;
pub mod bench;
pub mod cli;
pub mod clustering;
pub mod execpool;
pub mod fmt;
pub mod measures;
pub mod netdata;
pub mod profiler;
pub mod results;
pub mod topology;
pub mod webmon;
