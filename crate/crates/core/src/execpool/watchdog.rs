//! Low-memory victim selection.

use std::time::Duration;

/// Resident memory and runtime of one running worker.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorkerSample {
    pub rss_mib: f64,
    pub elapsed: Duration,
}

/// Outcome of a watchdog tick that found the memory limit exceeded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WatchdogDecision {
    /// Index of the victim in the sample slice.
    pub victim: usize,
    /// Number of heavy workers found.
    pub heavy: usize,
    /// Set when only one heavy worker exists: the pool lowers its worker cap.
    pub shrink_cap: bool,
}

/// Applies the kill-and-postpone rule to the running workers.
///
/// Heavy workers are those whose rss is at least the mean rss of all running
/// workers. With `k >= 2` heavy workers the one with the shortest runtime is
/// chosen; with `k = 1` that single worker is chosen and the cap shrinks.
/// Returns `None` while the total stays within `limit_mib`.
pub fn memory_watchdog_tick(running: &[WorkerSample], limit_mib: f64) -> Option<WatchdogDecision> {
    if running.is_empty() {
        return None;
    }
    let total: f64 = running.iter().map(|w| w.rss_mib).sum();
    if total <= limit_mib {
        return None;
    }
    let mean = total / running.len() as f64;
    let heavy: Vec<usize> = (0..running.len())
        .filter(|&i| running[i].rss_mib >= mean)
        .collect();
    // Ties on runtime go to the heavier worker, then to the earlier index.
    let victim = *heavy
        .iter()
        .min_by(|&&a, &&b| {
            running[a]
                .elapsed
                .cmp(&running[b].elapsed)
                .then(running[b].rss_mib.total_cmp(&running[a].rss_mib))
                .then(a.cmp(&b))
        })
        .expect("max rss is never below the mean");
    Some(WatchdogDecision {
        victim,
        heavy: heavy.len(),
        shrink_cap: heavy.len() == 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(rss: f64, secs: u64) -> WorkerSample {
        WorkerSample {
            rss_mib: rss,
            elapsed: Duration::from_secs(secs),
        }
    }

    #[test]
    fn shortest_running_heavy_worker_is_victim() {
        // total 1200 > 1000, mean 400, heavy {A, B}, B ran shortest.
        let d = memory_watchdog_tick(&[w(600.0, 50), w(500.0, 10), w(100.0, 5)], 1000.0).unwrap();
        assert_eq!(
            d,
            WatchdogDecision {
                victim: 1,
                heavy: 2,
                shrink_cap: false
            }
        );
    }

    #[test]
    fn under_threshold_no_action() {
        assert_eq!(
            memory_watchdog_tick(&[w(300.0, 5), w(100.0, 1)], 1000.0),
            None
        );
        assert_eq!(memory_watchdog_tick(&[w(1000.0, 5)], 1000.0), None);
        assert_eq!(memory_watchdog_tick(&[], 1000.0), None);
    }

    #[test]
    fn single_heavy_worker_shrinks_cap() {
        let d = memory_watchdog_tick(&[w(1200.0, 5)], 1000.0).unwrap();
        assert_eq!(
            d,
            WatchdogDecision {
                victim: 0,
                heavy: 1,
                shrink_cap: true
            }
        );
        let d = memory_watchdog_tick(&[w(10.0, 1), w(900.0, 50), w(10.0, 2)], 800.0).unwrap();
        assert_eq!(
            d,
            WatchdogDecision {
                victim: 1,
                heavy: 1,
                shrink_cap: true
            }
        );
    }

    #[test]
    fn equal_workers_are_all_heavy() {
        let d = memory_watchdog_tick(&[w(400.0, 9), w(400.0, 3), w(400.0, 7)], 1000.0).unwrap();
        assert_eq!(
            d,
            WatchdogDecision {
                victim: 1,
                heavy: 3,
                shrink_cap: false
            }
        );
    }
}
