use crate::topology::CpuSet;

#[derive(Debug, thiserror::Error)]
pub enum AffinityError {
    #[error("CPU id {0} exceeds the supported affinity mask size")]
    CpuOutOfRange(usize),
    #[error("sched_setaffinity failed: {0}")]
    Os(#[source] std::io::Error),
}

/// Restricts process `pid` to the CPUs in `cpuset`.
///
/// A process that has already exited is not an error: the call is a no-op
/// and a warning is logged.
pub fn bind_affinity(pid: i32, cpuset: &CpuSet) -> Result<(), AffinityError> {
    let max = 8 * std::mem::size_of::<libc::cpu_set_t>();
    // SAFETY: cpu_set_t is plain data and every CPU index is bounds-checked
    // against its capacity before CPU_SET.
    let mut set: libc::cpu_set_t = unsafe { std::mem::zeroed() };
    for cpu in cpuset.iter() {
        if cpu >= max {
            return Err(AffinityError::CpuOutOfRange(cpu));
        }
        unsafe { libc::CPU_SET(cpu, &mut set) };
    }
    let rc = unsafe { libc::sched_setaffinity(pid, std::mem::size_of::<libc::cpu_set_t>(), &set) };
    if rc == 0 {
        return Ok(());
    }
    let err = std::io::Error::last_os_error();
    if err.raw_os_error() == Some(libc::ESRCH) {
        log::warn!("bind_affinity: process {pid} already exited; skipped");
        return Ok(());
    }
    Err(AffinityError::Os(err))
}

/// Current affinity mask of `pid`.
pub fn affinity_of(pid: i32) -> std::io::Result<Vec<usize>> {
    // SAFETY: see bind_affinity.
    let mut set: libc::cpu_set_t = unsafe { std::mem::zeroed() };
    let rc =
        unsafe { libc::sched_getaffinity(pid, std::mem::size_of::<libc::cpu_set_t>(), &mut set) };
    if rc != 0 {
        return Err(std::io::Error::last_os_error());
    }
    let max = 8 * std::mem::size_of::<libc::cpu_set_t>();
    Ok((0..max)
        .filter(|&c| unsafe { libc::CPU_ISSET(c, &set) })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::process::Command;

    #[test]
    fn binds_live_process_to_allowed_cpu() {
        let allowed = affinity_of(0).unwrap();
        let cpu = allowed[0];
        let mut child = Command::new("sleep").arg("2").spawn().unwrap();
        let pid = child.id() as i32;
        bind_affinity(pid, &CpuSet::single(cpu)).unwrap();
        assert_eq!(affinity_of(pid).unwrap(), vec![cpu]);
        child.kill().unwrap();
        child.wait().unwrap();
    }

    #[test]
    fn exited_process_is_a_noop() {
        let mut child = Command::new("true").spawn().unwrap();
        let pid = child.id() as i32;
        child.wait().unwrap();
        assert!(bind_affinity(pid, &CpuSet::single(0)).is_ok());
    }

    #[test]
    fn out_of_range_cpu_rejected() {
        let huge = CpuSet::single(1 << 20);
        assert!(matches!(
            bind_affinity(0, &huge),
            Err(AffinityError::CpuOutOfRange(_))
        ));
    }
}
