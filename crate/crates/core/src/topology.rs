//! Machine CPU hierarchy (NUMA nodes, physical cores, logical CPUs) and the
//! mapping of isolation policies onto concrete CPU sets.
//!
//! The topology is either introspected from sysfs or read from a manual
//! description file with one line per logical CPU:
//!
//! ```text
//! # numa_id core_id cpu_id
//! 0 0 0
//! 0 0 1
//! ```
//!
//! Core ids are global across the map: the same core id may not appear under
//! two NUMA nodes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum TopologyError {
    #[error("topology has no logical CPUs")]
    Empty,
    #[error("logical CPU {cpu} is listed more than once")]
    DuplicateCpu { cpu: usize },
    #[error("physical core {core} appears under NUMA nodes {first} and {second}")]
    CoreInTwoNodes {
        core: usize,
        first: usize,
        second: usize,
    },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("CPU set must not be empty")]
    EmptyCpuSet,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Non-empty set of logical CPU ids a worker process is bound to.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CpuSet(BTreeSet<usize>);

impl CpuSet {
    pub fn new<I: IntoIterator<Item = usize>>(cpus: I) -> Result<Self, TopologyError> {
        let set: BTreeSet<usize> = cpus.into_iter().collect();
        if set.is_empty() {
            return Err(TopologyError::EmptyCpuSet);
        }
        Ok(CpuSet(set))
    }

    pub fn single(cpu: usize) -> Self {
        CpuSet(BTreeSet::from([cpu]))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn contains(&self, cpu: usize) -> bool {
        self.0.contains(&cpu)
    }

    pub fn is_disjoint(&self, other: &CpuSet) -> bool {
        self.0.is_disjoint(&other.0)
    }
}

impl fmt::Display for CpuSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for cpu in &self.0 {
            if !first {
                f.write_str(",")?;
            }
            first = false;
            write!(f, "{cpu}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhysCore {
    pub id: usize,
    pub cpus: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NumaNode {
    pub id: usize,
    pub cores: Vec<PhysCore>,
}

/// Immutable CPU hierarchy. Nodes, cores and CPUs are kept sorted by id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologyMap {
    nodes: Vec<NumaNode>,
}

/// Processing unit a worker is isolated on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AffinityPolicy {
    PhysCore,
    LogicalCpu,
    NumaNode,
}

impl FromStr for AffinityPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "physcore" | "core" => Ok(AffinityPolicy::PhysCore),
            "logicalcpu" | "cpu" => Ok(AffinityPolicy::LogicalCpu),
            "numanode" | "node" => Ok(AffinityPolicy::NumaNode),
            other => Err(format!("unknown affinity policy '{other}'")),
        }
    }
}

impl TopologyMap {
    /// Builds a map from `(numa_id, core_id, cpu_id)` triples.
    pub fn from_triples<I>(triples: I) -> Result<Self, TopologyError>
    where
        I: IntoIterator<Item = (usize, usize, usize)>,
    {
        let mut tree: BTreeMap<usize, BTreeMap<usize, BTreeSet<usize>>> = BTreeMap::new();
        let mut core_node: BTreeMap<usize, usize> = BTreeMap::new();
        let mut seen = BTreeSet::new();
        for (node, core, cpu) in triples {
            if !seen.insert(cpu) {
                return Err(TopologyError::DuplicateCpu { cpu });
            }
            match core_node.get(&core) {
                Some(&first) if first != node => {
                    return Err(TopologyError::CoreInTwoNodes {
                        core,
                        first,
                        second: node,
                    })
                }
                _ => {
                    core_node.insert(core, node);
                }
            }
            tree.entry(node)
                .or_default()
                .entry(core)
                .or_default()
                .insert(cpu);
        }
        if seen.is_empty() {
            return Err(TopologyError::Empty);
        }
        let nodes = tree
            .into_iter()
            .map(|(id, cores)| NumaNode {
                id,
                cores: cores
                    .into_iter()
                    .map(|(id, cpus)| PhysCore {
                        id,
                        cpus: cpus.into_iter().collect(),
                    })
                    .collect(),
            })
            .collect();
        Ok(TopologyMap { nodes })
    }

    /// One node with `cpus` single-CPU cores.
    pub fn flat(cpus: usize) -> Self {
        let cpus = cpus.max(1);
        Self::from_triples((0..cpus).map(|c| (0, c, c))).expect("flat topology is valid")
    }

    /// `nodes × cores_per_node × threads_per_core`, CPUs numbered consecutively.
    pub fn uniform(nodes: usize, cores_per_node: usize, threads_per_core: usize) -> Self {
        let mut triples = Vec::new();
        let mut cpu = 0;
        for node in 0..nodes.max(1) {
            for c in 0..cores_per_node.max(1) {
                let core = node * cores_per_node.max(1) + c;
                for _ in 0..threads_per_core.max(1) {
                    triples.push((node, core, cpu));
                    cpu += 1;
                }
            }
        }
        Self::from_triples(triples).expect("uniform topology is valid")
    }

    pub fn nodes(&self) -> &[NumaNode] {
        &self.nodes
    }

    pub fn core_count(&self) -> usize {
        self.nodes.iter().map(|n| n.cores.len()).sum()
    }

    pub fn cpu_count(&self) -> usize {
        self.triples().count()
    }

    pub fn triples(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.nodes.iter().flat_map(|n| {
            n.cores
                .iter()
                .flat_map(move |c| c.cpus.iter().map(move |&cpu| (n.id, c.id, cpu)))
        })
    }

    /// Parses the manual topology description format.
    pub fn parse(text: &str) -> Result<Self, TopologyError> {
        let mut triples = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(TopologyError::Parse {
                    line: idx + 1,
                    reason: format!("expected 'numa_id core_id cpu_id', got '{line}'"),
                });
            }
            let mut nums = [0usize; 3];
            for (slot, field) in nums.iter_mut().zip(&fields) {
                *slot = field.parse().map_err(|_| TopologyError::Parse {
                    line: idx + 1,
                    reason: format!("'{field}' is not a non-negative integer"),
                })?;
            }
            triples.push((nums[0], nums[1], nums[2]));
        }
        Self::from_triples(triples)
    }

    pub fn from_file(path: &Path) -> Result<Self, TopologyError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Serializes into the manual description format.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# numa_id core_id cpu_id\n");
        for (node, core, cpu) in self.triples() {
            out.push_str(&format!("{node} {core} {cpu}\n"));
        }
        out
    }
}

/// One CPU set per unit of the policy's kind, ordered by node, core, CPU.
/// The sets are pairwise disjoint.
pub fn slots_for(policy: AffinityPolicy, topo: &TopologyMap) -> Vec<CpuSet> {
    let sets: Vec<Vec<usize>> = match policy {
        AffinityPolicy::LogicalCpu => topo.triples().map(|(_, _, cpu)| vec![cpu]).collect(),
        AffinityPolicy::PhysCore => topo
            .nodes
            .iter()
            .flat_map(|n| n.cores.iter().map(|c| c.cpus.clone()))
            .collect(),
        AffinityPolicy::NumaNode => topo
            .nodes
            .iter()
            .map(|n| {
                n.cores
                    .iter()
                    .flat_map(|c| c.cpus.iter().copied())
                    .collect()
            })
            .collect(),
    };
    sets.into_iter()
        .map(|cpus| CpuSet::new(cpus).expect("topology units are non-empty"))
        .collect()
}

/// Introspects the host. Never fails: falls back to a flat map over the
/// online CPU count when sysfs is unavailable.
pub fn detect_topology() -> TopologyMap {
    match detect_from_sysfs(Path::new("/sys/devices/system")) {
        Some(topo) => topo,
        None => {
            let n = std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1);
            log::warn!("CPU topology introspection failed; using flat topology of {n} CPUs");
            TopologyMap::flat(n)
        }
    }
}

/// Reads `<root>/cpu/cpuN/topology/*` and `<root>/node/nodeN/cpulist`,
/// restricted to the CPUs this process may run on.
pub fn detect_from_sysfs(root: &Path) -> Option<TopologyMap> {
    let online = std::fs::read_to_string(root.join("cpu/online")).ok()?;
    let mut cpus = parse_cpu_list(online.trim())?;
    if let Some(allowed) = current_affinity() {
        cpus.retain(|c| allowed.contains(c));
    }
    if cpus.is_empty() {
        return None;
    }

    let mut cpu_node: BTreeMap<usize, usize> = BTreeMap::new();
    if let Ok(entries) = std::fs::read_dir(root.join("node")) {
        for entry in entries.flatten() {
            let name = entry.file_name();
            let Some(id) = name
                .to_str()
                .and_then(|s| s.strip_prefix("node"))
                .and_then(|s| s.parse::<usize>().ok())
            else {
                continue;
            };
            if let Ok(list) = std::fs::read_to_string(entry.path().join("cpulist")) {
                for cpu in parse_cpu_list(list.trim()).unwrap_or_default() {
                    cpu_node.insert(cpu, id);
                }
            }
        }
    }

    // Physical cores are keyed by (package, core_id); CPUs without readable
    // topology become their own core.
    let mut core_key: BTreeMap<usize, (usize, usize, usize)> = BTreeMap::new();
    for &cpu in &cpus {
        let topo_dir = root.join(format!("cpu/cpu{cpu}/topology"));
        let read = |f: &str| {
            std::fs::read_to_string(topo_dir.join(f))
                .ok()
                .and_then(|s| s.trim().parse::<isize>().ok())
        };
        let key = match (read("physical_package_id"), read("core_id")) {
            (Some(pkg), Some(core)) if pkg >= 0 && core >= 0 => (0, pkg as usize, core as usize),
            _ => (1, cpu, 0),
        };
        core_key.insert(cpu, key);
    }
    let mut core_ids: BTreeMap<(usize, usize, usize), usize> = BTreeMap::new();
    let mut triples = Vec::new();
    for &cpu in &cpus {
        let key = core_key[&cpu];
        let next = core_ids.len();
        let core = *core_ids.entry(key).or_insert(next);
        let node = cpu_node.get(&cpu).copied().unwrap_or(0);
        triples.push((node, core, cpu));
    }
    match TopologyMap::from_triples(triples) {
        Ok(t) => Some(t),
        Err(e) => {
            log::warn!("inconsistent sysfs topology: {e}");
            None
        }
    }
}

/// Parses kernel CPU lists such as `0-3,8,10-11`.
pub fn parse_cpu_list(s: &str) -> Option<Vec<usize>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((lo, hi)) => {
                let lo: usize = lo.parse().ok()?;
                let hi: usize = hi.parse().ok()?;
                if hi < lo {
                    return None;
                }
                out.extend(lo..=hi);
            }
            None => out.push(part.parse().ok()?),
        }
    }
    Some(out)
}

fn current_affinity() -> Option<BTreeSet<usize>> {
    // SAFETY: cpu_set_t is plain data; sched_getaffinity writes at most
    // size_of::<cpu_set_t>() bytes into it.
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        if libc::sched_getaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &mut set) != 0 {
            return None;
        }
        let max = 8 * std::mem::size_of::<libc::cpu_set_t>();
        Some((0..max).filter(|&c| libc::CPU_ISSET(c, &set)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_2x8x2_counts() {
        let topo = TopologyMap::uniform(2, 8, 2);
        assert_eq!(topo.nodes().len(), 2);
        assert_eq!(topo.core_count(), 16);
        assert_eq!(topo.cpu_count(), 32);

        let cores = slots_for(AffinityPolicy::PhysCore, &topo);
        assert_eq!(cores.len(), 16);
        assert!(cores.iter().all(|s| s.len() == 2));
        let cpus = slots_for(AffinityPolicy::LogicalCpu, &topo);
        assert_eq!(cpus.len(), 32);
        assert!(cpus.iter().all(|s| s.len() == 1));
        let nodes = slots_for(AffinityPolicy::NumaNode, &topo);
        assert_eq!(nodes.len(), 2);
        assert!(nodes.iter().all(|s| s.len() == 16));
    }

    #[test]
    fn flat_fallback_shape() {
        let topo = TopologyMap::flat(4);
        assert_eq!(topo.nodes().len(), 1);
        assert_eq!(topo.core_count(), 4);
        assert_eq!(topo.cpu_count(), 4);
    }

    #[test]
    fn manual_file_round_trip() {
        let text = "# node0:{core0:{cpu0,cpu1}}\n0 0 0\n0 0 1\n";
        let topo = TopologyMap::parse(text).unwrap();
        assert_eq!(
            topo.nodes(),
            &[NumaNode {
                id: 0,
                cores: vec![PhysCore {
                    id: 0,
                    cpus: vec![0, 1]
                }]
            }]
        );
        assert_eq!(TopologyMap::parse(&topo.to_text()).unwrap(), topo);
    }

    #[test]
    fn manual_file_errors() {
        assert!(matches!(TopologyMap::parse(""), Err(TopologyError::Empty)));
        assert!(matches!(
            TopologyMap::parse("0 0 0\n0 1 0\n"),
            Err(TopologyError::DuplicateCpu { cpu: 0 })
        ));
        assert!(matches!(
            TopologyMap::parse("0 0 0\n1 0 1\n"),
            Err(TopologyError::CoreInTwoNodes { core: 0, .. })
        ));
        assert!(matches!(
            TopologyMap::parse("0 0\n"),
            Err(TopologyError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            TopologyMap::parse("0 0 0\n0 x 1\n"),
            Err(TopologyError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn empty_cpuset_rejected() {
        assert!(matches!(CpuSet::new([]), Err(TopologyError::EmptyCpuSet)));
        assert_eq!(CpuSet::new([5, 4]).unwrap().to_string(), "4,5");
    }

    #[test]
    fn cpu_list_parsing() {
        assert_eq!(
            parse_cpu_list("0-3,8,10-11"),
            Some(vec![0, 1, 2, 3, 8, 10, 11])
        );
        assert_eq!(parse_cpu_list("0"), Some(vec![0]));
        assert_eq!(parse_cpu_list("3-1"), None);
    }

    #[test]
    fn detect_is_consistent() {
        let topo = detect_topology();
        assert!(topo.cpu_count() >= 1);
        assert!(topo.core_count() <= topo.cpu_count());
    }

    #[test]
    fn sysfs_fixture_with_smt_siblings() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        std::fs::create_dir_all(root.join("node/node0")).unwrap();
        std::fs::create_dir_all(root.join("cpu")).unwrap();
        std::fs::write(root.join("cpu/online"), "0-3\n").unwrap();
        std::fs::write(root.join("node/node0/cpulist"), "0-3\n").unwrap();
        for (cpu, core) in [(0, 0), (1, 1), (2, 0), (3, 1)] {
            let d = root.join(format!("cpu/cpu{cpu}/topology"));
            std::fs::create_dir_all(&d).unwrap();
            std::fs::write(d.join("physical_package_id"), "0\n").unwrap();
            std::fs::write(d.join("core_id"), format!("{core}\n")).unwrap();
        }
        let allowed = current_affinity().unwrap_or_default();
        let topo = detect_from_sysfs(root);
        let expected: Vec<usize> = (0..4).filter(|c| allowed.contains(c)).collect();
        match topo {
            Some(t) => {
                let cpus: Vec<usize> = t.triples().map(|(_, _, c)| c).collect();
                assert_eq!(
                    cpus.iter().copied().collect::<BTreeSet<_>>(),
                    expected.iter().copied().collect()
                );
                if expected.len() == 4 {
                    assert_eq!(t.core_count(), 2);
                    assert!(slots_for(AffinityPolicy::PhysCore, &t)
                        .iter()
                        .all(|s| s.len() == 2));
                }
            }
            None => assert!(expected.is_empty()),
        }
    }

    fn arb_topology() -> impl Strategy<Value = TopologyMap> {
        (1usize..4, 1usize..6, 1usize..4).prop_map(|(n, c, t)| TopologyMap::uniform(n, c, t))
    }

    proptest! {
        #[test]
        fn slots_are_disjoint_and_ordered_by_granularity(topo in arb_topology()) {
            for policy in [AffinityPolicy::PhysCore, AffinityPolicy::LogicalCpu, AffinityPolicy::NumaNode] {
                let slots = slots_for(policy, &topo);
                let mut seen = BTreeSet::new();
                for s in &slots {
                    for cpu in s.iter() {
                        prop_assert!(seen.insert(cpu));
                    }
                }
                prop_assert!(seen.len() <= topo.cpu_count());
            }
            let cores = slots_for(AffinityPolicy::PhysCore, &topo).len();
            let cpus = slots_for(AffinityPolicy::LogicalCpu, &topo).len();
            let nodes = slots_for(AffinityPolicy::NumaNode, &topo).len();
            prop_assert!(cpus >= cores && cores >= nodes);
        }

        #[test]
        fn text_round_trip(topo in arb_topology()) {
            prop_assert_eq!(TopologyMap::parse(&topo.to_text()).unwrap(), topo);
        }
    }
}
