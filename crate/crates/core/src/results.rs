//! Hierarchical result store and two-stage aggregation.
//!
//! Layout: `<root>/<algorithm>/<nettype>[^<instance>]/values.csv` with rows
//! `shuffle,level,measure,value`. Each leaf is rewritten atomically on
//! every update, so readers always see a complete file.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use crate::fmt::sig9;
use crate::measures::{direction_of, Direction};

pub const LEAF_NAME: &str = "values.csv";
pub const LEAF_HEADER: &str = "shuffle,level,measure,value";
pub const SUMMARY_HEADER: &str = "algorithm,nettype,measure,mean,variance,count";
/// Efficiency columns taken from `resources.csv`.
pub const EFFICIENCY_MEASURES: [&str; 3] = ["wall_s", "cpu_s", "peak_rss_mib"];

#[derive(Debug, thiserror::Error)]
pub enum ResultError {
    #[error("value for {0} is not finite")]
    NonFinite(String),
    #[error("no values recorded for measure '{measure}' of {algorithm} on {nettype}")]
    Empty {
        measure: String,
        algorithm: String,
        nettype: String,
    },
    #[error("{path}: line {line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("invalid key component '{0}'")]
    InvalidKey(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ResultKey {
    pub algorithm: String,
    pub nettype: String,
    pub instance: Option<String>,
    pub shuffle: u64,
    pub level: u32,
    pub measure: String,
}

impl ResultKey {
    fn dataset_dir(&self) -> String {
        match &self.instance {
            Some(i) => format!("{}^{}", self.nettype, i),
            None => self.nettype.clone(),
        }
    }
}

impl std::fmt::Display for ResultKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}/{}/{}/{}/{}",
            self.algorithm,
            self.dataset_dir(),
            self.shuffle,
            self.level,
            self.measure
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub variance: f64,
    pub count: usize,
}

type Leaf = BTreeMap<(u64, u32, String), f64>;

fn sorted_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

/// Mean and population variance; summation runs over sorted values so the
/// result does not depend on input order.
pub fn mean_variance(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mut v = values.to_vec();
    let mean = sorted_sum(&mut v) / n;
    let mut sq: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
    Some((mean, sorted_sum(&mut sq) / n))
}

/// Best level value of one shuffle.
pub fn reduce_levels(values: &[f64], direction: Direction) -> Option<f64> {
    let it = values.iter().copied();
    match direction {
        Direction::HigherBetter => it.reduce(f64::max),
        Direction::LowerBetter => it.reduce(f64::min),
    }
}

/// Two-stage aggregation over per-instance lists of per-shuffle values:
/// instance mean and variance first, then the mean of each across
/// instances. `count` is the total number of shuffles.
pub fn aggregate_instances(instances: &[Vec<f64>]) -> Option<Aggregate> {
    let stats: Vec<(f64, f64)> = instances.iter().filter_map(|v| mean_variance(v)).collect();
    if stats.is_empty() {
        return None;
    }
    let n = stats.len() as f64;
    let mut means: Vec<f64> = stats.iter().map(|s| s.0).collect();
    let mut vars: Vec<f64> = stats.iter().map(|s| s.1).collect();
    Some(Aggregate {
        mean: sorted_sum(&mut means) / n,
        variance: sorted_sum(&mut vars) / n,
        count: instances.iter().map(Vec::len).sum(),
    })
}

fn valid_component(s: &str) -> bool {
    !s.is_empty() && !s.contains(['/', '\\', ',', '\n']) && s != "." && s != ".."
}

/// Directory-tree result store.
#[derive(Clone, Debug)]
pub struct ResultStore {
    root: PathBuf,
}

impl ResultStore {
    pub fn open(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(ResultStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn leaf_path(&self, key: &ResultKey) -> PathBuf {
        self.root
            .join(&key.algorithm)
            .join(key.dataset_dir())
            .join(LEAF_NAME)
    }

    /// Upserts one value. Returns `true` when an existing value was
    /// overwritten.
    pub fn record(&self, key: &ResultKey, value: f64) -> Result<bool, ResultError> {
        self.record_many(std::slice::from_ref(key), &[value])
    }

    /// Upserts several values; all keys must share one leaf.
    pub fn record_many(&self, keys: &[ResultKey], values: &[f64]) -> Result<bool, ResultError> {
        assert_eq!(keys.len(), values.len());
        let Some(first) = keys.first() else {
            return Ok(false);
        };
        for k in keys {
            for part in [&k.algorithm, &k.nettype] {
                if !valid_component(part) || part.contains('^') {
                    return Err(ResultError::InvalidKey(part.clone()));
                }
            }
            if !valid_component(&k.measure) {
                return Err(ResultError::InvalidKey(k.measure.clone()));
            }
            if let Some(i) = &k.instance {
                if !valid_component(i) {
                    return Err(ResultError::InvalidKey(i.clone()));
                }
            }
        }
        let path = self.leaf_path(first);
        let mut leaf = if path.exists() {
            read_leaf(&path)?
        } else {
            Leaf::new()
        };
        let mut overwritten = false;
        for (k, &v) in keys.iter().zip(values) {
            debug_assert_eq!(self.leaf_path(k), path);
            if !v.is_finite() {
                return Err(ResultError::NonFinite(k.to_string()));
            }
            if let Some(old) = leaf.insert((k.shuffle, k.level, k.measure.clone()), v) {
                log::warn!("overwriting {k}: {old} -> {v}");
                overwritten = true;
            }
        }
        write_leaf(&path, &leaf)?;
        Ok(overwritten)
    }

    pub fn get(&self, key: &ResultKey) -> Result<Option<f64>, ResultError> {
        let path = self.leaf_path(key);
        if !path.exists() {
            return Ok(None);
        }
        Ok(read_leaf(&path)?
            .get(&(key.shuffle, key.level, key.measure.clone()))
            .copied())
    }

    /// Every stored value, in key order.
    pub fn entries(&self) -> Result<Vec<(ResultKey, f64)>, ResultError> {
        let mut out = Vec::new();
        for (algorithm, dataset, path) in self.leaves()? {
            let (nettype, instance) = crate::netdata::split_dataset_stem(&dataset);
            for ((shuffle, level, measure), value) in read_leaf(&path)? {
                out.push((
                    ResultKey {
                        algorithm: algorithm.clone(),
                        nettype: nettype.clone(),
                        instance: instance.clone(),
                        shuffle,
                        level,
                        measure,
                    },
                    value,
                ));
            }
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(out)
    }

    /// `(algorithm, dataset dir, leaf path)` for every leaf, sorted.
    fn leaves(&self) -> io::Result<Vec<(String, String, PathBuf)>> {
        let mut out = Vec::new();
        for alg in sorted_dirs(&self.root)? {
            for ds in sorted_dirs(&self.root.join(&alg))? {
                let leaf = self.root.join(&alg).join(&ds).join(LEAF_NAME);
                if leaf.is_file() {
                    out.push((alg.clone(), ds, leaf));
                }
            }
        }
        Ok(out)
    }

    /// Per-instance lists of per-shuffle values (best level per shuffle).
    fn instance_values(
        &self,
        entries: &[(ResultKey, f64)],
        measure: &str,
        algorithm: &str,
        nettype: &str,
    ) -> Vec<Vec<f64>> {
        let direction = direction_of(measure).unwrap_or(Direction::HigherBetter);
        let mut by_instance: BTreeMap<Option<&str>, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
        for (k, v) in entries {
            if k.measure == measure && k.algorithm == algorithm && k.nettype == nettype {
                by_instance
                    .entry(k.instance.as_deref())
                    .or_default()
                    .entry(k.shuffle)
                    .or_default()
                    .push(*v);
            }
        }
        by_instance
            .into_values()
            .map(|shuffles| {
                shuffles
                    .into_values()
                    .filter_map(|levels| reduce_levels(&levels, direction))
                    .collect()
            })
            .collect()
    }

    pub fn aggregate(
        &self,
        measure: &str,
        algorithm: &str,
        nettype: &str,
    ) -> Result<Aggregate, ResultError> {
        let entries = self.entries()?;
        aggregate_instances(&self.instance_values(&entries, measure, algorithm, nettype))
            .ok_or_else(|| ResultError::Empty {
                measure: measure.to_string(),
                algorithm: algorithm.to_string(),
                nettype: nettype.to_string(),
            })
    }

    /// Aggregates of every `(algorithm, nettype, measure)` present, sorted.
    pub fn summary(&self) -> Result<Vec<(String, String, String, Aggregate)>, ResultError> {
        let entries = self.entries()?;
        let groups: BTreeSet<(String, String, String)> = entries
            .iter()
            .map(|(k, _)| (k.algorithm.clone(), k.nettype.clone(), k.measure.clone()))
            .collect();
        let mut out = Vec::with_capacity(groups.len());
        for (a, t, m) in groups {
            if let Some(agg) = aggregate_instances(&self.instance_values(&entries, &m, &a, &t)) {
                out.push((a, t, m, agg));
            }
        }
        Ok(out)
    }

    /// Writes quality rows to `summary` and efficiency rows (`wall_s`,
    /// `cpu_s`, `peak_rss_mib`) to `efficiency`, or to `summary` as well
    /// when no separate path is given.
    pub fn export_summary(
        &self,
        summary: &Path,
        efficiency: Option<&Path>,
    ) -> Result<(), ResultError> {
        let rows = self.summary()?;
        let is_eff = |m: &str| EFFICIENCY_MEASURES.contains(&m);
        let render = |keep: &dyn Fn(&str) -> bool| {
            let mut text = format!("{SUMMARY_HEADER}\n");
            for (a, t, m, agg) in &rows {
                if keep(m) {
                    text.push_str(&format!(
                        "{a},{t},{m},{},{},{}\n",
                        sig9(agg.mean),
                        sig9(agg.variance),
                        agg.count
                    ));
                }
            }
            text
        };
        match efficiency {
            Some(eff) => {
                atomic_write(summary, render(&|m| !is_eff(m)).as_bytes())?;
                atomic_write(eff, render(&is_eff).as_bytes())?;
            }
            None => atomic_write(summary, render(&|_| true).as_bytes())?,
        }
        Ok(())
    }
}

fn sorted_dirs(dir: &Path) -> io::Result<Vec<String>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out: Vec<String> = fs::read_dir(dir)?
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_ok_and(|t| t.is_dir()))
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    out.sort();
    Ok(out)
}

fn read_leaf(path: &Path) -> Result<Leaf, ResultError> {
    let text = fs::read_to_string(path)?;
    let mut leaf = Leaf::new();
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 && line == LEAF_HEADER || line.is_empty() {
            continue;
        }
        let bad = |reason: &str| ResultError::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            reason: reason.to_string(),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad("expected 4 fields"));
        }
        leaf.insert(
            (
                f[0].parse().map_err(|_| bad("bad shuffle"))?,
                f[1].parse().map_err(|_| bad("bad level"))?,
                f[2].to_string(),
            ),
            f[3].parse().map_err(|_| bad("bad value"))?,
        );
    }
    Ok(leaf)
}

fn write_leaf(path: &Path, leaf: &Leaf) -> io::Result<()> {
    let mut text = format!("{LEAF_HEADER}\n");
    for ((s, l, m), v) in leaf {
        // Shortest round-trip representation keeps stored values exact.
        text.push_str(&format!("{s},{l},{m},{v:?}\n"));
    }
    atomic_write(path, text.as_bytes())
}

/// Writes through a temporary sibling and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp{}",
        path.extension().and_then(|e| e.to_str()).unwrap_or(""),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn key(
        alg: &str,
        nettype: &str,
        inst: Option<&str>,
        shuffle: u64,
        level: u32,
        measure: &str,
    ) -> ResultKey {
        ResultKey {
            algorithm: alg.into(),
            nettype: nettype.into(),
            instance: inst.map(Into::into),
            shuffle,
            level,
            measure: measure.into(),
        }
    }

    #[test]
    fn hand_computed_aggregates() {
        let a = aggregate_instances(&[vec![0.2, 0.4]]).unwrap();
        assert!((a.mean - 0.3).abs() < 1e-12 && (a.variance - 0.01).abs() < 1e-12);
        assert_eq!(a.count, 2);
        // Instance means {0.3, 0.5}, variances {0.01, 0.04}.
        let b = aggregate_instances(&[vec![0.2, 0.4], vec![0.3, 0.7]]).unwrap();
        assert!((b.mean - 0.4).abs() < 1e-12 && (b.variance - 0.025).abs() < 1e-12);
        let c = aggregate_instances(&[vec![0.7]]).unwrap();
        assert_eq!((c.mean, c.variance, c.count), (0.7, 0.0, 1));
        assert!(aggregate_instances(&[]).is_none());
    }

    #[test]
    fn record_read_back_overwrite_and_persistence() {
        let dir = tempfile::tempdir().unwrap();
        let k = key("louvain", "lfr", Some("1"), 0, 2, "nmi");
        {
            let store = ResultStore::open(dir.path()).unwrap();
            assert!(!store.record(&k, 0.1 + 0.2).unwrap());
            assert_eq!(store.get(&k).unwrap(), Some(0.1 + 0.2));
            assert!(store.record(&k, 0.5).unwrap());
        }
        let reopened = ResultStore::open(dir.path()).unwrap();
        assert_eq!(reopened.get(&k).unwrap(), Some(0.5));
        assert_eq!(
            reopened.leaf_path(&k),
            dir.path().join("louvain/lfr^1/values.csv")
        );
        assert!(matches!(
            reopened.record(&k, f64::NAN),
            Err(ResultError::NonFinite(_))
        ));
        assert!(matches!(
            reopened.record(&key("a/b", "t", None, 0, 0, "nmi"), 1.0),
            Err(ResultError::InvalidKey(_))
        ));
    }

    #[test]
    fn store_aggregates_best_level_per_shuffle() {
        let dir = tempfile::tempdir().unwrap();
        let s = ResultStore::open(dir.path()).unwrap();
        // Instance 1: shuffle 0 levels {0.1, 0.2}, shuffle 1 level {0.4} -> {0.2, 0.4}.
        s.record(&key("a", "t", Some("1"), 0, 0, "nmi"), 0.1)
            .unwrap();
        s.record(&key("a", "t", Some("1"), 0, 1, "nmi"), 0.2)
            .unwrap();
        s.record(&key("a", "t", Some("1"), 1, 0, "nmi"), 0.4)
            .unwrap();
        // Instance 2: {0.3, 0.7}.
        s.record(&key("a", "t", Some("2"), 0, 0, "nmi"), 0.3)
            .unwrap();
        s.record(&key("a", "t", Some("2"), 1, 0, "nmi"), 0.7)
            .unwrap();
        let agg = s.aggregate("nmi", "a", "t").unwrap();
        assert!((agg.mean - 0.4).abs() < 1e-12 && (agg.variance - 0.025).abs() < 1e-12);
        assert_eq!(agg.count, 4);
        // Conductance keeps the lowest level.
        s.record(&key("a", "t", Some("1"), 0, 0, "conductance"), 0.5)
            .unwrap();
        s.record(&key("a", "t", Some("1"), 0, 1, "conductance"), 0.25)
            .unwrap();
        assert_eq!(s.aggregate("conductance", "a", "t").unwrap().mean, 0.25);
        assert!(matches!(
            s.aggregate("omega", "a", "t"),
            Err(ResultError::Empty { .. })
        ));
    }

    #[test]
    fn export_counts_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let s = ResultStore::open(dir.path().join("store")).unwrap();
        let out = dir.path().join("summary.csv");
        let eff = dir.path().join("efficiency.csv");
        s.export_summary(&out, Some(&eff)).unwrap();
        assert_eq!(
            fs::read_to_string(&out).unwrap(),
            format!("{SUMMARY_HEADER}\n")
        );
        for alg in ["b", "a"] {
            for m in ["nmi", "omega", "f1h"]
                .into_iter()
                .chain(EFFICIENCY_MEASURES)
            {
                s.record(&key(alg, "t", Some("1"), 0, 0, m), 1.0 / 3.0)
                    .unwrap();
            }
        }
        s.export_summary(&out, Some(&eff)).unwrap();
        let first = fs::read_to_string(&out).unwrap();
        let lines: Vec<&str> = first.lines().collect();
        assert_eq!(lines.len(), 7);
        assert_eq!(lines[1], "a,t,f1h,0.333333333,0,1");
        assert_eq!(fs::read_to_string(&eff).unwrap().lines().count(), 7);
        s.export_summary(&out, Some(&eff)).unwrap();
        assert_eq!(fs::read_to_string(&out).unwrap(), first);
        let combined = dir.path().join("all.csv");
        s.export_summary(&combined, None).unwrap();
        assert_eq!(fs::read_to_string(&combined).unwrap().lines().count(), 13);
    }

    proptest! {
        #[test]
        fn aggregation_is_order_invariant(
            instances in proptest::collection::vec(proptest::collection::vec(-1e3f64..1e3, 1..8), 1..6),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut shuffled = instances.clone();
            for v in &mut shuffled {
                v.shuffle(&mut rng);
            }
            shuffled.shuffle(&mut rng);
            let a = aggregate_instances(&instances).unwrap();
            let b = aggregate_instances(&shuffled).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!(a.variance >= 0.0);
        }

        #[test]
        fn two_stage_equals_flat_mean_for_equal_counts(
            flat in proptest::collection::vec(-10f64..10.0, 1..5).prop_flat_map(|row| {
                let len = row.len();
                proptest::collection::vec(proptest::collection::vec(-10f64..10.0, len..=len), 1..5)
            })
        ) {
            let a = aggregate_instances(&flat).unwrap();
            let all: Vec<f64> = flat.iter().flatten().copied().collect();
            let (m, _) = mean_variance(&all).unwrap();
            prop_assert!((a.mean - m).abs() < 1e-9);
        }

        #[test]
        fn store_round_trip_matches_in_memory(
            vals in proptest::collection::vec((0u64..3, 0u32..3, 0usize..2, -5f64..5.0), 1..25)
        ) {
            let dir = tempfile::tempdir().unwrap();
            let s = ResultStore::open(dir.path()).unwrap();
            let mut mem: BTreeMap<(usize, u64, u32), f64> = BTreeMap::new();
            for (shuffle, level, inst, v) in &vals {
                let inst_name = inst.to_string();
                s.record(&key("a", "t", Some(&inst_name), *shuffle, *level, "nmi"), *v).unwrap();
                mem.insert((*inst, *shuffle, *level), *v);
            }
            let mut per_inst: BTreeMap<usize, BTreeMap<u64, f64>> = BTreeMap::new();
            for ((inst, shuffle, _), v) in &mem {
                let e = per_inst.entry(*inst).or_default().entry(*shuffle).or_insert(f64::NEG_INFINITY);
                *e = e.max(*v);
            }
            let oracle: Vec<Vec<f64>> = per_inst.into_values().map(|m| m.into_values().collect()).collect();
            prop_assert_eq!(s.aggregate("nmi", "a", "t").unwrap(), aggregate_instances(&oracle).unwrap());
        }
    }
}
