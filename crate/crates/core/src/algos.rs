//! Clustering algorithm adapters, the native randcommuns baseline and
//! output level unification.
//!
//! An adapter only builds an argv and collects output files; the algorithm
//! itself always runs as an external process under the pool.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clustering::Clustering;
use crate::netdata::Network;

#[derive(Debug, thiserror::Error)]
pub enum AlgoError {
    #[error("algorithm '{0}' is already registered")]
    Duplicate(String),
    #[error("unknown algorithm '{0}'")]
    Unknown(String),
    #[error("algorithm '{algo}': unknown placeholder {{{name}}}")]
    UnknownPlaceholder { algo: String, name: String },
    #[error("algorithm '{0}' needs a ground truth")]
    MissingTruth(String),
    #[error("algorithm '{0}' has an empty command template")]
    EmptyTemplate(String),
    #[error("no output levels to unify")]
    NoLevels,
    #[error("level count L must be at least 1")]
    ZeroLevels,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Inputs of one algorithm run.
#[derive(Clone, Debug)]
pub struct RunInputs<'a> {
    pub net: &'a Path,
    pub outdir: &'a Path,
    pub seed: u64,
    pub truth: Option<&'a Path>,
}

#[derive(Clone, Debug, PartialEq)]
enum Command {
    /// Whitespace-separated words with `{placeholder}` substitution.
    Template(Vec<String>),
    /// `<exe> randcommuns ...`, normally this crate's own binary.
    Randcommuns(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlgoAdapter {
    name: String,
    category: String,
    defaults: BTreeMap<String, String>,
    command: Command,
}

impl AlgoAdapter {
    /// An external executable described by a command template. Placeholders:
    /// `{net}`, `{outdir}`, `{seed}`, `{truth}` and any parameter name.
    pub fn template(name: impl Into<String>, template: &str) -> Result<Self, AlgoError> {
        let name = name.into();
        let words: Vec<String> = template.split_whitespace().map(str::to_string).collect();
        if words.is_empty() {
            return Err(AlgoError::EmptyTemplate(name));
        }
        Ok(AlgoAdapter {
            name,
            category: "algorithm".to_string(),
            defaults: BTreeMap::new(),
            command: Command::Template(words),
        })
    }

    /// The randcommuns baseline run through `exe randcommuns`.
    pub fn randcommuns(exe: impl Into<PathBuf>) -> Self {
        AlgoAdapter {
            name: "randcommuns".to_string(),
            category: "algorithm".to_string(),
            defaults: BTreeMap::new(),
            command: Command::Randcommuns(exe.into()),
        }
    }

    pub fn with_param(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.defaults.insert(key.into(), value.into());
        self
    }

    pub fn with_category(mut self, category: impl Into<String>) -> Self {
        self.category = category.into();
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn category(&self) -> &str {
        &self.category
    }

    pub fn defaults(&self) -> &BTreeMap<String, String> {
        &self.defaults
    }

    pub fn needs_truth(&self) -> bool {
        match &self.command {
            Command::Template(words) => words.iter().any(|w| w.contains("{truth}")),
            Command::Randcommuns(_) => true,
        }
    }

    /// Builds the argv for one run. `params` override the adapter defaults.
    pub fn build_argv(
        &self,
        run: &RunInputs<'_>,
        params: &BTreeMap<String, String>,
    ) -> Result<Vec<String>, AlgoError> {
        let truth = run.truth.map(|p| p.display().to_string());
        match &self.command {
            Command::Randcommuns(exe) => {
                let truth = truth.ok_or_else(|| AlgoError::MissingTruth(self.name.clone()))?;
                Ok(vec![
                    exe.display().to_string(),
                    "randcommuns".to_string(),
                    "--net".to_string(),
                    run.net.display().to_string(),
                    "--truth".to_string(),
                    truth,
                    "--seed".to_string(),
                    run.seed.to_string(),
                    "--out".to_string(),
                    run.outdir.join("level_0.cnl").display().to_string(),
                ])
            }
            Command::Template(words) => {
                let mut vars: BTreeMap<&str, String> = self
                    .defaults
                    .iter()
                    .chain(params)
                    .map(|(k, v)| (k.as_str(), v.clone()))
                    .collect();
                vars.insert("net", run.net.display().to_string());
                vars.insert("outdir", run.outdir.display().to_string());
                vars.insert("seed", run.seed.to_string());
                if let Some(t) = truth {
                    vars.insert("truth", t);
                }
                words.iter().map(|w| self.substitute(w, &vars)).collect()
            }
        }
    }

    fn substitute(&self, word: &str, vars: &BTreeMap<&str, String>) -> Result<String, AlgoError> {
        let mut out = String::with_capacity(word.len());
        let mut rest = word;
        while let Some(open) = rest.find('{') {
            let Some(close) = rest[open..].find('}') else {
                break;
            };
            let key = &rest[open + 1..open + close];
            out.push_str(&rest[..open]);
            match vars.get(key) {
                Some(v) => out.push_str(v),
                None if key == "truth" => return Err(AlgoError::MissingTruth(self.name.clone())),
                None => {
                    return Err(AlgoError::UnknownPlaceholder {
                        algo: self.name.clone(),
                        name: key.to_string(),
                    })
                }
            }
            rest = &rest[open + close + 1..];
        }
        out.push_str(rest);
        Ok(out)
    }

    /// Output levels in `outdir`, ordered finest to coarsest by their
    /// natural file-name order.
    pub fn collect_levels(&self, outdir: &Path) -> io::Result<Vec<PathBuf>> {
        collect_cnl_files(outdir)
    }
}

/// `*.cnl` files of a directory in natural name order (`level_2` before
/// `level_10`).
pub fn collect_cnl_files(dir: &Path) -> io::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "cnl"))
        .collect();
    files.sort_by_cached_key(|p| natural_key(&p.file_name().unwrap_or_default().to_string_lossy()));
    Ok(files)
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Chunk {
    Num(u128, usize),
    Text(String),
}

fn natural_key(name: &str) -> Vec<Chunk> {
    let mut out = Vec::new();
    let mut chars = name.chars().peekable();
    while let Some(&c) = chars.peek() {
        let digit = c.is_ascii_digit();
        let mut buf = String::new();
        while let Some(&d) = chars.peek() {
            if d.is_ascii_digit() != digit {
                break;
            }
            buf.push(d);
            chars.next();
        }
        out.push(if digit {
            Chunk::Num(buf.parse().unwrap_or(u128::MAX), buf.len())
        } else {
            Chunk::Text(buf)
        });
    }
    out
}

/// Alphabetical registry of adapters.
#[derive(Clone, Debug, Default)]
pub struct Registry {
    adapters: BTreeMap<String, AlgoAdapter>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, adapter: AlgoAdapter) -> Result<(), AlgoError> {
        if self.adapters.contains_key(adapter.name()) {
            return Err(AlgoError::Duplicate(adapter.name.clone()));
        }
        self.adapters.insert(adapter.name.clone(), adapter);
        Ok(())
    }

    pub fn lookup(&self, name: &str) -> Result<&AlgoAdapter, AlgoError> {
        self.adapters
            .get(name)
            .ok_or_else(|| AlgoError::Unknown(name.to_string()))
    }

    pub fn names(&self) -> Vec<&str> {
        self.adapters.keys().map(String::as_str).collect()
    }
}

/// Refills the ground-truth cluster-size templates with connected node
/// sets grown breadth-first from random seeds. Each node is used at most
/// once; templates left without nodes are omitted.
pub fn randcommuns(net: &Network, truth: &Clustering, seed: u64) -> Clustering {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sizes = truth.sizes();
    sizes.shuffle(&mut rng);
    let adj = net.adjacency();
    let n = net.node_count();
    let mut unused: Vec<usize> = (0..n).collect();
    let mut slot: Vec<usize> = (0..n).collect();
    let mut used = vec![false; n];
    let mut take = |v: usize, unused: &mut Vec<usize>, used: &mut Vec<bool>| {
        used[v] = true;
        let i = slot[v];
        let last = *unused.last().expect("node is unused");
        unused.swap_remove(i);
        if last != v {
            slot[last] = i;
        }
    };
    let mut clusters = Vec::new();
    for size in sizes {
        if unused.is_empty() {
            break;
        }
        let start = unused[rng.gen_range(0..unused.len())];
        take(start, &mut unused, &mut used);
        let mut members = vec![start];
        let mut queue = VecDeque::from([start]);
        'grow: while members.len() < size {
            let Some(v) = queue.pop_front() else { break };
            let mut nbrs = adj[v].clone();
            nbrs.shuffle(&mut rng);
            for u in nbrs {
                if !used[u] {
                    take(u, &mut unused, &mut used);
                    members.push(u);
                    queue.push_back(u);
                    if members.len() == size {
                        break 'grow;
                    }
                }
            }
        }
        clusters.push(
            members
                .into_iter()
                .map(|i| net.nodes()[i].clone())
                .collect(),
        );
    }
    Clustering::new(clusters).expect("grown clusters are non-empty and disjoint")
}

/// Indices of the levels kept when unifying `count` levels to `l`:
/// all of them when `count <= l`, otherwise `round(i * (count - 1) / (l - 1))`
/// for `i` in `0..l`. With `l == 1` only the finest level is kept.
pub fn select_level_indices(count: usize, l: usize) -> Result<Vec<usize>, AlgoError> {
    if count == 0 {
        return Err(AlgoError::NoLevels);
    }
    if l == 0 {
        return Err(AlgoError::ZeroLevels);
    }
    if count <= l {
        return Ok((0..count).collect());
    }
    if l == 1 {
        return Ok(vec![0]);
    }
    let span = count - 1;
    let steps = l - 1;
    // Integer round-half-up of i * span / steps.
    Ok((0..l)
        .map(|i| (2 * i * span + steps) / (2 * steps))
        .collect())
}

/// Selects `l` of the ordered `level_files`.
pub fn unify_levels(level_files: &[PathBuf], l: usize) -> Result<Vec<PathBuf>, AlgoError> {
    let idx = select_level_indices(level_files.len(), l)?;
    Ok(idx.into_iter().map(|i| level_files[i].clone()).collect())
}

/// Unifies the levels an algorithm wrote into `shuffle_dir`: the directory
/// moves to its `-orig` sibling and is recreated with `level_<k>.cnl`
/// links (copies where links are unavailable) to the selected originals.
pub fn unify_output_dir(shuffle_dir: &Path, l: usize) -> Result<Vec<PathBuf>, AlgoError> {
    let files = collect_cnl_files(shuffle_dir)?;
    let selected = unify_levels(&files, l)?;
    let dir_name = shuffle_dir
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "output dir has no name"))?
        .to_string_lossy()
        .into_owned();
    let orig = shuffle_dir.with_file_name(format!("{dir_name}-orig"));
    if orig.exists() {
        fs::remove_dir_all(&orig)?;
    }
    fs::rename(shuffle_dir, &orig)?;
    fs::create_dir_all(shuffle_dir)?;
    let mut out = Vec::with_capacity(selected.len());
    let mut seen = HashSet::new();
    for (k, src) in selected.iter().enumerate() {
        let file = src.file_name().expect("collected files have names");
        debug_assert!(seen.insert(file.to_owned()));
        let target = Path::new("..").join(format!("{dir_name}-orig")).join(file);
        let link = shuffle_dir.join(format!("level_{k}.cnl"));
        if std::os::unix::fs::symlink(&target, &link).is_err() {
            fs::copy(orig.join(file), &link)?;
        }
        out.push(link);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netdata::gen_planted_partition;
    use proptest::prelude::*;

    fn inputs<'a>(net: &'a Path, out: &'a Path, truth: Option<&'a Path>) -> RunInputs<'a> {
        RunInputs {
            net,
            outdir: out,
            seed: 42,
            truth,
        }
    }

    #[test]
    fn registry_lookup_and_listing() {
        let mut r = Registry::new();
        for name in ["louvain", "daoc", "scp"] {
            r.register(AlgoAdapter::template(name, &format!("{name} {{net}}")).unwrap())
                .unwrap();
        }
        assert_eq!(r.lookup("louvain").unwrap().name(), "louvain");
        assert!(matches!(r.lookup("nope"), Err(AlgoError::Unknown(_))));
        assert!(matches!(
            r.register(AlgoAdapter::template("scp", "x").unwrap()),
            Err(AlgoError::Duplicate(_))
        ));
        assert_eq!(r.names(), vec!["daoc", "louvain", "scp"]);
    }

    #[test]
    fn template_substitution() {
        let a = AlgoAdapter::template(
            "x",
            "bin/x -i {net} --out={outdir}/c.cnl -s {seed} -g {gamma}",
        )
        .unwrap()
        .with_param("gamma", "1");
        let params = BTreeMap::from([("gamma".to_string(), "0.5".to_string())]);
        let argv = a
            .build_argv(&inputs(Path::new("n.nse"), Path::new("/o"), None), &params)
            .unwrap();
        assert_eq!(
            argv,
            vec![
                "bin/x",
                "-i",
                "n.nse",
                "--out=/o/c.cnl",
                "-s",
                "42",
                "-g",
                "0.5"
            ]
        );
        let defaults = a
            .build_argv(
                &inputs(Path::new("n"), Path::new("o"), None),
                &BTreeMap::new(),
            )
            .unwrap();
        assert_eq!(defaults[7], "1");
        let bad = AlgoAdapter::template("y", "y {nope}").unwrap();
        assert!(matches!(
            bad.build_argv(
                &inputs(Path::new("n"), Path::new("o"), None),
                &BTreeMap::new()
            ),
            Err(AlgoError::UnknownPlaceholder { .. })
        ));
        let t = AlgoAdapter::template("t", "t {truth}").unwrap();
        assert!(t.needs_truth());
        assert!(matches!(
            t.build_argv(
                &inputs(Path::new("n"), Path::new("o"), None),
                &BTreeMap::new()
            ),
            Err(AlgoError::MissingTruth(_))
        ));
        assert!(AlgoAdapter::template("e", "  ").is_err());
    }

    #[test]
    fn randcommuns_argv() {
        let a = AlgoAdapter::randcommuns("/bin/cb");
        let argv = a
            .build_argv(
                &inputs(
                    Path::new("n.nse"),
                    Path::new("/o"),
                    Some(Path::new("t.cnl")),
                ),
                &BTreeMap::new(),
            )
            .unwrap();
        assert_eq!(
            argv.join(" "),
            "/bin/cb randcommuns --net n.nse --truth t.cnl --seed 42 --out /o/level_0.cnl"
        );
    }

    #[test]
    fn natural_level_order() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["level_10.cnl", "level_2.cnl", "level_1.cnl", "notes.txt"] {
            fs::write(dir.path().join(name), "1\n").unwrap();
        }
        let names: Vec<String> = collect_cnl_files(dir.path())
            .unwrap()
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, vec!["level_1.cnl", "level_2.cnl", "level_10.cnl"]);
    }

    #[test]
    fn randcommuns_single_template_takes_connected_graph() {
        let (net, _) = gen_planted_partition(20, 2, 0.8, 0.2, 1).unwrap();
        let truth = Clustering::new(vec![net.nodes().to_vec()]).unwrap();
        let c = randcommuns(&net, &truth, 3);
        assert_eq!(c.len(), 1);
        assert_eq!(c.sizes(), vec![20]);
    }

    #[test]
    fn randcommuns_omits_templates_beyond_node_count() {
        let (net, _) = gen_planted_partition(6, 1, 1.0, 0.0, 1).unwrap();
        let ids: Vec<String> = net.nodes().to_vec();
        let truth =
            Clustering::new(vec![ids.clone(), ids[..4].to_vec(), ids[2..].to_vec()]).unwrap();
        let c = randcommuns(&net, &truth, 9);
        assert!(c.len() < 3);
        assert_eq!(c.sizes().iter().sum::<usize>(), 6);
    }

    fn connected(net: &Network, members: &[String]) -> bool {
        let idx: HashSet<usize> = members.iter().map(|m| net.node_index(m).unwrap()).collect();
        let adj = net.adjacency();
        let start = *idx.iter().next().unwrap();
        let mut seen = HashSet::from([start]);
        let mut stack = vec![start];
        while let Some(v) = stack.pop() {
            for &u in &adj[v] {
                if idx.contains(&u) && seen.insert(u) {
                    stack.push(u);
                }
            }
        }
        seen.len() == idx.len()
    }

    #[test]
    fn randcommuns_on_disjoint_cliques_over_many_seeds() {
        let (net, truth) = gen_planted_partition(12, 3, 1.0, 0.0, 1).unwrap();
        for seed in 0..500 {
            let c = randcommuns(&net, &truth, seed);
            assert!(c.is_disjoint());
            assert!(c.sizes().iter().sum::<usize>() <= 12);
            for cl in c.clusters() {
                assert!(connected(&net, cl));
            }
        }
    }

    #[test]
    fn level_selection_examples() {
        assert_eq!(
            select_level_indices(25, 10).unwrap(),
            vec![0, 3, 5, 8, 11, 13, 16, 19, 21, 24]
        );
        assert_eq!(
            select_level_indices(7, 10).unwrap(),
            (0..7).collect::<Vec<_>>()
        );
        assert_eq!(select_level_indices(1, 10).unwrap(), vec![0]);
        assert_eq!(select_level_indices(5, 1).unwrap(), vec![0]);
        assert!(matches!(
            select_level_indices(0, 10),
            Err(AlgoError::NoLevels)
        ));
        assert!(matches!(
            select_level_indices(3, 0),
            Err(AlgoError::ZeroLevels)
        ));
    }

    #[test]
    fn output_dir_unification_keeps_originals() {
        let root = tempfile::tempdir().unwrap();
        let dir = root.path().join("1");
        fs::create_dir(&dir).unwrap();
        for i in 0..25 {
            fs::write(dir.join(format!("lev{i}.cnl")), format!("{i}\n")).unwrap();
        }
        let out = unify_output_dir(&dir, 10).unwrap();
        assert_eq!(out.len(), 10);
        assert_eq!(fs::read_to_string(&out[1]).unwrap(), "3\n");
        assert_eq!(fs::read_to_string(&out[9]).unwrap(), "24\n");
        assert_eq!(
            collect_cnl_files(&root.path().join("1-orig"))
                .unwrap()
                .len(),
            25
        );
    }

    proptest! {
        #[test]
        fn randcommuns_invariants(n in 5usize..40, k in 1usize..5, seed in any::<u64>(), gseed in any::<u64>()) {
            let k = k.min(n);
            let (net, truth) = gen_planted_partition(n, k, 0.6, 0.05, gseed).unwrap();
            let c = randcommuns(&net, &truth, seed);
            prop_assert!(c.is_disjoint());
            for cl in c.clusters() {
                prop_assert!(connected(&net, cl));
            }
            let mut got = c.sizes();
            let mut want = truth.sizes();
            got.sort_unstable_by(|a, b| b.cmp(a));
            want.sort_unstable_by(|a, b| b.cmp(a));
            prop_assert!(got.len() <= want.len());
            for (g, w) in got.iter().zip(&want) {
                prop_assert!(g <= w);
            }
            prop_assert_eq!(c, randcommuns(&net, &truth, seed));
        }

        #[test]
        fn level_selection_matches_float_formula(count in 1usize..=100, l in 1usize..=20) {
            let got = select_level_indices(count, l).unwrap();
            prop_assert_eq!(got.len(), count.min(l));
            prop_assert_eq!(got[0], 0);
            if l >= 2 || count == 1 {
                prop_assert_eq!(*got.last().unwrap(), count - 1);
            }
            if count > l && l >= 2 {
                for (i, &g) in got.iter().enumerate() {
                    let expect = (i as f64 * (count - 1) as f64 / (l - 1) as f64).round() as usize;
                    prop_assert_eq!(g, expect);
                }
            }
            prop_assert!(got.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
