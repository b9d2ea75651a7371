//! Clustering quality measures.
//!
//! Intrinsic measures (modularity, conductance) score a clustering against
//! its network; nodes missing from the clustering count as singletons.
//! Extrinsic measures (NMI, Omega Index, F1) compare two clusterings.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::clustering::Clustering;
use crate::netdata::Network;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MeasureError {
    #[error("overlapping clusters are not supported by {0}")]
    Overlap(&'static str),
    #[error("node sets differ: {0} nodes in the symmetric difference")]
    NodeMismatch(usize),
    #[error("clustering node '{0}' is not in the network")]
    UnknownNode(String),
    #[error("empty clustering")]
    EmptyClustering,
    #[error("omega index needs at least two nodes")]
    NoPairs,
    #[error("network has no edge weight")]
    ZeroWeight,
    #[error("every cluster has zero volume on one side of its cut")]
    NoScorableCluster,
    #[error("unknown measure '{0}'")]
    Unknown(String),
    #[error("measure '{0}' needs {1}")]
    MissingInput(String, &'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

impl Direction {
    /// Whether `a` is a better score than `b`.
    pub fn better(&self, a: f64, b: f64) -> bool {
        match self {
            Direction::HigherBetter => a > b,
            Direction::LowerBetter => a < b,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// The built-in measures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Measure {
    Modularity,
    Conductance,
    Nmi,
    Omega,
    F1a,
    F1h,
}

impl Measure {
    pub const ALL: [Measure; 6] = [
        Measure::Conductance,
        Measure::F1a,
        Measure::F1h,
        Measure::Modularity,
        Measure::Nmi,
        Measure::Omega,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Measure::Modularity => "modularity",
            Measure::Conductance => "conductance",
            Measure::Nmi => "nmi",
            Measure::Omega => "omega",
            Measure::F1a => "f1a",
            Measure::F1h => "f1h",
        }
    }

    pub fn direction(&self) -> Direction {
        match self {
            Measure::Conductance => Direction::LowerBetter,
            _ => Direction::HigherBetter,
        }
    }

    pub fn domain(&self) -> &'static str {
        match self {
            Measure::Modularity => "[-0.5, 1]",
            Measure::Conductance => "[0, 1]",
            Measure::Omega => "(-1, 1]",
            _ => "[0, 1]",
        }
    }

    /// Extrinsic measures compare against a ground truth.
    pub fn needs_truth(&self) -> bool {
        !matches!(self, Measure::Modularity | Measure::Conductance)
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Measure {
    type Err = MeasureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Measure::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| MeasureError::Unknown(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeasureResult {
    pub measure: Measure,
    pub value: f64,
    pub direction: Direction,
    pub domain: &'static str,
}

/// Direction of a measure or efficiency column by name. Efficiency values
/// (`wall_s`, `cpu_s`, `peak_rss_mib`) are lower-better.
pub fn direction_of(name: &str) -> Option<Direction> {
    match name {
        "wall_s" | "cpu_s" | "peak_rss_mib" => Some(Direction::LowerBetter),
        _ => name.parse::<Measure>().ok().map(|m| m.direction()),
    }
}

/// Evaluates one measure. Intrinsic measures need `net`, extrinsic ones
/// `truth`.
pub fn evaluate(
    measure: Measure,
    net: Option<&Network>,
    cl: &Clustering,
    truth: Option<&Clustering>,
) -> Result<MeasureResult, MeasureError> {
    let need_net =
        || net.ok_or_else(|| MeasureError::MissingInput(measure.to_string(), "a network"));
    let need_truth =
        || truth.ok_or_else(|| MeasureError::MissingInput(measure.to_string(), "a ground truth"));
    let value = match measure {
        Measure::Modularity => modularity(need_net()?, cl)?,
        Measure::Conductance => conductance(need_net()?, cl)?,
        Measure::Nmi => nmi(cl, need_truth()?)?,
        Measure::Omega => omega_index(cl, need_truth()?)?,
        Measure::F1a => f1_scores(cl, need_truth()?)?.0,
        Measure::F1h => f1_scores(cl, need_truth()?)?.1,
    };
    Ok(MeasureResult {
        measure,
        value,
        direction: measure.direction(),
        domain: measure.domain(),
    })
}

/// Per-node cluster label over the network's nodes; unassigned nodes get
/// fresh singleton labels. Returns the labels and the label count.
fn disjoint_labels(
    net: &Network,
    c: &Clustering,
    measure: &'static str,
) -> Result<(Vec<usize>, usize), MeasureError> {
    if !c.is_disjoint() {
        return Err(MeasureError::Overlap(measure));
    }
    let mut label = vec![usize::MAX; net.node_count()];
    for (ci, cluster) in c.clusters().iter().enumerate() {
        for n in cluster {
            let i = net
                .node_index(n)
                .ok_or_else(|| MeasureError::UnknownNode(n.clone()))?;
            label[i] = ci;
        }
    }
    let mut next = c.len();
    for l in label.iter_mut().filter(|l| **l == usize::MAX) {
        *l = next;
        next += 1;
    }
    Ok((label, next))
}

/// Newman–Girvan modularity of a non-overlapping clustering. Edges are
/// taken as undirected.
pub fn modularity(net: &Network, c: &Clustering) -> Result<f64, MeasureError> {
    let w = net.total_weight();
    if w <= 0.0 {
        return Err(MeasureError::ZeroWeight);
    }
    let (label, count) = disjoint_labels(net, c, "modularity")?;
    let mut w_in = vec![0.0; count];
    let mut deg = vec![0.0; count];
    for e in net.edges() {
        let (a, b) = (label[e.src], label[e.dst]);
        deg[a] += e.weight;
        deg[b] += e.weight;
        if a == b {
            w_in[a] += e.weight;
        }
    }
    Ok(w_in
        .iter()
        .zip(&deg)
        .map(|(wi, d)| wi / w - (d / (2.0 * w)).powi(2))
        .sum())
}

/// Mean conductance over clusters: `cut(S) / min(vol(S), vol(V \ S))`.
/// Clusters with a zero denominator are skipped.
pub fn conductance(net: &Network, c: &Clustering) -> Result<f64, MeasureError> {
    let n = net.node_count();
    let mut strength = vec![0.0; n];
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for e in net.edges() {
        strength[e.src] += e.weight;
        strength[e.dst] += e.weight;
        adj[e.src].push((e.dst, e.weight));
        if e.src != e.dst {
            adj[e.dst].push((e.src, e.weight));
        }
    }
    let total_vol: f64 = strength.iter().sum();

    let mut members: Vec<Vec<usize>> = Vec::with_capacity(c.len());
    let mut assigned = vec![false; n];
    for cluster in c.clusters() {
        let mut m = Vec::with_capacity(cluster.len());
        for id in cluster {
            let i = net
                .node_index(id)
                .ok_or_else(|| MeasureError::UnknownNode(id.clone()))?;
            assigned[i] = true;
            m.push(i);
        }
        members.push(m);
    }
    members.extend((0..n).filter(|&i| !assigned[i]).map(|i| vec![i]));

    let mut inside = vec![false; n];
    let mut sum = 0.0;
    let mut scored = 0usize;
    for (ci, m) in members.iter().enumerate() {
        for &i in m {
            inside[i] = true;
        }
        let vol: f64 = m.iter().map(|&i| strength[i]).sum();
        let cut: f64 = m
            .iter()
            .flat_map(|&i| adj[i].iter())
            .filter(|(j, _)| !inside[*j])
            .map(|(_, w)| w)
            .sum();
        for &i in m {
            inside[i] = false;
        }
        let denom = vol.min(total_vol - vol);
        if denom <= 0.0 {
            log::warn!("conductance: cluster {ci} skipped (zero volume on one side)");
            continue;
        }
        sum += cut / denom;
        scored += 1;
    }
    if scored == 0 {
        return Err(MeasureError::NoScorableCluster);
    }
    Ok(sum / scored as f64)
}

/// Dense node indices over the shared universe of two clusterings.
fn shared_universe<'a>(
    a: &'a Clustering,
    b: &'a Clustering,
) -> Result<HashMap<&'a str, usize>, MeasureError> {
    let na = a.nodes();
    let nb = b.nodes();
    if na != nb {
        return Err(MeasureError::NodeMismatch(
            na.symmetric_difference(&nb).count(),
        ));
    }
    if na.is_empty() {
        return Err(MeasureError::EmptyClustering);
    }
    Ok(na.into_iter().enumerate().map(|(i, n)| (n, i)).collect())
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information of two disjoint covers of the same nodes,
/// normalized by the larger entropy. Two single-cluster partitions are
/// identical and score 1.
pub fn nmi(a: &Clustering, b: &Clustering) -> Result<f64, MeasureError> {
    if !a.is_disjoint() || !b.is_disjoint() {
        return Err(MeasureError::Overlap("nmi"));
    }
    let universe = shared_universe(a, b)?;
    let n = universe.len();
    let mut la = vec![0usize; n];
    let mut lb = vec![0usize; n];
    for (ci, cl) in a.clusters().iter().enumerate() {
        for v in cl {
            la[universe[v.as_str()]] = ci;
        }
    }
    for (ci, cl) in b.clusters().iter().enumerate() {
        for v in cl {
            lb[universe[v.as_str()]] = ci;
        }
    }
    let mut joint: HashMap<(usize, usize), usize> = HashMap::new();
    for i in 0..n {
        *joint.entry((la[i], lb[i])).or_default() += 1;
    }
    let nf = n as f64;
    let ha = entropy(a.sizes().into_iter(), nf);
    let hb = entropy(b.sizes().into_iter(), nf);
    let sa = a.sizes();
    let sb = b.sizes();
    let mi: f64 = joint
        .iter()
        .map(|(&(i, j), &nij)| {
            let nij = nij as f64;
            nij / nf * (nf * nij / (sa[i] as f64 * sb[j] as f64)).ln()
        })
        .sum();
    let norm = ha.max(hb);
    if norm == 0.0 {
        return Ok(1.0);
    }
    Ok((mi / norm).clamp(0.0, 1.0))
}

/// Co-membership count of every node pair that shares at least one cluster.
fn pair_counts(c: &Clustering, universe: &HashMap<&str, usize>) -> HashMap<(u32, u32), u32> {
    let mut out = HashMap::new();
    for cl in c.clusters() {
        let mut idx: Vec<u32> = cl.iter().map(|v| universe[v.as_str()] as u32).collect();
        idx.sort_unstable();
        for (k, &i) in idx.iter().enumerate() {
            for &j in &idx[k + 1..] {
                *out.entry((i, j)).or_insert(0) += 1;
            }
        }
    }
    out
}

/// Omega Index: pair-counting agreement on co-membership counts, corrected
/// for chance. Equals the Adjusted Rand Index on crisp partitions.
pub fn omega_index(a: &Clustering, b: &Clustering) -> Result<f64, MeasureError> {
    let universe = shared_universe(a, b)?;
    let n = universe.len() as u64;
    if n < 2 {
        return Err(MeasureError::NoPairs);
    }
    let pairs = n * (n - 1) / 2;
    let ca = pair_counts(a, &universe);
    let cb = pair_counts(b, &universe);

    let mut dist_a: HashMap<u32, u64> = HashMap::new();
    let mut dist_b: HashMap<u32, u64> = HashMap::new();
    for &t in ca.values() {
        *dist_a.entry(t).or_default() += 1;
    }
    for &t in cb.values() {
        *dist_b.entry(t).or_default() += 1;
    }
    dist_a.insert(0, pairs - ca.len() as u64);
    dist_b.insert(0, pairs - cb.len() as u64);

    let mut touched = ca.len() as u64;
    let mut agree = 0u64;
    for (k, ta) in &ca {
        if cb.get(k) == Some(ta) {
            agree += 1;
        }
    }
    for k in cb.keys() {
        if !ca.contains_key(k) {
            touched += 1;
        }
    }
    // Pairs together in neither clustering agree at count 0.
    agree += pairs - touched;

    let p = pairs as f64;
    let obs = agree as f64 / p;
    let exp: f64 = dist_a
        .iter()
        .map(|(t, &na)| na as f64 * dist_b.get(t).copied().unwrap_or(0) as f64)
        .sum::<f64>()
        / (p * p);
    if (1.0 - exp).abs() < 1e-15 {
        return Ok(if agree == pairs { 1.0 } else { 0.0 });
    }
    Ok((obs - exp) / (1.0 - exp))
}

/// Mean over `a`'s clusters of the best F1 match in `b`.
fn directional_f1(a: &Clustering, b: &Clustering) -> f64 {
    let mut member_of: HashMap<&str, Vec<usize>> = HashMap::new();
    for (j, cl) in b.clusters().iter().enumerate() {
        for v in cl {
            member_of.entry(v.as_str()).or_default().push(j);
        }
    }
    let sb = b.sizes();
    let mut total = 0.0;
    for cl in a.clusters() {
        let mut inter: HashMap<usize, usize> = HashMap::new();
        for v in cl {
            for &j in member_of.get(v.as_str()).into_iter().flatten() {
                *inter.entry(j).or_default() += 1;
            }
        }
        let best = inter
            .iter()
            .map(|(&j, &k)| 2.0 * k as f64 / (cl.len() + sb[j]) as f64)
            .fold(0.0, f64::max);
        total += best;
    }
    total / a.len() as f64
}

/// `(F1a, F1h)`: arithmetic and harmonic means of the two directional
/// best-match F1 averages.
pub fn f1_scores(a: &Clustering, b: &Clustering) -> Result<(f64, f64), MeasureError> {
    if a.is_empty() || b.is_empty() {
        return Err(MeasureError::EmptyClustering);
    }
    let fa = directional_f1(a, b);
    let fb = directional_f1(b, a);
    let f1a = (fa + fb) / 2.0;
    let f1h = if fa + fb > 0.0 {
        2.0 * fa * fb / (fa + fb)
    } else {
        0.0
    };
    Ok((f1a, f1h))
}
