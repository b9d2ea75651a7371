//! Network files in the nsl family (`.nse` undirected edges, `.nsa`
//! directed arcs) and `.ncol`, deterministic shuffling, and a
//! planted-partition generator.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clustering::Clustering;

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("{path}: line {line}: {reason}")]
    Malformed {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("{path}: line {line}: duplicate edge {src} {dst}")]
    DuplicateEdge {
        path: String,
        line: usize,
        src: String,
        dst: String,
    },
    #[error("unsupported network extension '{0}' (expected nse, nsa or ncol)")]
    UnknownFormat(String),
    #[error("invalid generator parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
}

/// A graph over opaque node ids. Nodes are kept in enumeration order;
/// edges reference them by position.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Network {
    nodes: Vec<String>,
    index: HashMap<String, usize>,
    edges: Vec<Edge>,
    pub directed: bool,
    pub weighted: bool,
}

impl Network {
    pub fn new(directed: bool, weighted: bool) -> Self {
        Network {
            directed,
            weighted,
            ..Default::default()
        }
    }

    /// Returns the node's position, adding it if unseen.
    pub fn add_node(&mut self, id: &str) -> usize {
        if let Some(&i) = self.index.get(id) {
            return i;
        }
        let i = self.nodes.len();
        self.nodes.push(id.to_string());
        self.index.insert(id.to_string(), i);
        i
    }

    /// Adds an edge without duplicate checking.
    pub fn push_edge(&mut self, src: &str, dst: &str, weight: f64) {
        let src = self.add_node(src);
        let dst = self.add_node(dst);
        self.edges.push(Edge { src, dst, weight });
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn total_weight(&self) -> f64 {
        self.edges.iter().map(|e| e.weight).sum()
    }

    /// Undirected adjacency lists by node position.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for e in &self.edges {
            adj[e.src].push(e.dst);
            if e.src != e.dst {
                adj[e.dst].push(e.src);
            }
        }
        adj
    }

    /// Edges as id triples, endpoints ordered for undirected networks.
    pub fn edge_multiset(&self) -> Vec<(String, String, u64)> {
        let mut out: Vec<(String, String, u64)> = self
            .edges
            .iter()
            .map(|e| {
                let (mut a, mut b) = (self.nodes[e.src].clone(), self.nodes[e.dst].clone());
                if !self.directed && b < a {
                    std::mem::swap(&mut a, &mut b);
                }
                (a, b, e.weight.to_bits())
            })
            .collect();
        out.sort();
        out
    }

    pub fn to_nsl_string(&self) -> String {
        let mut out = String::new();
        let kind = if self.directed { "Arcs" } else { "Edges" };
        writeln!(
            out,
            "# Nodes: {} {kind}: {} Weighted: {}",
            self.nodes.len(),
            self.edges.len(),
            u8::from(self.weighted)
        )
        .unwrap();
        for e in &self.edges {
            out.push_str(&self.nodes[e.src]);
            out.push(' ');
            out.push_str(&self.nodes[e.dst]);
            if self.weighted {
                write!(out, " {}", e.weight).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetFormat {
    Nse,
    Nsa,
    Ncol,
}

impl NetFormat {
    pub fn from_path(path: &Path) -> Result<NetFormat, NetError> {
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        match ext {
            "nse" => Ok(NetFormat::Nse),
            "nsa" => Ok(NetFormat::Nsa),
            "ncol" => Ok(NetFormat::Ncol),
            other => Err(NetError::UnknownFormat(other.to_string())),
        }
    }
}

struct Header {
    nodes: Option<usize>,
    links: Option<usize>,
    weighted: Option<bool>,
}

fn parse_header(line: &str) -> Option<Header> {
    let body = line.trim_start_matches('#').trim();
    if !body.starts_with("Nodes:") {
        return None;
    }
    let mut h = Header {
        nodes: None,
        links: None,
        weighted: None,
    };
    let tokens: Vec<&str> = body.split_whitespace().collect();
    for pair in tokens.windows(2) {
        let value = pair[1].trim_end_matches(',');
        match pair[0] {
            "Nodes:" => h.nodes = value.parse().ok(),
            "Edges:" | "Arcs:" => h.links = value.parse().ok(),
            "Weighted:" => h.weighted = value.parse::<u8>().ok().map(|w| w != 0),
            _ => {}
        }
    }
    Some(h)
}

/// Parses network text. `origin` only labels error messages.
pub fn parse_nsl(text: &str, format: NetFormat, origin: &str) -> Result<Network, NetError> {
    let mut net = Network::new(format == NetFormat::Nsa, false);
    let mut header = None;
    let mut seen: HashSet<(usize, usize)> = HashSet::new();
    let mut any_weight = false;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('#') {
            if header.is_none() {
                header = parse_header(line);
            }
            continue;
        }
        let bad = |reason: String| NetError::Malformed {
            path: origin.to_string(),
            line: line_no,
            reason,
        };
        let cols: Vec<&str> = line.split_whitespace().collect();
        let weight = match cols.len() {
            2 => 1.0,
            3 => {
                any_weight = true;
                let w: f64 = cols[2]
                    .parse()
                    .map_err(|_| bad(format!("bad weight '{}'", cols[2])))?;
                if !(w.is_finite() && w > 0.0) {
                    return Err(bad(format!("weight must be positive, got '{}'", cols[2])));
                }
                w
            }
            n => return Err(bad(format!("expected 2 or 3 columns, got {n}"))),
        };
        let src = net.add_node(cols[0]);
        let dst = net.add_node(cols[1]);
        let key = if net.directed {
            (src, dst)
        } else {
            (src.min(dst), src.max(dst))
        };
        if !seen.insert(key) {
            return Err(NetError::DuplicateEdge {
                path: origin.to_string(),
                line: line_no,
                src: cols[0].to_string(),
                dst: cols[1].to_string(),
            });
        }
        net.edges.push(Edge { src, dst, weight });
    }
    net.weighted = header.as_ref().and_then(|h| h.weighted).unwrap_or(false) || any_weight;
    if let Some(h) = header {
        if h.nodes.is_some_and(|n| n != net.node_count())
            || h.links.is_some_and(|m| m != net.edge_count())
        {
            log::warn!(
                "{origin}: header counts ({:?} nodes, {:?} links) differ from actual ({} nodes, {} links); using actual",
                h.nodes,
                h.links,
                net.node_count(),
                net.edge_count()
            );
        }
    }
    Ok(net)
}

pub fn read_nsl(path: &Path) -> Result<Network, NetError> {
    let format = NetFormat::from_path(path)?;
    let text = fs::read_to_string(path)?;
    parse_nsl(&text, format, &path.display().to_string())
}

pub fn write_nsl(net: &Network, path: &Path) -> io::Result<()> {
    fs::write(path, net.to_nsl_string())
}

/// Reorders nodes and edge lines with a generator seeded by `(seed, k)`.
/// Shuffle 0 is the input itself.
pub fn shuffle(net: &Network, k: u64, seed: u64) -> Network {
    if k == 0 {
        return net.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    let mut order: Vec<usize> = (0..net.nodes.len()).collect();
    order.shuffle(&mut rng);
    let mut rank = vec![0; order.len()];
    for (new, &old) in order.iter().enumerate() {
        rank[old] = new;
    }
    let mut edges: Vec<Edge> = net
        .edges
        .iter()
        .map(|e| {
            let (mut src, mut dst) = (rank[e.src], rank[e.dst]);
            if !net.directed && rng.gen::<bool>() {
                std::mem::swap(&mut src, &mut dst);
            }
            Edge {
                src,
                dst,
                weight: e.weight,
            }
        })
        .collect();
    edges.shuffle(&mut rng);
    let nodes: Vec<String> = order.iter().map(|&old| net.nodes[old].clone()).collect();
    let index = nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.clone(), i))
        .collect();
    Network {
        nodes,
        index,
        edges,
        directed: net.directed,
        weighted: net.weighted,
    }
}

/// Positions `lo..hi` selected independently with probability `p`, using
/// geometric skips so sparse draws cost O(selected).
fn bernoulli_run(rng: &mut ChaCha8Rng, lo: usize, hi: usize, p: f64, mut hit: impl FnMut(usize)) {
    if p <= 0.0 || lo >= hi {
        return;
    }
    if p >= 1.0 {
        (lo..hi).for_each(hit);
        return;
    }
    let log_q = (1.0 - p).ln();
    let mut pos = lo;
    loop {
        let u: f64 = 1.0 - rng.gen::<f64>();
        let skip = (u.ln() / log_q).floor();
        if skip >= (hi - pos) as f64 {
            return;
        }
        pos += skip as usize;
        hit(pos);
        pos += 1;
        if pos >= hi {
            return;
        }
    }
}

/// Undirected planted-partition network over nodes `0..n_nodes` with
/// contiguous clusters of equal size (±1).
pub fn gen_planted_partition(
    n_nodes: usize,
    n_clusters: usize,
    p_in: f64,
    p_out: f64,
    seed: u64,
) -> Result<(Network, Clustering), NetError> {
    if n_clusters == 0 || n_clusters > n_nodes {
        return Err(NetError::InvalidParams(format!(
            "need 1 <= clusters <= nodes, got {n_clusters} clusters for {n_nodes} nodes"
        )));
    }
    if !(0.0 <= p_out && p_out < p_in && p_in <= 1.0) {
        return Err(NetError::InvalidParams(format!(
            "need 0 <= p_out < p_in <= 1, got p_in={p_in} p_out={p_out}"
        )));
    }
    let base = n_nodes / n_clusters;
    let extra = n_nodes % n_clusters;
    let mut bounds = Vec::with_capacity(n_clusters + 1);
    bounds.push(0);
    for c in 0..n_clusters {
        bounds.push(bounds[c] + base + usize::from(c < extra));
    }
    let mut net = Network::new(false, false);
    for i in 0..n_nodes {
        net.add_node(&i.to_string());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for c in 0..n_clusters {
        for i in bounds[c]..bounds[c + 1] {
            let mut hits = Vec::new();
            bernoulli_run(&mut rng, i + 1, bounds[c + 1], p_in, |j| hits.push(j));
            bernoulli_run(&mut rng, bounds[c + 1], n_nodes, p_out, |j| hits.push(j));
            for j in hits {
                net.edges.push(Edge {
                    src: i,
                    dst: j,
                    weight: 1.0,
                });
            }
        }
    }
    let truth = Clustering::new(
        bounds
            .windows(2)
            .map(|w| (w[0]..w[1]).map(|i| i.to_string()).collect())
            .collect(),
    )
    .expect("planted clusters are non-empty and duplicate-free");
    Ok((net, truth))
}

/// `<datadir>/<nettype>^<instance>/<basename>^<shuffle>.nse`
pub fn shuffle_path(
    datadir: &Path,
    nettype: &str,
    instance: &str,
    basename: &str,
    shuffle: u64,
) -> PathBuf {
    datadir
        .join(format!("{nettype}^{instance}"))
        .join(format!("{basename}^{shuffle}.nse"))
}

/// Splits a dataset file stem `<nettype>^<instance>` (instance optional).
pub fn split_dataset_stem(stem: &str) -> (String, Option<String>) {
    match stem.split_once('^') {
        Some((t, i)) => (t.to_string(), Some(i.to_string())),
        None => (stem.to_string(), None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn nse(text: &str) -> Result<Network, NetError> {
        parse_nsl(text, NetFormat::Nse, "t.nse")
    }

    #[test]
    fn triangle() {
        let net = nse("a b\nb c\na c\n").unwrap();
        assert_eq!((net.node_count(), net.edge_count()), (3, 3));
        assert!(!net.weighted && !net.directed);
        assert_eq!(
            net.to_nsl_string(),
            "# Nodes: 3 Edges: 3 Weighted: 0\na b\nb c\na c\n"
        );
    }

    #[test]
    fn weighted_line() {
        let net = nse("# Nodes: 2 Edges: 1 Weighted: 1\na b 2.5\n").unwrap();
        assert!(net.weighted);
        assert_eq!(net.edges()[0].weight, 2.5);
        assert_eq!(net.to_nsl_string().lines().nth(1), Some("a b 2.5"));
    }

    #[test]
    fn duplicate_undirected_edge_is_an_error() {
        let err = nse("a b\nb a\n").unwrap_err();
        assert!(
            matches!(err, NetError::DuplicateEdge { line: 2, .. }),
            "{err}"
        );
        let directed = parse_nsl("a b\nb a\n", NetFormat::Nsa, "t.nsa").unwrap();
        assert_eq!(directed.edge_count(), 2);
        assert!(directed.to_nsl_string().starts_with("# Nodes: 2 Arcs: 2"));
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let err = nse("# c\na b\na\n").unwrap_err();
        assert_eq!(
            err.to_string(),
            "t.nse: line 3: expected 2 or 3 columns, got 1"
        );
        assert!(nse("a b x\n").is_err());
        assert!(nse("a b -1\n").is_err());
        assert!(nse("a b 0\n").is_err());
    }

    #[test]
    fn header_mismatch_keeps_actual_counts() {
        let net = nse("# Nodes: 10 Edges: 7 Weighted: 0\na b\n").unwrap();
        assert_eq!((net.node_count(), net.edge_count()), (2, 1));
    }

    #[test]
    fn ncol_weighting_by_columns() {
        let net = parse_nsl("a b 3\nb c 1\n", NetFormat::Ncol, "x.ncol").unwrap();
        assert!(net.weighted && !net.directed);
        let net = parse_nsl("a b\n", NetFormat::Ncol, "x.ncol").unwrap();
        assert!(!net.weighted);
    }

    #[test]
    fn extension_selects_format() {
        assert_eq!(
            NetFormat::from_path(Path::new("x.nsa")).unwrap(),
            NetFormat::Nsa
        );
        assert!(NetFormat::from_path(Path::new("x.txt")).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.nse");
        let net = nse("x y 1.5\ny z 2\n").unwrap();
        write_nsl(&net, &path).unwrap();
        assert_eq!(read_nsl(&path).unwrap(), net);
    }

    #[test]
    fn shuffle_zero_is_identity_and_shuffles_are_deterministic() {
        let (net, _) = gen_planted_partition(30, 3, 0.5, 0.05, 3).unwrap();
        assert_eq!(shuffle(&net, 0, 9).to_nsl_string(), net.to_nsl_string());
        let s1 = shuffle(&net, 1, 9);
        assert_eq!(s1.to_nsl_string(), shuffle(&net, 1, 9).to_nsl_string());
        assert_ne!(s1.to_nsl_string(), net.to_nsl_string());
        assert_ne!(s1.to_nsl_string(), shuffle(&net, 2, 9).to_nsl_string());
        assert_eq!(s1.edge_multiset(), net.edge_multiset());
    }

    #[test]
    fn planted_extremes_give_disjoint_cliques() {
        let (net, truth) = gen_planted_partition(12, 3, 1.0, 0.0, 5).unwrap();
        assert_eq!(net.edge_count(), 3 * 6);
        assert_eq!(truth.sizes(), vec![4, 4, 4]);
        for e in net.edges() {
            assert_eq!(e.src / 4, e.dst / 4);
        }
    }

    #[test]
    fn planted_sizes_and_validation() {
        let (_, truth) = gen_planted_partition(10, 3, 0.5, 0.1, 1).unwrap();
        assert_eq!(truth.sizes(), vec![4, 3, 3]);
        assert!(gen_planted_partition(10, 11, 0.5, 0.1, 1).is_err());
        assert!(gen_planted_partition(10, 2, 0.1, 0.1, 1).is_err());
        assert!(gen_planted_partition(10, 2, 1.1, 0.1, 1).is_err());
        assert!(gen_planted_partition(10, 0, 0.5, 0.1, 1).is_err());
    }

    #[test]
    fn planted_density_matches_probabilities() {
        let (net, _) = gen_planted_partition(400, 4, 0.2, 0.01, 17).unwrap();
        let (mut intra, mut inter) = (0usize, 0usize);
        for e in net.edges() {
            if e.src / 100 == e.dst / 100 {
                intra += 1;
            } else {
                inter += 1;
            }
        }
        let intra_pairs = 4.0 * 100.0 * 99.0 / 2.0;
        let inter_pairs = 400.0 * 399.0 / 2.0 - intra_pairs;
        let pi = intra as f64 / intra_pairs;
        let po = inter as f64 / inter_pairs;
        assert!((pi - 0.2).abs() < 0.02, "{pi}");
        assert!((po - 0.01).abs() < 0.003, "{po}");
    }

    #[test]
    fn dataset_paths() {
        let p = shuffle_path(Path::new("/d"), "lfr", "2", "net", 3);
        assert_eq!(p, PathBuf::from("/d/lfr^2/net^3.nse"));
        assert_eq!(
            split_dataset_stem("lfr^2"),
            ("lfr".to_string(), Some("2".to_string()))
        );
        assert_eq!(split_dataset_stem("karate"), ("karate".to_string(), None));
    }

    fn arb_net() -> impl Strategy<Value = Network> {
        (
            any::<bool>(),
            any::<bool>(),
            proptest::collection::vec((0u8..15, 0u8..15, 1u32..1000), 0..40),
        )
            .prop_map(|(directed, weighted, raw)| {
                let mut net = Network::new(directed, weighted);
                let mut seen = HashSet::new();
                for (a, b, w) in raw {
                    let key = if directed {
                        (a, b)
                    } else {
                        (a.min(b), a.max(b))
                    };
                    if seen.insert(key) {
                        let w = if weighted { w as f64 / 7.0 } else { 1.0 };
                        net.push_edge(&format!("n{a}"), &format!("n{b}"), w);
                    }
                }
                net
            })
    }

    proptest! {
        #[test]
        fn write_read_round_trip(net in arb_net()) {
            let format = if net.directed { NetFormat::Nsa } else { NetFormat::Nse };
            let back = parse_nsl(&net.to_nsl_string(), format, "p").unwrap();
            prop_assert_eq!(back.nodes(), net.nodes());
            prop_assert_eq!(back.edges(), net.edges());
            prop_assert_eq!(back.weighted, net.weighted);
        }

        #[test]
        fn shuffle_preserves_topology(net in arb_net(), k in 1u64..50, seed in any::<u64>()) {
            let s = shuffle(&net, k, seed);
            prop_assert_eq!(s.edge_multiset(), net.edge_multiset());
            let mut a = s.nodes().to_vec();
            let mut b = net.nodes().to_vec();
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);
            prop_assert_eq!((s.directed, s.weighted), (net.directed, net.weighted));
            // The shuffled text parses back to the same graph.
            let format = if net.directed { NetFormat::Nsa } else { NetFormat::Nse };
            let back = parse_nsl(&s.to_nsl_string(), format, "p").unwrap();
            prop_assert_eq!(back.edge_multiset(), net.edge_multiset());
        }
    }
}
