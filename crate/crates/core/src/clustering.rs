//! Clusterings and the cnl format: one cluster per line, node ids separated
//! by whitespace, `#` comments.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ClusteringError {
    #[error("cluster {0} is empty")]
    EmptyCluster(usize),
    #[error("node '{node}' appears twice in cluster {cluster}")]
    DuplicateNode { cluster: usize, node: String },
    #[error("{path}: line {line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A set of clusters over opaque node ids. Overlaps are allowed.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Clustering {
    clusters: Vec<Vec<String>>,
}

impl Clustering {
    pub fn new(clusters: Vec<Vec<String>>) -> Result<Self, ClusteringError> {
        for (i, c) in clusters.iter().enumerate() {
            if c.is_empty() {
                return Err(ClusteringError::EmptyCluster(i));
            }
            let mut seen = HashSet::with_capacity(c.len());
            for n in c {
                if !seen.insert(n.as_str()) {
                    return Err(ClusteringError::DuplicateNode {
                        cluster: i,
                        node: n.clone(),
                    });
                }
            }
        }
        Ok(Clustering { clusters })
    }

    /// Convenience constructor for anything displayable, e.g. integer ids.
    pub fn from_ids<T: ToString>(clusters: &[Vec<T>]) -> Result<Self, ClusteringError> {
        Self::new(
            clusters
                .iter()
                .map(|c| c.iter().map(ToString::to_string).collect())
                .collect(),
        )
    }

    pub fn clusters(&self) -> &[Vec<String>] {
        &self.clusters
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.clusters.iter().map(Vec::len).collect()
    }

    /// Every node that belongs to at least one cluster.
    pub fn nodes(&self) -> BTreeSet<&str> {
        self.clusters.iter().flatten().map(String::as_str).collect()
    }

    /// True when no node belongs to two clusters.
    pub fn is_disjoint(&self) -> bool {
        let mut seen = HashSet::new();
        self.clusters
            .iter()
            .flatten()
            .all(|n| seen.insert(n.as_str()))
    }

    pub fn parse_cnl(text: &str, origin: &str) -> Result<Self, ClusteringError> {
        let mut clusters = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let members: Vec<String> = line.split_whitespace().map(str::to_string).collect();
            let mut seen = HashSet::new();
            if let Some(dup) = members.iter().find(|m| !seen.insert(m.as_str())) {
                return Err(ClusteringError::Parse {
                    path: origin.to_string(),
                    line: idx + 1,
                    reason: format!("duplicate node '{dup}'"),
                });
            }
            clusters.push(members);
        }
        Ok(Clustering { clusters })
    }

    pub fn to_cnl_string(&self) -> String {
        let mut out = format!(
            "# Clusters: {} Nodes: {}\n",
            self.clusters.len(),
            self.nodes().len()
        );
        for c in &self.clusters {
            out.push_str(&c.join(" "));
            out.push('\n');
        }
        out
    }
}

pub fn read_cnl(path: &Path) -> Result<Clustering, ClusteringError> {
    let text = fs::read_to_string(path)?;
    Clustering::parse_cnl(&text, &path.display().to_string())
}

pub fn write_cnl(c: &Clustering, path: &Path) -> io::Result<()> {
    fs::write(path, c.to_cnl_string())
}
