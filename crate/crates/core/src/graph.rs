//! The agent network: symmetric nonnegative similarity weights, node degrees
//! and per-agent confidences.
//!
//! Graphs are immutable after construction. Builders reject disconnected
//! results because the solver's convergence constants assume a connected
//! graph; callers may lower the weight threshold and retry.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::vecops;

/// Weights below this are dropped by [`build_angle_graph`] when no explicit
/// threshold is given.
pub const DEFAULT_WEIGHT_THRESHOLD: f64 = 1e-8;

/// Lower bound applied by [`NetworkGraph::set_confidences`] so that every
/// confidence stays in (0, 1] even for agents without data.
pub const DEFAULT_CONFIDENCE_FLOOR: f64 = 0.01;

/// Weighted similarity graph over `n` agents.
///
/// Stored as sorted adjacency lists; `degrees[i]` is the row sum of the
/// weight matrix and `confidences[i]` lies in (0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    n: usize,
    adj: Vec<Vec<(usize, f64)>>,
    degrees: Vec<f64>,
    confidences: Vec<f64>,
}

impl NetworkGraph {
    /// Builds a graph from an undirected edge list. Each pair may appear at
    /// most once (in either orientation); zero-weight entries are dropped.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidInput("graph needs at least one agent".into()));
        }
        let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(i, j, w) in edges {
            if i >= n {
                return Err(Error::IndexOutOfRange { index: i, n });
            }
            if j >= n {
                return Err(Error::IndexOutOfRange { index: j, n });
            }
            if i == j {
                return Err(Error::InvalidInput(format!("self loop on agent {i}")));
            }
            if !w.is_finite() || w < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "edge ({i},{j}) has invalid weight {w}"
                )));
            }
            if w == 0.0 {
                continue;
            }
            if adj[i].iter().any(|&(k, _)| k == j) {
                return Err(Error::InvalidInput(format!("duplicate edge ({i},{j})")));
            }
            adj[i].push((j, w));
            adj[j].push((i, w));
        }
        for list in adj.iter_mut() {
            list.sort_by_key(|&(j, _)| j);
        }
        let degrees: Vec<f64> = adj
            .iter()
            .map(|list| list.iter().map(|&(_, w)| w).sum())
            .collect();
        let graph = NetworkGraph {
            n,
            adj,
            degrees,
            confidences: vec![1.0; n],
        };
        graph.check_connected()?;
        Ok(graph)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Neighbors of agent `i` with their weights, ascending by index.
    pub fn neighbors(&self, i: usize) -> Result<&[(usize, f64)]> {
        self.adj
            .get(i)
            .map(|v| v.as_slice())
            .ok_or(Error::IndexOutOfRange { index: i, n: self.n })
    }

    pub fn degree(&self, i: usize) -> f64 {
        self.degrees[i]
    }

    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    pub fn confidence(&self, i: usize) -> f64 {
        self.confidences[i]
    }

    pub fn confidences(&self) -> &[f64] {
        &self.confidences
    }

    /// Weight between `i` and `j` (0 when not adjacent).
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        match self.adj[i].binary_search_by_key(&j, |&(k, _)| k) {
            Ok(pos) => self.adj[i][pos].1,
            Err(_) => 0.0,
        }
    }

    pub fn edge_count(&self) -> usize {
        self.adj.iter().map(|l| l.len()).sum::<usize>() / 2
    }

    /// Row sums recomputed from the adjacency lists; equals `degrees()` by
    /// construction, exposed for invariant checks.
    pub fn recomputed_degrees(&self) -> Vec<f64> {
        self.adj
            .iter()
            .map(|list| list.iter().map(|&(_, w)| w).sum())
            .collect()
    }

    /// Confidences c_i = max(m_i / max_j m_j, floor).
    pub fn set_confidences(&self, dataset_sizes: &[usize], floor: f64) -> Result<Self> {
        if dataset_sizes.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: dataset_sizes.len(),
            });
        }
        if !(floor > 0.0 && floor <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "confidence floor {floor} must lie in (0,1]"
            )));
        }
        let max = *dataset_sizes.iter().max().unwrap();
        if max == 0 {
            return Err(Error::InvalidInput(
                "all dataset sizes are zero, confidences undefined".into(),
            ));
        }
        let confidences = dataset_sizes
            .iter()
            .map(|&m| (m as f64 / max as f64).max(floor))
            .collect();
        Ok(NetworkGraph {
            confidences,
            ..self.clone()
        })
    }

    /// Replaces the confidence vector; every entry must lie in (0, 1].
    pub fn with_confidences(&self, confidences: Vec<f64>) -> Result<Self> {
        if confidences.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: confidences.len(),
            });
        }
        if let Some(c) = confidences.iter().find(|&&c| !(c > 0.0 && c <= 1.0)) {
            return Err(Error::InvalidInput(format!(
                "confidence {c} outside (0,1]"
            )));
        }
        Ok(NetworkGraph {
            confidences,
            ..self.clone()
        })
    }

    /// Breadth-first reachability from agent 0.
    pub fn is_connected(&self) -> bool {
        if self.n <= 1 {
            return true;
        }
        let mut seen = vec![false; self.n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(i) = queue.pop_front() {
            for &(j, _) in &self.adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    count += 1;
                    queue.push_back(j);
                }
            }
        }
        count == self.n
    }

    fn check_connected(&self) -> Result<()> {
        if self.is_connected() {
            Ok(())
        } else {
            let components = self.component_count();
            Err(Error::Disconnected(format!(
                "{components} components over {} agents",
                self.n
            )))
        }
    }

    fn component_count(&self) -> usize {
        let mut seen = vec![false; self.n];
        let mut components = 0;
        for start in 0..self.n {
            if seen[start] {
                continue;
            }
            components += 1;
            let mut queue = VecDeque::from([start]);
            seen[start] = true;
            while let Some(i) = queue.pop_front() {
                for &(j, _) in &self.adj[i] {
                    if !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        components
    }

    /// Edge-list text format: header line `<n> <edge_count>`, then one line
    /// per edge `i j w` with 0-based indices and i < j.
    pub fn to_edge_list(&self) -> String {
        let mut out = format!("{} {}\n", self.n, self.edge_count());
        for i in 0..self.n {
            for &(j, w) in &self.adj[i] {
                if j > i {
                    out.push_str(&format!("{i} {j} {w}\n"));
                }
            }
        }
        out
    }

    /// Parses the edge-list format written by [`Self::to_edge_list`].
    /// Confidences are not part of the format and default to 1.
    pub fn from_edge_list(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Parse { line: 1, msg: "empty input".into() })?;
        let mut parts = header.split_whitespace();
        let parse_usize = |tok: Option<&str>, line: usize| -> Result<usize> {
            tok.ok_or_else(|| Error::Parse { line, msg: "missing field".into() })?
                .parse()
                .map_err(|e| Error::Parse { line, msg: format!("{e}") })
        };
        let n = parse_usize(parts.next(), 1)?;
        let count = parse_usize(parts.next(), 1)?;
        let mut edges = Vec::with_capacity(count);
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let lineno = idx + 1;
            let mut parts = line.split_whitespace();
            let i = parse_usize(parts.next(), lineno)?;
            let j = parse_usize(parts.next(), lineno)?;
            let w: f64 = parts
                .next()
                .ok_or_else(|| Error::Parse { line: lineno, msg: "missing weight".into() })?
                .parse()
                .map_err(|e| Error::Parse { line: lineno, msg: format!("{e}") })?;
            edges.push((i, j, w));
        }
        if edges.len() != count {
            return Err(Error::Parse {
                line: 1,
                msg: format!("header promised {count} edges, found {}", edges.len()),
            });
        }
        Self::from_edges(n, &edges)
    }

    /// File forms of the edge-list serialization.
    pub fn write_edge_list(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_edge_list())?;
        Ok(())
    }

    pub fn read_edge_list(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_edge_list(&std::fs::read_to_string(path)?)
    }
}

/// W_ij = exp((cos phi_ij - 1) / gamma) from the angles between target
/// models; entries below `threshold` are dropped.
pub fn build_angle_graph(
    target_models: &[Vec<f64>],
    gamma: f64,
    threshold: f64,
) -> Result<NetworkGraph> {
    let n = target_models.len();
    if n == 0 {
        return Err(Error::InvalidInput("no target models".into()));
    }
    if gamma <= 0.0 {
        return Err(Error::InvalidInput(format!("gamma {gamma} must be positive")));
    }
    if threshold < 0.0 {
        return Err(Error::InvalidInput(format!(
            "threshold {threshold} must be nonnegative"
        )));
    }
    let norms: Vec<f64> = target_models.iter().map(|t| vecops::norm2(t)).collect();
    if let Some(i) = norms.iter().position(|&x| x == 0.0) {
        return Err(Error::InvalidInput(format!(
            "target model {i} has zero norm, angle undefined"
        )));
    }
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let cos = (vecops::dot(&target_models[i], &target_models[j])
                / (norms[i] * norms[j]))
                .clamp(-1.0, 1.0);
            let w = ((cos - 1.0) / gamma).exp();
            if w >= threshold {
                edges.push((i, j, w));
            }
        }
    }
    NetworkGraph::from_edges(n, &edges).map_err(|e| match e {
        Error::Disconnected(msg) => Error::Disconnected(format!(
            "{msg} after dropping weights below {threshold}; lower the threshold"
        )),
        other => other,
    })
}

/// Binary mutual-k-NN graph by cosine similarity: W_ij = 1 when i is among
/// the k nearest of j or vice versa. Ties break by ascending index.
pub fn build_knn_cosine_graph(feature_rows: &[Vec<f64>], k: usize) -> Result<NetworkGraph> {
    let n = feature_rows.len();
    if k == 0 || k >= n {
        return Err(Error::InvalidInput(format!(
            "k = {k} must satisfy 1 <= k < n = {n}"
        )));
    }
    let norms: Vec<f64> = feature_rows.iter().map(|r| vecops::norm2(r)).collect();
    if let Some(i) = norms.iter().position(|&x| x == 0.0) {
        return Err(Error::InvalidInput(format!(
            "feature row {i} has zero norm, cosine undefined"
        )));
    }
    let mut edges = Vec::new();
    for i in 0..n {
        let mut sims: Vec<(usize, f64)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                (
                    j,
                    vecops::dot(&feature_rows[i], &feature_rows[j]) / (norms[i] * norms[j]),
                )
            })
            .collect();
        sims.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for &(j, _) in sims.iter().take(k) {
            let (a, b) = (i.min(j), i.max(j));
            if !edges.contains(&(a, b, 1.0)) {
                edges.push((a, b, 1.0));
            }
        }
    }
    NetworkGraph::from_edges(n, &edges)
}
