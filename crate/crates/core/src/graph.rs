//! Labeled undirected graphs, node featurization, normalized adjacency and
//! mini-batch assembly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub order: BondOrder,
}

impl Edge {
    pub fn new(a: usize, b: usize, order: BondOrder) -> Self {
        Edge { a, b, order }
    }

    pub fn single(a: usize, b: usize) -> Self {
        Self::new(a, b, BondOrder::Single)
    }

    /// Endpoints with the smaller index first.
    pub fn key(&self) -> (usize, usize) {
        (self.a.min(self.b), self.a.max(self.b))
    }
}

/// A labeled undirected graph with optional supervision.
///
/// `targets` has one entry per task; `None` marks an unobserved label, so
/// the observation mask is `targets[i].is_some()`.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    labels: Vec<usize>,
    edges: Vec<Edge>,
    pub ground_truth: Option<Vec<f64>>,
    pub targets: Vec<Option<f64>>,
    pub smiles: Option<String>,
}

impl Graph {
    /// Validates endpoints, self-loops and duplicate undirected edges.
    pub fn new(labels: Vec<usize>, edges: Vec<Edge>) -> Result<Self> {
        let n = labels.len();
        let mut seen = std::collections::HashSet::with_capacity(edges.len());
        for e in &edges {
            if e.a >= n || e.b >= n {
                return Err(Error::Data {
                    node: e.a.max(e.b),
                    message: format!("edge endpoint out of range for {n} nodes"),
                });
            }
            if e.a == e.b {
                return Err(Error::Data {
                    node: e.a,
                    message: "self-loop".into(),
                });
            }
            if !seen.insert(e.key()) {
                return Err(Error::Data {
                    node: e.key().0,
                    message: format!("duplicate edge {:?}", e.key()),
                });
            }
        }
        Ok(Graph {
            labels,
            edges,
            ground_truth: None,
            targets: Vec::new(),
            smiles: None,
        })
    }

    pub fn with_ground_truth(mut self, gt: Vec<f64>) -> Result<Self> {
        if gt.len() != self.num_nodes() {
            return Err(Error::Data {
                node: gt.len().min(self.num_nodes()),
                message: format!(
                    "ground truth has {} entries for {} nodes",
                    gt.len(),
                    self.num_nodes()
                ),
            });
        }
        self.ground_truth = Some(gt);
        Ok(self)
    }

    pub fn with_targets(mut self, targets: Vec<Option<f64>>) -> Self {
        self.targets = targets;
        self
    }

    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn target_mask(&self) -> Vec<bool> {
        self.targets.iter().map(Option::is_some).collect()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes()];
        for e in &self.edges {
            deg[e.a] += 1;
            deg[e.b] += 1;
        }
        deg
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes()];
        for e in &self.edges {
            adj[e.a].push(e.b);
            adj[e.b].push(e.a);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    /// Relabels nodes so that old node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Graph> {
        let n = self.num_nodes();
        if perm.len() != n {
            return Err(Error::contract("permutation length differs from node count"));
        }
        let mut labels = vec![0; n];
        let mut gt = self.ground_truth.as_ref().map(|_| vec![0.0; n]);
        for (old, &new) in perm.iter().enumerate() {
            labels[new] = self.labels[old];
            if let (Some(dst), Some(src)) = (gt.as_mut(), self.ground_truth.as_ref()) {
                dst[new] = src[old];
            }
        }
        let edges = self
            .edges
            .iter()
            .map(|e| Edge::new(perm[e.a], perm[e.b], e.order))
            .collect();
        let mut g = Graph::new(labels, edges)?;
        g.ground_truth = gt;
        g.targets = self.targets.clone();
        g.smiles = self.smiles.clone();
        Ok(g)
    }
}

/// `D^{-1/2} (A + I) D^{-1/2}` over the binary adjacency; bond orders are
/// ignored.
pub fn normalize_adjacency(graph: &Graph) -> Matrix {
    let n = graph.num_nodes();
    let mut a = Matrix::identity(n);
    for e in graph.edges() {
        a.set(e.a, e.b, 1.0);
        a.set(e.b, e.a, 1.0);
    }
    let inv_sqrt: Vec<f64> = graph
        .degrees()
        .iter()
        .map(|&d| 1.0 / ((d + 1) as f64).sqrt())
        .collect();
    for i in 0..n {
        for j in 0..n {
            let v = a.get(i, j);
            if v != 0.0 {
                a.set(i, j, v * inv_sqrt[i] * inv_sqrt[j]);
            }
        }
    }
    a
}

/// One-hot feature layout: label slots followed by clamped-degree slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub alphabet_size: usize,
    pub max_degree: usize,
}

impl FeatureSpec {
    pub fn dim(&self) -> usize {
        self.alphabet_size + self.max_degree + 1
    }
}

/// Row `i` is `onehot(label_i) ⊕ onehot(min(degree_i, max_degree))`.
pub fn featurize(graph: &Graph, spec: FeatureSpec) -> Result<Matrix> {
    let mut x = Matrix::zeros(graph.num_nodes(), spec.dim());
    for (i, (&label, &deg)) in graph.labels().iter().zip(&graph.degrees()).enumerate() {
        if label >= spec.alphabet_size {
            return Err(Error::Data {
                node: i,
                message: format!(
                    "label {label} outside alphabet of size {}",
                    spec.alphabet_size
                ),
            });
        }
        x.set(i, label, 1.0);
        x.set(i, spec.alphabet_size + deg.min(spec.max_degree), 1.0);
    }
    Ok(x)
}

/// Several graphs stacked into one block-diagonal problem.
#[derive(Clone, Debug)]
pub struct Batch {
    /// Graph index of every stacked node; non-decreasing.
    pub membership: Vec<usize>,
    /// First stacked row of each graph.
    pub node_offsets: Vec<usize>,
    pub adjacency: Matrix,
    pub features: Matrix,
    /// `graphs × tasks` targets, 0 where unobserved.
    pub targets: Matrix,
    /// 1 where a target is observed.
    pub target_mask: Matrix,
}

impl Batch {
    pub fn num_graphs(&self) -> usize {
        self.node_offsets.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.membership.len()
    }

    /// Stacked row range of graph `g`.
    pub fn node_range(&self, g: usize) -> std::ops::Range<usize> {
        let end = self
            .node_offsets
            .get(g + 1)
            .copied()
            .unwrap_or(self.num_nodes());
        self.node_offsets[g]..end
    }
}

pub fn make_batch(graphs: &[&Graph], spec: FeatureSpec) -> Result<Batch> {
    if graphs.is_empty() {
        return Err(Error::contract("cannot batch an empty list of graphs"));
    }
    let total: usize = graphs.iter().map(|g| g.num_nodes()).sum();
    let tasks = graphs[0].targets.len();
    let mut membership = Vec::with_capacity(total);
    let mut node_offsets = Vec::with_capacity(graphs.len());
    let mut adjacency = Matrix::zeros(total, total);
    let mut features = Matrix::zeros(total, spec.dim());
    let mut targets = Matrix::zeros(graphs.len(), tasks);
    let mut target_mask = Matrix::zeros(graphs.len(), tasks);

    let mut offset = 0;
    for (gi, graph) in graphs.iter().enumerate() {
        let n = graph.num_nodes();
        if n == 0 {
            return Err(Error::contract(format!("graph {gi} in batch has no nodes")));
        }
        if graph.targets.len() != tasks {
            return Err(Error::contract(format!(
                "graph {gi} has {} targets, expected {tasks}",
                graph.targets.len()
            )));
        }
        node_offsets.push(offset);
        membership.extend(std::iter::repeat_n(gi, n));
        let a = normalize_adjacency(graph);
        let x = featurize(graph, spec)?;
        for i in 0..n {
            adjacency.row_mut(offset + i)[offset..offset + n].copy_from_slice(a.row(i));
            features.row_mut(offset + i).copy_from_slice(x.row(i));
        }
        for (t, y) in graph.targets.iter().enumerate() {
            if let Some(y) = y {
                targets.set(gi, t, *y);
                target_mask.set(gi, t, 1.0);
            }
        }
        offset += n;
    }
    Ok(Batch {
        membership,
        node_offsets,
        adjacency,
        features,
        targets,
        target_mask,
    })
}
