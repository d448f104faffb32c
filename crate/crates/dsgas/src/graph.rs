//! Sparse attributed graphs, datasets, and block-diagonal batching.

use std::rc::Rc;

use numkernel::{SparseAdj, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    GraphLevel,
    NodeLevel,
}

/// A single undirected attributed graph. Edges are stored in both
/// directions and deduplicated.
#[derive(Debug, Clone)]
pub struct Graph {
    pub node_features: Tensor,
    pub adj: SparseAdj,
    /// Graph-level class, if the dataset provides one. Never consumed by
    /// the search itself.
    pub label: Option<usize>,
    /// Per-node classes for node-level datasets.
    pub node_labels: Option<Vec<usize>>,
}

impl Graph {
    /// Build from undirected edges; both directions are inserted.
    pub fn new(node_features: Tensor, undirected_edges: &[(usize, usize)]) -> Result<Self> {
        let n = node_features.rows();
        if n == 0 {
            return Err(Error::Invalid("graph must have at least one node".into()));
        }
        let mut edges = Vec::with_capacity(undirected_edges.len() * 2);
        for &(a, b) in undirected_edges {
            edges.push((a, b));
            if a != b {
                edges.push((b, a));
            }
        }
        let adj = SparseAdj::new(n, edges)?;
        Ok(Graph {
            node_features,
            adj,
            label: None,
            node_labels: None,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.node_features.rows()
    }

    /// Directed edge count (each undirected edge counts twice).
    pub fn num_directed_edges(&self) -> usize {
        self.adj.num_edges()
    }

    /// Undirected edge count (self-loops count once).
    pub fn num_undirected_edges(&self) -> usize {
        self.adj
            .edges()
            .iter()
            .filter(|(a, b)| a <= b)
            .count()
    }

    /// Canonical `(a, b)` with `a <= b` undirected edge pairs.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        self.adj
            .edges()
            .iter()
            .copied()
            .filter(|(a, b)| a <= b)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct GraphDataset {
    pub graphs: Vec<Graph>,
    pub num_features: usize,
    pub num_classes: usize,
    pub task: Task,
}

impl GraphDataset {
    pub fn new(graphs: Vec<Graph>, num_classes: usize, task: Task) -> Result<Self> {
        if graphs.is_empty() {
            return Err(Error::Invalid("dataset has no graphs".into()));
        }
        if task == Task::NodeLevel && graphs.len() != 1 {
            return Err(Error::Invalid(format!(
                "node-level dataset must contain exactly one graph, got {}",
                graphs.len()
            )));
        }
        let num_features = graphs[0].node_features.cols();
        for g in &graphs {
            if g.node_features.cols() != num_features {
                return Err(Error::FeatureDimMismatch {
                    expected: num_features,
                    got: g.node_features.cols(),
                });
            }
        }
        Ok(GraphDataset {
            graphs,
            num_features,
            num_classes,
            task,
        })
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    /// Graph labels in dataset order (graph-level datasets).
    pub fn labels(&self) -> Option<Vec<usize>> {
        self.graphs.iter().map(|g| g.label).collect()
    }

    /// Fraction of graphs (or nodes, for node-level tasks) carrying a label.
    pub fn label_coverage(&self) -> f64 {
        match self.task {
            Task::GraphLevel => {
                let labeled = self.graphs.iter().filter(|g| g.label.is_some()).count();
                labeled as f64 / self.graphs.len() as f64
            }
            Task::NodeLevel => {
                let g = &self.graphs[0];
                match &g.node_labels {
                    Some(l) => l.len() as f64 / g.num_nodes() as f64,
                    None => 0.0,
                }
            }
        }
    }

    pub fn total_directed_edges(&self) -> usize {
        self.graphs.iter().map(|g| g.num_directed_edges()).sum()
    }

    pub fn total_undirected_edges(&self) -> usize {
        self.graphs.iter().map(|g| g.num_undirected_edges()).sum()
    }
}

/// A block-diagonal batch of graphs: one big disconnected graph plus the
/// node-to-graph segment map.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub features: Tensor,
    pub adj: SparseAdj,
    pub segments: Rc<Vec<usize>>,
    pub size: usize,
}

impl GraphBatch {
    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }
}

/// Assemble graphs into one block-diagonal batch. Node indices are offset
/// cumulatively; no cross-graph edges are introduced.
pub fn batch_graphs(graphs: &[&Graph]) -> Result<GraphBatch> {
    if graphs.is_empty() {
        return Err(Error::Invalid("cannot batch zero graphs".into()));
    }
    let num_features = graphs[0].node_features.cols();
    let mut total_nodes = 0usize;
    let mut total_edges = 0usize;
    for g in graphs {
        if g.node_features.cols() != num_features {
            return Err(Error::FeatureDimMismatch {
                expected: num_features,
                got: g.node_features.cols(),
            });
        }
        total_nodes += g.num_nodes();
        total_edges += g.adj.num_edges();
    }

    let mut features = Vec::with_capacity(total_nodes * num_features);
    let mut edges = Vec::with_capacity(total_edges);
    let mut segments = Vec::with_capacity(total_nodes);
    let mut offset = 0usize;
    for (gi, g) in graphs.iter().enumerate() {
        features.extend_from_slice(g.node_features.data());
        for &(src, dst) in g.adj.edges() {
            edges.push((src + offset, dst + offset));
        }
        segments.extend(std::iter::repeat_n(gi, g.num_nodes()));
        offset += g.num_nodes();
    }

    Ok(GraphBatch {
        features: Tensor::matrix(total_nodes, num_features, features)
            .map_err(numkernel::KernelError::from)?,
        adj: SparseAdj::new(total_nodes, edges)?,
        segments: Rc::new(segments),
        size: graphs.len(),
    })
}
