use crate::{KernelError, Result};

/// Sparse adjacency over `num_nodes` nodes, stored as a deduplicated edge
/// list plus a CSR-style index grouped by destination.
///
/// An edge `(src, dst)` contributes `weight * x[src]` to output row `dst`
/// under [`crate::Tape::spmm`]. Weights default to 1 when absent. Edges are
/// directed at this level; undirected graphs store both directions.
#[derive(Debug, Clone)]
pub struct SparseAdj {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    edge_weight: Option<Vec<f64>>,
    // CSR by destination: for node i, incoming edge slots
    // csr_offsets[i]..csr_offsets[i+1] index into csr_src / csr_weight.
    csr_offsets: Vec<usize>,
    csr_src: Vec<usize>,
    csr_weight: Vec<f64>,
}

impl SparseAdj {
    /// Unweighted adjacency. Duplicate `(src, dst)` pairs are dropped.
    pub fn new(num_nodes: usize, mut edges: Vec<(usize, usize)>) -> Result<Self> {
        validate_edges(num_nodes, &edges)?;
        edges.sort_unstable();
        edges.dedup();
        Ok(Self::build(num_nodes, edges, None))
    }

    /// Weighted adjacency. Duplicate pairs are rejected because the merged
    /// weight would be ambiguous.
    pub fn new_weighted(
        num_nodes: usize,
        edges: Vec<(usize, usize)>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        validate_edges(num_nodes, &edges)?;
        if weights.len() != edges.len() {
            return Err(KernelError::EdgeWeightCount {
                weights: weights.len(),
                edges: edges.len(),
            });
        }
        let mut order: Vec<usize> = (0..edges.len()).collect();
        order.sort_unstable_by_key(|&i| edges[i]);
        for w in order.windows(2) {
            if edges[w[0]] == edges[w[1]] {
                return Err(KernelError::DuplicateEdge(edges[w[0]].0, edges[w[0]].1));
            }
        }
        let sorted_edges: Vec<_> = order.iter().map(|&i| edges[i]).collect();
        let sorted_weights: Vec<_> = order.iter().map(|&i| weights[i]).collect();
        Ok(Self::build(num_nodes, sorted_edges, Some(sorted_weights)))
    }

    fn build(num_nodes: usize, edges: Vec<(usize, usize)>, weights: Option<Vec<f64>>) -> Self {
        let mut counts = vec![0usize; num_nodes + 1];
        for &(_, dst) in &edges {
            counts[dst + 1] += 1;
        }
        for i in 0..num_nodes {
            counts[i + 1] += counts[i];
        }
        let mut cursor = counts.clone();
        let mut csr_src = vec![0usize; edges.len()];
        let mut csr_weight = vec![0.0f64; edges.len()];
        for (e, &(src, dst)) in edges.iter().enumerate() {
            let slot = cursor[dst];
            cursor[dst] += 1;
            csr_src[slot] = src;
            csr_weight[slot] = weights.as_ref().map_or(1.0, |w| w[e]);
        }
        SparseAdj {
            num_nodes,
            edges,
            edge_weight: weights,
            csr_offsets: counts,
            csr_src,
            csr_weight,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Deduplicated `(src, dst)` pairs in sorted order.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_weight(&self) -> Option<&[f64]> {
        self.edge_weight.as_deref()
    }

    /// In-degree (number of incoming edges) per node.
    pub fn in_degrees(&self) -> Vec<usize> {
        self.csr_offsets
            .windows(2)
            .map(|w| w[1] - w[0])
            .collect()
    }

    /// `out[dst] += weight * x[src]` for every edge, one row at a time.
    pub(crate) fn apply(&self, x: &[f64], cols: usize, out: &mut [f64]) {
        for dst in 0..self.num_nodes {
            let lo = self.csr_offsets[dst];
            let hi = self.csr_offsets[dst + 1];
            let out_row = &mut out[dst * cols..(dst + 1) * cols];
            for slot in lo..hi {
                let src = self.csr_src[slot];
                let w = self.csr_weight[slot];
                let x_row = &x[src * cols..(src + 1) * cols];
                for (o, v) in out_row.iter_mut().zip(x_row) {
                    *o += w * v;
                }
            }
        }
    }

    /// Transposed application: `out[src] += weight * g[dst]` for every edge.
    pub(crate) fn apply_transpose(&self, g: &[f64], cols: usize, out: &mut [f64]) {
        for dst in 0..self.num_nodes {
            let lo = self.csr_offsets[dst];
            let hi = self.csr_offsets[dst + 1];
            let g_row = &g[dst * cols..(dst + 1) * cols];
            for slot in lo..hi {
                let src = self.csr_src[slot];
                let w = self.csr_weight[slot];
                let out_row = &mut out[src * cols..(src + 1) * cols];
                for (o, v) in out_row.iter_mut().zip(g_row) {
                    *o += w * v;
                }
            }
        }
    }

    /// Dense `num_nodes x num_nodes` matrix `D` with `D[dst][src] = weight`,
    /// so that `spmm(adj, x) == D . x`. Intended for small test oracles.
    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.num_nodes;
        let mut dense = vec![0.0; n * n];
        for (e, &(src, dst)) in self.edges.iter().enumerate() {
            dense[dst * n + src] = self.edge_weight.as_ref().map_or(1.0, |w| w[e]);
        }
        dense
    }
}

/// Edge endpoints for weighted message passing where the per-edge weights
/// come from a differentiable tensor rather than from the adjacency itself.
/// Edge order is preserved: weight `i` belongs to `(src[i], dst[i])`.
#[derive(Debug, Clone)]
pub struct EdgeEndpoints {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub num_nodes: usize,
}

impl EdgeEndpoints {
    pub fn new(num_nodes: usize, src: Vec<usize>, dst: Vec<usize>) -> Result<Self> {
        if src.len() != dst.len() {
            return Err(KernelError::EdgeWeightCount {
                weights: src.len(),
                edges: dst.len(),
            });
        }
        for (&s, &d) in src.iter().zip(&dst) {
            if s >= num_nodes || d >= num_nodes {
                return Err(KernelError::EdgeOutOfRange {
                    src: s,
                    dst: d,
                    num_nodes,
                });
            }
        }
        Ok(EdgeEndpoints {
            src,
            dst,
            num_nodes,
        })
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }
}

fn validate_edges(num_nodes: usize, edges: &[(usize, usize)]) -> Result<()> {
    for &(src, dst) in edges {
        if src >= num_nodes || dst >= num_nodes {
            return Err(KernelError::EdgeOutOfRange {
                src,
                dst,
                num_nodes,
            });
        }
    }
    Ok(())
}
