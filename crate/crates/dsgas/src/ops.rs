//! The searchable operation pool: node aggregation, graph pooling, and
//! layer merging candidates, each differentiable and usable inside a mixed
//! operation.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use numkernel::{EdgeEndpoints, Param, ReduceMode, SparseAdj, Tape, Tensor, Val};

use crate::error::Result;
use crate::graph::GraphBatch;

pub const GAT_LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggKind {
    Gcn,
    Gat,
    Gin,
    GraphSage,
    GraphConv,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    MeanPool,
    MaxPool,
    SumPool,
    AttentionPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeKind {
    MaxMerge,
    ConcatMerge,
    SumMerge,
    MeanMerge,
}

pub const AGG_KINDS: [AggKind; 6] = [
    AggKind::Gcn,
    AggKind::Gat,
    AggKind::Gin,
    AggKind::GraphSage,
    AggKind::GraphConv,
    AggKind::Mlp,
];
pub const POOL_KINDS: [PoolKind; 4] = [
    PoolKind::MeanPool,
    PoolKind::MaxPool,
    PoolKind::SumPool,
    PoolKind::AttentionPool,
];
pub const MERGE_KINDS: [MergeKind; 4] = [
    MergeKind::MaxMerge,
    MergeKind::ConcatMerge,
    MergeKind::SumMerge,
    MergeKind::MeanMerge,
];

impl AggKind {
    /// Stable identifier used in config files and DOT exports.
    pub fn name(self) -> &'static str {
        match self {
            AggKind::Gcn => "GCN",
            AggKind::Gat => "GAT",
            AggKind::Gin => "GIN",
            AggKind::GraphSage => "GraphSage",
            AggKind::GraphConv => "GraphConv",
            AggKind::Mlp => "MLP",
        }
    }
}

impl PoolKind {
    pub fn name(self) -> &'static str {
        match self {
            PoolKind::MeanPool => "MeanPool",
            PoolKind::MaxPool => "MaxPool",
            PoolKind::SumPool => "SumPool",
            PoolKind::AttentionPool => "AttentionPool",
        }
    }
}

impl MergeKind {
    pub fn name(self) -> &'static str {
        match self {
            MergeKind::MaxMerge => "MaxMerge",
            MergeKind::ConcatMerge => "ConcatMerge",
            MergeKind::SumMerge => "SumMerge",
            MergeKind::MeanMerge => "MeanMerge",
        }
    }
}

/// Glorot-uniform initialized matrix parameter.
pub fn glorot(name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Param {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Param::new(name, Tensor::matrix(rows, cols, data).expect("shape"))
}

pub fn zeros_param(name: &str, rows: usize, cols: usize) -> Param {
    Param::new(name, Tensor::zeros(vec![rows, cols]))
}

/// Learnable tensors for one aggregation candidate at one DAG slot. Shapes
/// are fixed by the slot's input/output widths; the same weights serve all
/// K factor paths.
#[derive(Debug, Clone)]
pub enum AggWeights {
    Gcn {
        w: Param,
        b: Param,
    },
    Gat {
        w: Param,
        a_src: Param,
        a_dst: Param,
        b: Param,
    },
    Gin {
        eps: Param,
        w1: Param,
        b1: Param,
        w2: Param,
        b2: Param,
    },
    GraphSage {
        w_self: Param,
        w_neigh: Param,
        b: Param,
    },
    GraphConv {
        w_self: Param,
        w_neigh: Param,
        b: Param,
    },
    Mlp {
        w: Param,
        b: Param,
    },
}

impl AggWeights {
    pub fn new(
        kind: AggKind,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let name = |field: &str| format!("{prefix}.{}.{field}", kind.name());
        match kind {
            AggKind::Gcn => AggWeights::Gcn {
                w: glorot(&name("w"), d_in, d_out, rng),
                b: zeros_param(&name("b"), 1, d_out),
            },
            AggKind::Gat => AggWeights::Gat {
                w: glorot(&name("w"), d_in, d_out, rng),
                a_src: glorot(&name("a_src"), d_out, 1, rng),
                a_dst: glorot(&name("a_dst"), d_out, 1, rng),
                b: zeros_param(&name("b"), 1, d_out),
            },
            AggKind::Gin => AggWeights::Gin {
                eps: zeros_param(&name("eps"), 1, 1),
                w1: glorot(&name("w1"), d_in, d_out, rng),
                b1: zeros_param(&name("b1"), 1, d_out),
                w2: glorot(&name("w2"), d_out, d_out, rng),
                b2: zeros_param(&name("b2"), 1, d_out),
            },
            AggKind::GraphSage => AggWeights::GraphSage {
                w_self: glorot(&name("w_self"), d_in, d_out, rng),
                w_neigh: glorot(&name("w_neigh"), d_in, d_out, rng),
                b: zeros_param(&name("b"), 1, d_out),
            },
            AggKind::GraphConv => AggWeights::GraphConv {
                w_self: glorot(&name("w_self"), d_in, d_out, rng),
                w_neigh: glorot(&name("w_neigh"), d_in, d_out, rng),
                b: zeros_param(&name("b"), 1, d_out),
            },
            AggKind::Mlp => AggWeights::Mlp {
                w: glorot(&name("w"), d_in, d_out, rng),
                b: zeros_param(&name("b"), 1, d_out),
            },
        }
    }

    pub fn kind(&self) -> AggKind {
        match self {
            AggWeights::Gcn { .. } => AggKind::Gcn,
            AggWeights::Gat { .. } => AggKind::Gat,
            AggWeights::Gin { .. } => AggKind::Gin,
            AggWeights::GraphSage { .. } => AggKind::GraphSage,
            AggWeights::GraphConv { .. } => AggKind::GraphConv,
            AggWeights::Mlp { .. } => AggKind::Mlp,
        }
    }

    pub fn params(&self) -> Vec<Param> {
        match self {
            AggWeights::Gcn { w, b } | AggWeights::Mlp { w, b } => vec![w.clone(), b.clone()],
            AggWeights::Gat { w, a_src, a_dst, b } => {
                vec![w.clone(), a_src.clone(), a_dst.clone(), b.clone()]
            }
            AggWeights::Gin { eps, w1, b1, w2, b2 } => vec![
                eps.clone(),
                w1.clone(),
                b1.clone(),
                w2.clone(),
                b2.clone(),
            ],
            AggWeights::GraphSage { w_self, w_neigh, b }
            | AggWeights::GraphConv { w_self, w_neigh, b } => {
                vec![w_self.clone(), w_neigh.clone(), b.clone()]
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum PoolWeights {
    Plain(PoolKind),
    Attention { a: Param },
}

impl PoolWeights {
    pub fn new(kind: PoolKind, prefix: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        match kind {
            PoolKind::AttentionPool => PoolWeights::Attention {
                a: glorot(&format!("{prefix}.AttentionPool.a"), d, 1, rng),
            },
            other => PoolWeights::Plain(other),
        }
    }

    pub fn kind(&self) -> PoolKind {
        match self {
            PoolWeights::Plain(k) => *k,
            PoolWeights::Attention { .. } => PoolKind::AttentionPool,
        }
    }

    pub fn params(&self) -> Vec<Param> {
        match self {
            PoolWeights::Plain(_) => vec![],
            PoolWeights::Attention { a } => vec![a.clone()],
        }
    }
}

#[derive(Debug, Clone)]
pub enum MergeWeights {
    Plain(MergeKind),
    /// Concatenation followed by a learnable projection back to width `d`,
    /// so every merge candidate emits `N x d` and they can be mixed.
    Concat {
        proj: Param,
    },
}

impl MergeWeights {
    pub fn new(kind: MergeKind, prefix: &str, layers: usize, d: usize, rng: &mut ChaCha8Rng) -> Self {
        match kind {
            MergeKind::ConcatMerge => MergeWeights::Concat {
                proj: glorot(&format!("{prefix}.ConcatMerge.proj"), layers * d, d, rng),
            },
            other => MergeWeights::Plain(other),
        }
    }

    pub fn kind(&self) -> MergeKind {
        match self {
            MergeWeights::Plain(k) => *k,
            MergeWeights::Concat { .. } => MergeKind::ConcatMerge,
        }
    }

    pub fn params(&self) -> Vec<Param> {
        match self {
            MergeWeights::Plain(_) => vec![],
            MergeWeights::Concat { proj } => vec![proj.clone()],
        }
    }
}

/// Precomputed adjacency variants for one batch: the raw block-diagonal
/// adjacency, the symmetric-normalized form with self-loops (GCN), the
/// row-normalized neighbor mean (isolated nodes fall back to a self-loop),
/// and the attention edge list (self-loops added for isolated nodes only).
pub struct BatchCtx {
    pub features: Tensor,
    pub adj: Rc<SparseAdj>,
    pub gcn_adj: Rc<SparseAdj>,
    pub mean_adj: Rc<SparseAdj>,
    pub gat_edges: Rc<EdgeEndpoints>,
    pub gat_src_idx: Rc<Vec<usize>>,
    pub gat_dst_groups: Rc<Vec<usize>>,
    pub segments: Rc<Vec<usize>>,
    pub num_graphs: usize,
    pub num_nodes: usize,
}

impl BatchCtx {
    pub fn new(batch: &GraphBatch) -> Result<Self> {
        let n = batch.num_nodes();
        let adj = Rc::new(batch.adj.clone());
        let degrees = adj.in_degrees();

        // GCN: D~^-1/2 (A + I) D~^-1/2 over the self-looped graph
        let mut has_self_loop = vec![false; n];
        for &(s, t) in adj.edges() {
            if s == t {
                has_self_loop[s] = true;
            }
        }
        let mut gcn_edges: Vec<(usize, usize)> = adj.edges().to_vec();
        for (i, &looped) in has_self_loop.iter().enumerate() {
            if !looped {
                gcn_edges.push((i, i));
            }
        }
        let tilde_deg: Vec<f64> = {
            let mut deg = vec![0usize; n];
            for &(_, dst) in &gcn_edges {
                deg[dst] += 1;
            }
            deg.iter().map(|&d| d as f64).collect()
        };
        let gcn_weights: Vec<f64> = gcn_edges
            .iter()
            .map(|&(s, t)| 1.0 / (tilde_deg[s] * tilde_deg[t]).sqrt())
            .collect();
        let gcn_adj = Rc::new(SparseAdj::new_weighted(n, gcn_edges, gcn_weights)?);

        // neighbor mean: 1/deg per incoming edge, self-loop for isolated nodes
        let mut mean_edges: Vec<(usize, usize)> = Vec::with_capacity(adj.num_edges() + 4);
        let mut mean_weights: Vec<f64> = Vec::with_capacity(adj.num_edges() + 4);
        for &(s, t) in adj.edges() {
            mean_edges.push((s, t));
            mean_weights.push(1.0 / degrees[t] as f64);
        }
        for (i, &d) in degrees.iter().enumerate() {
            if d == 0 {
                mean_edges.push((i, i));
                mean_weights.push(1.0);
            }
        }
        let mean_adj = Rc::new(SparseAdj::new_weighted(n, mean_edges, mean_weights)?);

        // attention edges: raw edges plus self-loops on isolated nodes
        let mut src: Vec<usize> = Vec::with_capacity(adj.num_edges() + 4);
        let mut dst: Vec<usize> = Vec::with_capacity(adj.num_edges() + 4);
        for &(s, t) in adj.edges() {
            src.push(s);
            dst.push(t);
        }
        for (i, &d) in degrees.iter().enumerate() {
            if d == 0 {
                src.push(i);
                dst.push(i);
            }
        }
        let gat_src_idx = Rc::new(src.clone());
        let gat_dst_groups = Rc::new(dst.clone());
        let gat_edges = Rc::new(EdgeEndpoints::new(n, src, dst)?);

        Ok(BatchCtx {
            features: batch.features.clone(),
            adj,
            gcn_adj,
            mean_adj,
            gat_edges,
            gat_src_idx,
            gat_dst_groups,
            segments: Rc::clone(&batch.segments),
            num_graphs: batch.size,
            num_nodes: n,
        })
    }
}

/// Leafs each parameter at most once per tape, honoring transient value
/// overrides (weight perturbation) when present.
pub struct LeafCache<'t> {
    tape: &'t Tape,
    cache: HashMap<String, Val<'t>>,
    overrides: Rc<HashMap<String, Tensor>>,
}

impl<'t> LeafCache<'t> {
    pub fn new(tape: &'t Tape, overrides: Rc<HashMap<String, Tensor>>) -> Self {
        LeafCache {
            tape,
            cache: HashMap::new(),
            overrides,
        }
    }

    pub fn leaf(&mut self, p: &Param) -> Result<Val<'t>> {
        if let Some(v) = self.cache.get(p.name()) {
            return Ok(*v);
        }
        let v = match self.overrides.get(p.name()) {
            Some(t) => self.tape.leaf_with_value(p, t.clone())?,
            None => self.tape.leaf(p)?,
        };
        self.cache.insert(p.name().to_string(), v);
        Ok(v)
    }
}

/// One aggregation candidate's forward pass (no activation or norm; those
/// are applied at the mixed-operation level).
pub fn apply_agg<'t>(
    weights: &AggWeights,
    tape: &'t Tape,
    leafs: &mut LeafCache<'t>,
    h: Val<'t>,
    ctx: &BatchCtx,
) -> Result<Val<'t>> {
    match weights {
        AggWeights::Gcn { w, b } => {
            let agg = tape.spmm(&ctx.gcn_adj, h)?;
            Ok(agg
                .matmul(leafs.leaf(w)?)?
                .add_rowvec(leafs.leaf(b)?.row_slice(0)?)?)
        }
        AggWeights::Mlp { w, b } => Ok(h
            .matmul(leafs.leaf(w)?)?
            .add_rowvec(leafs.leaf(b)?.row_slice(0)?)?),
        AggWeights::GraphSage { w_self, w_neigh, b } => {
            let own = h.matmul(leafs.leaf(w_self)?)?;
            let neigh = tape.spmm(&ctx.mean_adj, h)?.matmul(leafs.leaf(w_neigh)?)?;
            Ok(own
                .add(neigh)?
                .add_rowvec(leafs.leaf(b)?.row_slice(0)?)?)
        }
        AggWeights::GraphConv { w_self, w_neigh, b } => {
            let own = h.matmul(leafs.leaf(w_self)?)?;
            let neigh = tape.spmm(&ctx.adj, h)?.matmul(leafs.leaf(w_neigh)?)?;
            Ok(own
                .add(neigh)?
                .add_rowvec(leafs.leaf(b)?.row_slice(0)?)?)
        }
        AggWeights::Gin { eps, w1, b1, w2, b2 } => {
            let one_plus_eps = leafs.leaf(eps)?.add_const(1.0)?;
            let own = h.scale_by_scalar(one_plus_eps)?;
            let agg = tape.spmm(&ctx.adj, h)?;
            let pre = own.add(agg)?;
            let hidden = pre
                .matmul(leafs.leaf(w1)?)?
                .add_rowvec(leafs.leaf(b1)?.row_slice(0)?)?
                .relu()?;
            Ok(hidden
                .matmul(leafs.leaf(w2)?)?
                .add_rowvec(leafs.leaf(b2)?.row_slice(0)?)?)
        }
        AggWeights::Gat { w, a_src, a_dst, b } => {
            let hw = h.matmul(leafs.leaf(w)?)?;
            let s_src = hw.matmul(leafs.leaf(a_src)?)?;
            let s_dst = hw.matmul(leafs.leaf(a_dst)?)?;
            let e_src = s_src.gather_rows(&ctx.gat_src_idx)?;
            let e_dst = s_dst.gather_rows(&ctx.gat_dst_groups)?;
            let scores = e_src.add(e_dst)?.leaky_relu(GAT_LEAKY_SLOPE)?;
            let att = tape.segment_softmax(scores, &ctx.gat_dst_groups, ctx.num_nodes)?;
            let out = tape.spmm_weighted(&ctx.gat_edges, att, hw)?;
            Ok(out.add_rowvec(leafs.leaf(b)?.row_slice(0)?)?)
        }
    }
}

/// One pooling candidate: nodes to per-graph rows.
pub fn apply_pool<'t>(
    weights: &PoolWeights,
    tape: &'t Tape,
    leafs: &mut LeafCache<'t>,
    h: Val<'t>,
    ctx: &BatchCtx,
) -> Result<Val<'t>> {
    match weights {
        PoolWeights::Plain(kind) => {
            let mode = match kind {
                PoolKind::MeanPool => ReduceMode::Mean,
                PoolKind::MaxPool => ReduceMode::Max,
                PoolKind::SumPool => ReduceMode::Sum,
                PoolKind::AttentionPool => unreachable!("attention pool carries weights"),
            };
            Ok(tape.segment_reduce(h, &ctx.segments, ctx.num_graphs, mode)?)
        }
        PoolWeights::Attention { a } => {
            let scores = h.matmul(leafs.leaf(a)?)?;
            let att = tape.segment_softmax(scores, &ctx.segments, ctx.num_graphs)?;
            let weighted = h.scale_rows(att)?;
            Ok(tape.segment_reduce(weighted, &ctx.segments, ctx.num_graphs, ReduceMode::Sum)?)
        }
    }
}

/// One merge candidate over the per-layer pooled representations.
pub fn apply_merge<'t>(
    weights: &MergeWeights,
    tape: &'t Tape,
    leafs: &mut LeafCache<'t>,
    zs: &[Val<'t>],
) -> Result<Val<'t>> {
    assert!(!zs.is_empty(), "merge needs at least one layer output");
    match weights {
        MergeWeights::Plain(MergeKind::MaxMerge) => {
            let mut acc = zs[0];
            for z in &zs[1..] {
                acc = acc.maximum(*z)?;
            }
            Ok(acc)
        }
        MergeWeights::Plain(MergeKind::SumMerge) => {
            let mut acc = zs[0];
            for z in &zs[1..] {
                acc = acc.add(*z)?;
            }
            Ok(acc)
        }
        MergeWeights::Plain(MergeKind::MeanMerge) => {
            let mut acc = zs[0];
            for z in &zs[1..] {
                acc = acc.add(*z)?;
            }
            Ok(acc.scale(1.0 / zs.len() as f64)?)
        }
        MergeWeights::Plain(_) => unreachable!("concat merge carries weights"),
        MergeWeights::Concat { proj } => {
            if zs.len() == 1 {
                return Ok(zs[0]);
            }
            let cat = tape.concat_cols(zs)?;
            Ok(cat.matmul(leafs.leaf(proj)?)?)
        }
    }
}
