//! Self-supervised pretext tasks: label-free view augmentations plus a
//! graph-level and a node-level contrastive loss behind one interface.

use std::collections::HashSet;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use numkernel::{Param, Tape, Tensor, Val};

use crate::error::{Error, Result};
use crate::graph::{batch_graphs, Graph, Task};
use crate::ops::{glorot, zeros_param, BatchCtx, LeafCache};
use crate::supernet::{ForwardCtx, SuperNet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretextKind {
    GraphContrastive,
    NodeContrastive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewKind {
    NodeDrop,
    EdgePerturb,
    FeatureMask,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ViewAugSpec {
    pub kind: ViewKind,
    pub ratio: f64,
}

impl ViewAugSpec {
    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ratio) {
            return Err(Error::Invalid(format!(
                "view augmentation ratio must be in [0, 1), got {}",
                self.ratio
            )));
        }
        Ok(())
    }
}

/// Two-layer projection head applied to embeddings before the contrastive
/// loss; excluded from probe-time representations.
pub struct ProjectionHead {
    w1: Param,
    b1: Param,
    w2: Param,
    b2: Param,
}

impl ProjectionHead {
    pub fn new(d: usize, rng: &mut ChaCha8Rng) -> Self {
        ProjectionHead {
            w1: glorot("head.w1", d, d, rng),
            b1: zeros_param("head.b1", 1, d),
            w2: glorot("head.w2", d, d, rng),
            b2: zeros_param("head.b2", 1, d),
        }
    }

    pub fn apply<'t>(&self, leafs: &mut LeafCache<'t>, z: Val<'t>) -> Result<Val<'t>> {
        let h = z
            .matmul(leafs.leaf(&self.w1)?)?
            .add_rowvec(leafs.leaf(&self.b1)?.row_slice(0)?)?
            .relu()?;
        Ok(h
            .matmul(leafs.leaf(&self.w2)?)?
            .add_rowvec(leafs.leaf(&self.b2)?.row_slice(0)?)?)
    }

    pub fn params(&self) -> Vec<Param> {
        vec![
            self.w1.clone(),
            self.b1.clone(),
            self.w2.clone(),
            self.b2.clone(),
        ]
    }
}

/// A pluggable pretext task: two view-augmentation specs, an NT-Xent
/// temperature, and the projection head.
pub struct PretextTask {
    pub kind: PretextKind,
    pub view1: ViewAugSpec,
    pub view2: ViewAugSpec,
    pub t_nce: f64,
    pub head: ProjectionHead,
    /// Anchor subsample cap for the node-level task.
    pub node_sample: usize,
}

impl PretextTask {
    pub fn new(
        kind: PretextKind,
        view1: ViewAugSpec,
        view2: ViewAugSpec,
        t_nce: f64,
        node_sample: usize,
        d: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        view1.validate()?;
        view2.validate()?;
        if t_nce <= 0.0 {
            return Err(Error::Invalid(format!(
                "NT-Xent temperature must be > 0, got {t_nce}"
            )));
        }
        if kind == PretextKind::NodeContrastive
            && (view1.kind == ViewKind::NodeDrop || view2.kind == ViewKind::NodeDrop)
        {
            return Err(Error::Invalid(
                "node_contrastive views must preserve the node set; use edge_perturb or feature_mask".into(),
            ));
        }
        Ok(PretextTask {
            kind,
            view1,
            view2,
            t_nce,
            head: ProjectionHead::new(d, rng),
            node_sample,
        })
    }
}

/// Apply one view augmentation to a graph, deterministically in the RNG
/// state.
pub fn augment_view(graph: &Graph, spec: &ViewAugSpec, rng: &mut ChaCha8Rng) -> Result<Graph> {
    spec.validate()?;
    if graph.num_nodes() == 0 {
        return Err(Error::Invalid("cannot augment an empty graph".into()));
    }
    if spec.ratio == 0.0 {
        return Ok(graph.clone());
    }
    match spec.kind {
        ViewKind::NodeDrop => node_drop(graph, spec.ratio, rng),
        ViewKind::EdgePerturb => edge_perturb(graph, spec.ratio, rng),
        ViewKind::FeatureMask => feature_mask(graph, spec.ratio, rng),
    }
}

/// Two independently augmented views of one graph.
pub fn make_views(
    graph: &Graph,
    spec1: &ViewAugSpec,
    spec2: &ViewAugSpec,
    seed: u64,
) -> Result<(Graph, Graph)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v1 = augment_view(graph, spec1, &mut rng)?;
    let v2 = augment_view(graph, spec2, &mut rng)?;
    Ok((v1, v2))
}

fn node_drop(graph: &Graph, ratio: f64, rng: &mut ChaCha8Rng) -> Result<Graph> {
    let n = graph.num_nodes();
    // keep at least one node
    let drop = ((ratio * n as f64).ceil() as usize).min(n - 1);
    if drop == 0 {
        return Ok(graph.clone());
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let dropped: HashSet<usize> = order[..drop].iter().copied().collect();

    let mut remap = vec![usize::MAX; n];
    let mut kept = Vec::with_capacity(n - drop);
    for i in 0..n {
        if !dropped.contains(&i) {
            remap[i] = kept.len();
            kept.push(i);
        }
    }
    let f = graph.node_features.cols();
    let mut data = Vec::with_capacity(kept.len() * f);
    for &i in &kept {
        data.extend_from_slice(&graph.node_features.data()[i * f..(i + 1) * f]);
    }
    let edges: Vec<(usize, usize)> = graph
        .undirected_edges()
        .into_iter()
        .filter(|(a, b)| !dropped.contains(a) && !dropped.contains(b))
        .map(|(a, b)| (remap[a], remap[b]))
        .collect();
    let feats =
        Tensor::matrix(kept.len(), f, data).map_err(numkernel::KernelError::from)?;
    let mut out = Graph::new(feats, &edges)?;
    out.label = graph.label;
    out.node_labels = graph
        .node_labels
        .as_ref()
        .map(|l| kept.iter().map(|&i| l[i]).collect());
    Ok(out)
}

fn edge_perturb(graph: &Graph, ratio: f64, rng: &mut ChaCha8Rng) -> Result<Graph> {
    let n = graph.num_nodes();
    let mut edges = graph.undirected_edges();
    edges.retain(|(a, b)| a != b); // self-loops stay out of the perturbation pool
    let e = edges.len();
    if e == 0 {
        return Ok(graph.clone());
    }
    let remove = ((ratio * e as f64).ceil() as usize).min(e);
    edges.shuffle(rng);
    let kept: Vec<(usize, usize)> = edges[remove..].to_vec();
    let mut present: HashSet<(usize, usize)> = edges.iter().copied().collect();

    // add exactly as many fresh non-edges as were removed
    let mut added = Vec::with_capacity(remove);
    let max_possible = n * (n - 1) / 2;
    if max_possible > e {
        let mut attempts = 0usize;
        let cap = 200 * remove.max(1);
        while added.len() < remove && attempts < cap {
            attempts += 1;
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            if a == b {
                continue;
            }
            let key = (a.min(b), a.max(b));
            if present.contains(&key) {
                continue;
            }
            present.insert(key);
            added.push(key);
        }
        if added.len() < remove {
            // dense graph: enumerate remaining non-edges deterministically
            'outer: for a in 0..n {
                for b in (a + 1)..n {
                    if !present.contains(&(a, b)) {
                        present.insert((a, b));
                        added.push((a, b));
                        if added.len() == remove {
                            break 'outer;
                        }
                    }
                }
            }
        }
    }
    // if the graph is (near-)complete some removed edges come back to keep
    // the count exact
    let mut restored = 0;
    while added.len() < remove {
        added.push(edges[restored]);
        restored += 1;
    }

    let mut all = kept;
    all.extend(added);
    let mut out = Graph::new(graph.node_features.clone(), &all)?;
    out.label = graph.label;
    out.node_labels = graph.node_labels.clone();
    Ok(out)
}

fn feature_mask(graph: &Graph, ratio: f64, rng: &mut ChaCha8Rng) -> Result<Graph> {
    let f = graph.node_features.cols();
    let mask_count = ((ratio * f as f64).floor() as usize).min(f.saturating_sub(1));
    if mask_count == 0 {
        return Ok(graph.clone());
    }
    let mut cols: Vec<usize> = (0..f).collect();
    cols.shuffle(rng);
    let masked: HashSet<usize> = cols[..mask_count].iter().copied().collect();

    let n = graph.num_nodes();
    let mut data = graph.node_features.data().to_vec();
    for i in 0..n {
        for j in 0..f {
            if masked.contains(&j) {
                data[i * f + j] = 0.0;
            }
        }
    }
    let feats = Tensor::matrix(n, f, data).map_err(numkernel::KernelError::from)?;
    Ok(Graph {
        node_features: feats,
        adj: graph.adj.clone(),
        label: graph.label,
        node_labels: graph.node_labels.clone(),
    })
}

/// Per-instance NT-Xent between paired rows of two `[N, d]` embeddings:
/// `l_i = -log exp(cos(a_i, b_i)/t) / sum_{j != i} exp(cos(a_i, b_j)/t)`.
/// Returns the `[N]` per-instance loss vector.
pub fn nt_xent_per_instance<'t>(
    a: Val<'t>,
    b: Val<'t>,
    t_nce: f64,
) -> Result<Val<'t>> {
    let n = a.shape()[0];
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    let an = a.l2_normalize_rows()?;
    let bn = b.l2_normalize_rows()?;
    let sims = an.matmul(bn.transpose()?)?.scale(1.0 / t_nce)?;
    let exps = sims.exp()?;
    let diag_exp = exps.diag()?;
    let denom = exps.row_sums()?.sub(diag_exp)?;
    let pos = sims.diag()?;
    Ok(denom.ln()?.sub(pos)?)
}

/// Factor-routed pretext losses for one step: augment two views of every
/// batch graph, push both through all K factor paths, project, and score
/// NT-Xent per factor. Returns the `[N, K]` per-graph, per-factor loss
/// matrix (node tasks produce `[1, K]`, averaging over sampled anchor
/// nodes).
pub fn per_factor_losses<'t>(
    task: &PretextTask,
    tape: &'t Tape,
    net: &SuperNet,
    graphs: &[&Graph],
    rng: &mut ChaCha8Rng,
) -> Result<Val<'t>> {
    if task.kind == PretextKind::GraphContrastive && graphs.len() < 2 {
        return Err(Error::BatchTooSmall(graphs.len()));
    }

    let mut view1 = Vec::with_capacity(graphs.len());
    let mut view2 = Vec::with_capacity(graphs.len());
    for g in graphs {
        view1.push(augment_view(g, &task.view1, rng)?);
        view2.push(augment_view(g, &task.view2, rng)?);
    }
    let b1 = batch_graphs(&view1.iter().collect::<Vec<_>>())?;
    let b2 = batch_graphs(&view2.iter().collect::<Vec<_>>())?;
    let ctx1 = BatchCtx::new(&b1)?;
    let ctx2 = BatchCtx::new(&b2)?;

    let clean = ForwardCtx::clean();
    let out1 = net.forward(tape, &ctx1, &clean)?;
    let out2 = net.forward(tape, &ctx2, &clean)?;

    let mut leafs = LeafCache::new(tape, Rc::clone(&clean.overrides));
    let mut columns = Vec::with_capacity(net.cfg.factors);
    match task.kind {
        PretextKind::GraphContrastive => {
            for k in 0..net.cfg.factors {
                let p1 = task.head.apply(&mut leafs, out1.per_factor[k])?;
                let p2 = task.head.apply(&mut leafs, out2.per_factor[k])?;
                columns.push(nt_xent_per_instance(p1, p2, task.t_nce)?);
            }
        }
        PretextKind::NodeContrastive => {
            if net.cfg.task != Task::NodeLevel {
                return Err(Error::Invalid(
                    "node_contrastive pretext requires a node-level task".into(),
                ));
            }
            // anchors must exist in both views: node_drop is not used for
            // node-level views, so node counts match the original graph
            let n1 = b1.num_nodes();
            let n2 = b2.num_nodes();
            if n1 != n2 {
                return Err(Error::Invalid(
                    "node-level views must preserve the node set".into(),
                ));
            }
            let m = task.node_sample.min(n1);
            if m < 2 {
                return Err(Error::BatchTooSmall(m));
            }
            let mut order: Vec<usize> = (0..n1).collect();
            order.shuffle(rng);
            let anchors = Rc::new(order[..m].to_vec());
            for k in 0..net.cfg.factors {
                let p1 = task.head.apply(&mut leafs, out1.per_factor[k])?;
                let p2 = task.head.apply(&mut leafs, out2.per_factor[k])?;
                let a = p1.gather_rows(&anchors)?;
                let b = p2.gather_rows(&anchors)?;
                let per_node = nt_xent_per_instance(a, b, task.t_nce)?;
                columns.push(per_node.mean()?);
            }
        }
    }
    Ok(tape.concat_cols(&columns)?)
}
