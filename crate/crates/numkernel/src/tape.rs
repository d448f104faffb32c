use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::sparse::{EdgeEndpoints, SparseAdj};
use crate::{KernelError, Param, Result, Tensor};

/// Reduction modes for [`Tape::segment_reduce`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceMode {
    Sum,
    Mean,
    /// Per-segment maximum. Backward routes to the argmax entry only,
    /// with ties broken by the lowest row index.
    Max,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Val<'t> {
    tape: &'t Tape,
    idx: usize,
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

enum Op {
    Leaf {
        param: Option<Param>,
    },
    Matmul {
        a: usize,
        b: usize,
    },
    Transpose {
        x: usize,
    },
    Spmm {
        adj: Rc<SparseAdj>,
        x: usize,
    },
    SpmmWeighted {
        edges: Rc<EdgeEndpoints>,
        w: usize,
        x: usize,
    },
    SoftmaxRows {
        x: usize,
        temp: f64,
    },
    SegmentReduce {
        x: usize,
        segments: Rc<Vec<usize>>,
        mode: ReduceMode,
        counts: Vec<usize>,
        argmax: Vec<usize>,
    },
    SegmentSoftmax {
        x: usize,
        groups: Rc<Vec<usize>>,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Maximum {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: f64,
    },
    AddConst {
        x: usize,
    },
    AddRowVec {
        x: usize,
        v: usize,
    },
    ScaleRows {
        x: usize,
        v: usize,
    },
    ScaleByScalar {
        x: usize,
        s: usize,
    },
    WeightedSum {
        xs: Vec<usize>,
        w: usize,
    },
    Relu {
        x: usize,
    },
    LeakyRelu {
        x: usize,
        slope: f64,
    },
    Exp {
        x: usize,
    },
    Ln {
        x: usize,
    },
    ClampMin {
        x: usize,
        c: f64,
    },
    Sum {
        x: usize,
    },
    Mean {
        x: usize,
    },
    RowSums {
        x: usize,
    },
    RowDots {
        a: usize,
        b: usize,
    },
    ConcatCols {
        xs: Vec<usize>,
    },
    ColSlice {
        x: usize,
        col: usize,
    },
    RowSlice {
        x: usize,
        row: usize,
    },
    Diag {
        x: usize,
    },
    GatherRows {
        x: usize,
        idx: Rc<Vec<usize>>,
    },
    L2NormalizeRows {
        x: usize,
        denoms: Vec<f64>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MulMask {
        x: usize,
        mask: Rc<Vec<f64>>,
    },
}

/// A Wengert tape: every operation appends a node holding its output value,
/// its inputs' indices, and whatever the backward pass needs. Nodes are in
/// topological order by construction, so [`Tape::backward`] is a single
/// reverse sweep.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> Result<Val<'_>> {
        if self.consumed.get() {
            return Err(KernelError::TapeConsumed);
        }
        // leaf inputs are the caller's responsibility; recorded operations
        // must keep finite inputs finite
        debug_assert!(
            matches!(op, Op::Leaf { .. }) || data.iter().all(|v| v.is_finite()),
            "non-finite value produced on tape (shape {shape:?})"
        );
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        Ok(Val {
            tape: self,
            idx: nodes.len() - 1,
        })
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes.borrow()[idx].needs_grad
    }

    /// Record a parameter leaf. The current parameter value is snapshotted;
    /// gradients flow back into the parameter on `backward`.
    pub fn leaf(&self, param: &Param) -> Result<Val<'_>> {
        let t = param.value();
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf {
                param: Some(param.clone()),
            },
            true,
        )
    }

    /// Record a parameter leaf whose forward value has been substituted
    /// (e.g. by a transient weight perturbation). Gradients still accumulate
    /// into the underlying parameter.
    pub fn leaf_with_value(&self, param: &Param, value: Tensor) -> Result<Val<'_>> {
        if value.shape() != param.shape().as_slice() {
            return Err(KernelError::ShapeMismatch {
                op: "leaf_with_value",
                lhs: param.shape(),
                rhs: value.shape().to_vec(),
            });
        }
        let (shape, data) = (value.shape().to_vec(), value.data().to_vec());
        self.push(
            shape,
            data,
            Op::Leaf {
                param: Some(param.clone()),
            },
            true,
        )
    }

    /// Record a constant input. No gradient is tracked.
    pub fn constant(&self, value: Tensor) -> Result<Val<'_>> {
        let (shape, data) = (value.shape().to_vec(), value.data().to_vec());
        self.push(shape, data, Op::Leaf { param: None }, false)
    }

    pub fn zeros(&self, rows: usize, cols: usize) -> Result<Val<'_>> {
        self.constant(Tensor::zeros(vec![rows, cols]))
    }

    /// `out[dst] += weight(src, dst) * x[src]` over the adjacency edges.
    pub fn spmm<'t>(&'t self, adj: &Rc<SparseAdj>, x: Val<'t>) -> Result<Val<'t>> {
        self.check_same_tape(x)?;
        let (n, d) = x.matrix_dims("spmm")?;
        if adj.num_nodes() != n {
            return Err(KernelError::ShapeMismatch {
                op: "spmm",
                lhs: vec![adj.num_nodes()],
                rhs: vec![n, d],
            });
        }
        let mut out = vec![0.0; n * d];
        adj.apply(&x.data(), d, &mut out);
        self.push(
            vec![n, d],
            out,
            Op::Spmm {
                adj: Rc::clone(adj),
                x: x.idx,
            },
            x.needs(),
        )
    }

    /// Message passing with differentiable per-edge weights:
    /// `out[dst_e] += w[e] * x[src_e]`.
    pub fn spmm_weighted<'t>(
        &'t self,
        edges: &Rc<EdgeEndpoints>,
        w: Val<'t>,
        x: Val<'t>,
    ) -> Result<Val<'t>> {
        self.check_same_tape(w)?;
        self.check_same_tape(x)?;
        let (n, d) = x.matrix_dims("spmm_weighted")?;
        let e = w.column_len("spmm_weighted")?;
        if edges.num_nodes != n || edges.num_edges() != e {
            return Err(KernelError::ShapeMismatch {
                op: "spmm_weighted",
                lhs: vec![edges.num_nodes, edges.num_edges()],
                rhs: vec![n, e],
            });
        }
        let mut out = vec![0.0; n * d];
        {
            let wd = w.data();
            let xd = x.data();
            for i in 0..e {
                let (s, t) = (edges.src[i], edges.dst[i]);
                let weight = wd[i];
                let x_row = &xd[s * d..(s + 1) * d];
                let out_row = &mut out[t * d..(t + 1) * d];
                for (o, v) in out_row.iter_mut().zip(x_row) {
                    *o += weight * v;
                }
            }
        }
        self.push(
            vec![n, d],
            out,
            Op::SpmmWeighted {
                edges: Rc::clone(edges),
                w: w.idx,
                x: x.idx,
            },
            w.needs() || x.needs(),
        )
    }

    /// Per-segment reduction of rows: `out[s] = reduce over {x[i] : segments[i] == s}`.
    /// Every segment must be non-empty.
    pub fn segment_reduce<'t>(
        &'t self,
        x: Val<'t>,
        segments: &Rc<Vec<usize>>,
        num_segments: usize,
        mode: ReduceMode,
    ) -> Result<Val<'t>> {
        self.check_same_tape(x)?;
        let (n, d) = x.matrix_dims("segment_reduce")?;
        if segments.len() != n {
            return Err(KernelError::ShapeMismatch {
                op: "segment_reduce",
                lhs: vec![segments.len()],
                rhs: vec![n, d],
            });
        }
        let mut counts = vec![0usize; num_segments];
        for &s in segments.iter() {
            if s >= num_segments {
                return Err(KernelError::SegmentOutOfRange {
                    id: s,
                    num_segments,
                });
            }
            counts[s] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(KernelError::EmptySegment(empty));
        }
        let mut out;
        let mut arg = Vec::new();
        let xd = x.data();
        match mode {
            ReduceMode::Sum | ReduceMode::Mean => {
                out = vec![0.0; num_segments * d];
                for (i, &s) in segments.iter().enumerate() {
                    let row = &xd[i * d..(i + 1) * d];
                    let out_row = &mut out[s * d..(s + 1) * d];
                    for (o, v) in out_row.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                if mode == ReduceMode::Mean {
                    for (s, &c) in counts.iter().enumerate() {
                        let inv = 1.0 / c as f64;
                        for v in &mut out[s * d..(s + 1) * d] {
                            *v *= inv;
                        }
                    }
                }
            }
            ReduceMode::Max => {
                out = vec![f64::NEG_INFINITY; num_segments * d];
                arg = vec![usize::MAX; num_segments * d];
                for (i, &s) in segments.iter().enumerate() {
                    for j in 0..d {
                        let v = xd[i * d + j];
                        // strict > keeps the first (lowest-index) row on ties
                        if v > out[s * d + j] {
                            out[s * d + j] = v;
                            arg[s * d + j] = i;
                        }
                    }
                }
            }
        }
        drop(xd);
        self.push(
            vec![num_segments, d],
            out,
            Op::SegmentReduce {
                x: x.idx,
                segments: Rc::clone(segments),
                mode,
                counts,
                argmax: arg,
            },
            x.needs(),
        )
    }

    /// Softmax within groups of a column vector (used for per-destination
    /// edge attention and per-graph node attention).
    pub fn segment_softmax<'t>(
        &'t self,
        x: Val<'t>,
        groups: &Rc<Vec<usize>>,
        num_groups: usize,
    ) -> Result<Val<'t>> {
        self.check_same_tape(x)?;
        let m = x.column_len("segment_softmax")?;
        if groups.len() != m {
            return Err(KernelError::ShapeMismatch {
                op: "segment_softmax",
                lhs: vec![groups.len()],
                rhs: vec![m],
            });
        }
        for &g in groups.iter() {
            if g >= num_groups {
                return Err(KernelError::SegmentOutOfRange {
                    id: g,
                    num_segments: num_groups,
                });
            }
        }
        let xd = x.data();
        let mut maxes = vec![f64::NEG_INFINITY; num_groups];
        for (i, &g) in groups.iter().enumerate() {
            if xd[i] > maxes[g] {
                maxes[g] = xd[i];
            }
        }
        let mut sums = vec![0.0; num_groups];
        let mut out = vec![0.0; m];
        for (i, &g) in groups.iter().enumerate() {
            let e = (xd[i] - maxes[g]).exp();
            out[i] = e;
            sums[g] += e;
        }
        for (i, &g) in groups.iter().enumerate() {
            out[i] /= sums[g];
        }
        drop(xd);
        let shape = x.shape();
        self.push(
            shape,
            out,
            Op::SegmentSoftmax {
                x: x.idx,
                groups: Rc::clone(groups),
            },
            x.needs(),
        )
    }

    /// `sum_i w[i] * xs[i]` over same-shaped tensors; the mixing weights are
    /// a rank-1 tensor and receive gradients.
    pub fn weighted_sum<'t>(&'t self, xs: &[Val<'t>], w: Val<'t>) -> Result<Val<'t>> {
        if xs.is_empty() {
            return Err(KernelError::EmptyInput { op: "weighted_sum" });
        }
        self.check_same_tape(w)?;
        let m = w.column_len("weighted_sum")?;
        if m != xs.len() {
            return Err(KernelError::ShapeMismatch {
                op: "weighted_sum",
                lhs: vec![m],
                rhs: vec![xs.len()],
            });
        }
        let shape = xs[0].shape();
        for x in xs {
            self.check_same_tape(*x)?;
            if x.shape() != shape {
                return Err(KernelError::ShapeMismatch {
                    op: "weighted_sum",
                    lhs: shape,
                    rhs: x.shape(),
                });
            }
        }
        let numel: usize = shape.iter().product();
        let mut out = vec![0.0; numel];
        let mut needs = w.needs();
        {
            let wd = w.data();
            for (x, &wi) in xs.iter().zip(wd.iter()) {
                needs |= x.needs();
                let xd = x.data();
                for (o, v) in out.iter_mut().zip(xd.iter()) {
                    *o += wi * v;
                }
            }
        }
        self.push(
            shape,
            out,
            Op::WeightedSum {
                xs: xs.iter().map(|v| v.idx).collect(),
                w: w.idx,
            },
            needs,
        )
    }

    /// Concatenate column-wise; rank-1 inputs are treated as single columns.
    pub fn concat_cols<'t>(&'t self, xs: &[Val<'t>]) -> Result<Val<'t>> {
        if xs.is_empty() {
            return Err(KernelError::EmptyInput { op: "concat_cols" });
        }
        let n = xs[0].rows_as_matrix();
        let mut total = 0usize;
        for x in xs {
            self.check_same_tape(*x)?;
            if x.rows_as_matrix() != n {
                return Err(KernelError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![n],
                    rhs: x.shape(),
                });
            }
            total += x.cols_as_matrix();
        }
        let mut out = vec![0.0; n * total];
        let mut offset = 0;
        for x in xs {
            let c = x.cols_as_matrix();
            let xd = x.data();
            for i in 0..n {
                out[i * total + offset..i * total + offset + c]
                    .copy_from_slice(&xd[i * c..(i + 1) * c]);
            }
            offset += c;
        }
        let needs = xs.iter().any(|x| x.needs());
        self.push(
            vec![n, total],
            out,
            Op::ConcatCols {
                xs: xs.iter().map(|v| v.idx).collect(),
            },
            needs,
        )
    }

    fn check_same_tape(&self, v: Val<'_>) -> Result<()> {
        if std::ptr::eq(self, v.tape) {
            Ok(())
        } else {
            Err(KernelError::TapeMismatch)
        }
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate into every
    /// parameter reachable from the loss; the tape is freed afterwards.
    pub fn backward(&self, loss: Val<'_>) -> Result<()> {
        self.check_same_tape(loss)?;
        if self.consumed.get() {
            return Err(KernelError::TapeConsumed);
        }
        {
            let nodes = self.nodes.borrow();
            if nodes[loss.idx].data.len() != 1 {
                return Err(KernelError::NonScalarLoss(nodes[loss.idx].shape.clone()));
            }
        }
        self.consumed.set(true);
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.idx] = Some(vec![1.0]);

        for i in (0..nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            backward_step(node, &g, &nodes, &mut grads);
        }
        Ok(())
    }
}

/// Adds `len`-sized gradient contributions into the slot for node `idx`,
/// allocating a zero buffer on first touch. Nodes that do not need
/// gradients are skipped entirely.
fn with_slot<F: FnOnce(&mut [f64])>(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    idx: usize,
    f: F,
) {
    if !nodes[idx].needs_grad {
        return;
    }
    let numel = nodes[idx].data.len();
    let slot = grads[idx].get_or_insert_with(|| vec![0.0; numel]);
    f(slot);
}

fn backward_step(node: &Node, g: &[f64], nodes: &[Node], grads: &mut [Option<Vec<f64>>]) {
    match &node.op {
        Op::Leaf { param } => {
            if let Some(p) = param {
                p.tensor_mut().accumulate_grad(g);
            }
        }
        Op::Matmul { a, b } => {
            let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let n = nodes[*b].shape[1];
            let (ad, bd) = (&nodes[*a].data, &nodes[*b].data);
            with_slot(grads, nodes, *a, |da| {
                matmul_nt_raw(g, bd, m, n, k, da);
            });
            with_slot(grads, nodes, *b, |db| {
                matmul_tn_raw(ad, g, m, k, n, db);
            });
        }
        Op::Transpose { x } => {
            let (r, c) = (node.shape[0], node.shape[1]);
            with_slot(grads, nodes, *x, |dx| {
                for i in 0..r {
                    for j in 0..c {
                        dx[j * r + i] += g[i * c + j];
                    }
                }
            });
        }
        Op::Spmm { adj, x } => {
            let d = nodes[*x].shape[1];
            with_slot(grads, nodes, *x, |dx| {
                adj.apply_transpose(g, d, dx);
            });
        }
        Op::SpmmWeighted { edges, w, x } => {
            let d = nodes[*x].shape[1];
            let (xd, wd) = (&nodes[*x].data, &nodes[*w].data);
            with_slot(grads, nodes, *x, |dx| {
                for e in 0..edges.num_edges() {
                    let (s, t) = (edges.src[e], edges.dst[e]);
                    let weight = wd[e];
                    let g_row = &g[t * d..(t + 1) * d];
                    let dx_row = &mut dx[s * d..(s + 1) * d];
                    for (o, v) in dx_row.iter_mut().zip(g_row) {
                        *o += weight * v;
                    }
                }
            });
            with_slot(grads, nodes, *w, |dw| {
                for e in 0..edges.num_edges() {
                    let (s, t) = (edges.src[e], edges.dst[e]);
                    let g_row = &g[t * d..(t + 1) * d];
                    let x_row = &xd[s * d..(s + 1) * d];
                    dw[e] += g_row.iter().zip(x_row).map(|(a, b)| a * b).sum::<f64>();
                }
            });
        }
        Op::SoftmaxRows { x, temp } => {
            let (n, d) = (node.shape[0], node.shape[1]);
            let s = &node.data;
            with_slot(grads, nodes, *x, |dx| {
                for i in 0..n {
                    let row = &s[i * d..(i + 1) * d];
                    let g_row = &g[i * d..(i + 1) * d];
                    let dot: f64 = row.iter().zip(g_row).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx[i * d + j] += row[j] * (g_row[j] - dot) / temp;
                    }
                }
            });
        }
        Op::SegmentReduce {
            x,
            segments,
            mode,
            counts,
            argmax,
        } => {
            let d = nodes[*x].shape[1];
            with_slot(grads, nodes, *x, |dx| match mode {
                ReduceMode::Sum => {
                    for (i, &s) in segments.iter().enumerate() {
                        for j in 0..d {
                            dx[i * d + j] += g[s * d + j];
                        }
                    }
                }
                ReduceMode::Mean => {
                    for (i, &s) in segments.iter().enumerate() {
                        let inv = 1.0 / counts[s] as f64;
                        for j in 0..d {
                            dx[i * d + j] += g[s * d + j] * inv;
                        }
                    }
                }
                ReduceMode::Max => {
                    for (slot, &i) in argmax.iter().enumerate() {
                        let j = slot % d;
                        dx[i * d + j] += g[slot];
                    }
                }
            });
        }
        Op::SegmentSoftmax { x, groups } => {
            let s = &node.data;
            let num_groups = groups.iter().copied().max().map_or(0, |m| m + 1);
            let mut dots = vec![0.0; num_groups];
            for (i, &grp) in groups.iter().enumerate() {
                dots[grp] += s[i] * g[i];
            }
            with_slot(grads, nodes, *x, |dx| {
                for (i, &grp) in groups.iter().enumerate() {
                    dx[i] += s[i] * (g[i] - dots[grp]);
                }
            });
        }
        Op::Add { a, b } => {
            with_slot(grads, nodes, *a, |da| {
                for (o, v) in da.iter_mut().zip(g) {
                    *o += v;
                }
            });
            with_slot(grads, nodes, *b, |db| {
                for (o, v) in db.iter_mut().zip(g) {
                    *o += v;
                }
            });
        }
        Op::Sub { a, b } => {
            with_slot(grads, nodes, *a, |da| {
                for (o, v) in da.iter_mut().zip(g) {
                    *o += v;
                }
            });
            with_slot(grads, nodes, *b, |db| {
                for (o, v) in db.iter_mut().zip(g) {
                    *o -= v;
                }
            });
        }
        Op::Mul { a, b } => {
            let (ad, bd) = (&nodes[*a].data, &nodes[*b].data);
            with_slot(grads, nodes, *a, |da| {
                for ((o, v), bv) in da.iter_mut().zip(g).zip(bd) {
                    *o += v * bv;
                }
            });
            with_slot(grads, nodes, *b, |db| {
                for ((o, v), av) in db.iter_mut().zip(g).zip(ad) {
                    *o += v * av;
                }
            });
        }
        Op::Maximum { a, b } => {
            let (ad, bd) = (&nodes[*a].data, &nodes[*b].data);
            // ties route to the first argument
            with_slot(grads, nodes, *a, |da| {
                for i in 0..g.len() {
                    if ad[i] >= bd[i] {
                        da[i] += g[i];
                    }
                }
            });
            with_slot(grads, nodes, *b, |db| {
                for i in 0..g.len() {
                    if ad[i] < bd[i] {
                        db[i] += g[i];
                    }
                }
            });
        }
        Op::Scale { x, c } => {
            with_slot(grads, nodes, *x, |dx| {
                for (o, v) in dx.iter_mut().zip(g) {
                    *o += c * v;
                }
            });
        }
        Op::AddConst { x } => {
            with_slot(grads, nodes, *x, |dx| {
                for (o, v) in dx.iter_mut().zip(g) {
                    *o += v;
                }
            });
        }
        Op::AddRowVec { x, v } => {
            let (n, d) = (node.shape[0], node.shape[1]);
            with_slot(grads, nodes, *x, |dx| {
                for (o, gv) in dx.iter_mut().zip(g) {
                    *o += gv;
                }
            });
            with_slot(grads, nodes, *v, |dv| {
                for i in 0..n {
                    for j in 0..d {
                        dv[j] += g[i * d + j];
                    }
                }
            });
        }
        Op::ScaleRows { x, v } => {
            let (n, d) = (node.shape[0], node.shape[1]);
            let (xd, vd) = (&nodes[*x].data, &nodes[*v].data);
            with_slot(grads, nodes, *x, |dx| {
                for i in 0..n {
                    for j in 0..d {
                        dx[i * d + j] += g[i * d + j] * vd[i];
                    }
                }
            });
            with_slot(grads, nodes, *v, |dv| {
                for i in 0..n {
                    let mut dot = 0.0;
                    for j in 0..d {
                        dot += g[i * d + j] * xd[i * d + j];
                    }
                    dv[i] += dot;
                }
            });
        }
        Op::ScaleByScalar { x, s } => {
            let xd = &nodes[*x].data;
            let sv = nodes[*s].data[0];
            with_slot(grads, nodes, *x, |dx| {
                for (o, v) in dx.iter_mut().zip(g) {
                    *o += sv * v;
                }
            });
            with_slot(grads, nodes, *s, |ds| {
                ds[0] += g.iter().zip(xd).map(|(a, b)| a * b).sum::<f64>();
            });
        }
        Op::WeightedSum { xs, w } => {
            let wd = &nodes[*w].data;
            for (slot, x) in xs.iter().enumerate() {
                let wi = wd[slot];
                with_slot(grads, nodes, *x, |dx| {
                    for (o, v) in dx.iter_mut().zip(g) {
                        *o += wi * v;
                    }
                });
            }
            with_slot(grads, nodes, *w, |dw| {
                for (slot, x) in xs.iter().enumerate() {
                    let xd = &nodes[*x].data;
                    dw[slot] += g.iter().zip(xd).map(|(a, b)| a * b).sum::<f64>();
                }
            });
        }
        Op::Relu { x } => {
            let xd = &nodes[*x].data;
            with_slot(grads, nodes, *x, |dx| {
                for i in 0..g.len() {
                    if xd[i] > 0.0 {
                        dx[i] += g[i];
                    }
                }
            });
        }
        Op::LeakyRelu { x, slope } => {
            let xd = &nodes[*x].data;
            with_slot(grads, nodes, *x, |dx| {
                for i in 0..g.len() {
                    dx[i] += g[i] * if xd[i] >= 0.0 { 1.0 } else { *slope };
                }
            });
        }
        Op::Exp { x } => {
            let y = &node.data;
            with_slot(grads, nodes, *x, |dx| {
                for i in 0..g.len() {
                    dx[i] += g[i] * y[i];
                }
            });
        }
        Op::Ln { x } => {
            let xd = &nodes[*x].data;
            with_slot(grads, nodes, *x, |dx| {
                for i in 0..g.len() {
                    dx[i] += g[i] / xd[i];
                }
            });
        }
        Op::ClampMin { x, c } => {
            let xd = &nodes[*x].data;
            with_slot(grads, nodes, *x, |dx| {
                for i in 0..g.len() {
                    if xd[i] >= *c {
                        dx[i] += g[i];
                    }
                }
            });
        }
        Op::Sum { x } => {
            with_slot(grads, nodes, *x, |dx| {
                for o in dx.iter_mut() {
                    *o += g[0];
                }
            });
        }
        Op::Mean { x } => {
            let inv = 1.0 / nodes[*x].data.len() as f64;
            with_slot(grads, nodes, *x, |dx| {
                for o in dx.iter_mut() {
                    *o += g[0] * inv;
                }
            });
        }
        Op::RowSums { x } => {
            let (n, d) = (nodes[*x].shape[0], nodes[*x].shape[1]);
            with_slot(grads, nodes, *x, |dx| {
                for i in 0..n {
                    for j in 0..d {
                        dx[i * d + j] += g[i];
                    }
                }
            });
        }
        Op::RowDots { a, b } => {
            let (n, d) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let (ad, bd) = (&nodes[*a].data, &nodes[*b].data);
            with_slot(grads, nodes, *a, |da| {
                for i in 0..n {
                    for j in 0..d {
                        da[i * d + j] += g[i] * bd[i * d + j];
                    }
                }
            });
            with_slot(grads, nodes, *b, |db| {
                for i in 0..n {
                    for j in 0..d {
                        db[i * d + j] += g[i] * ad[i * d + j];
                    }
                }
            });
        }
        Op::ConcatCols { xs } => {
            let total = node.shape[1];
            let n = node.shape[0];
            let mut offset = 0;
            for x in xs {
                let c = if nodes[*x].shape.len() == 2 {
                    nodes[*x].shape[1]
                } else {
                    1
                };
                with_slot(grads, nodes, *x, |dx| {
                    for i in 0..n {
                        for j in 0..c {
                            dx[i * c + j] += g[i * total + offset + j];
                        }
                    }
                });
                offset += c;
            }
        }
        Op::ColSlice { x, col } => {
            let d = nodes[*x].shape[1];
            with_slot(grads, nodes, *x, |dx| {
                for (i, gv) in g.iter().enumerate() {
                    dx[i * d + col] += gv;
                }
            });
        }
        Op::RowSlice { x, row } => {
            let d = nodes[*x].shape[1];
            with_slot(grads, nodes, *x, |dx| {
                for (j, gv) in g.iter().enumerate() {
                    dx[row * d + j] += gv;
                }
            });
        }
        Op::Diag { x } => {
            let d = nodes[*x].shape[1];
            with_slot(grads, nodes, *x, |dx| {
                for (i, gv) in g.iter().enumerate() {
                    dx[i * d + i] += gv;
                }
            });
        }
        Op::GatherRows { x, idx } => {
            let d = nodes[*x].shape[1];
            with_slot(grads, nodes, *x, |dx| {
                for (out_row, &src_row) in idx.iter().enumerate() {
                    for j in 0..d {
                        dx[src_row * d + j] += g[out_row * d + j];
                    }
                }
            });
        }
        Op::L2NormalizeRows { x, denoms } => {
            let (n, d) = (node.shape[0], node.shape[1]);
            let y = &node.data;
            with_slot(grads, nodes, *x, |dx| {
                for i in 0..n {
                    let y_row = &y[i * d..(i + 1) * d];
                    let g_row = &g[i * d..(i + 1) * d];
                    let dot: f64 = y_row.iter().zip(g_row).map(|(a, b)| a * b).sum();
                    let inv = 1.0 / denoms[i];
                    for j in 0..d {
                        dx[i * d + j] += (g_row[j] - y_row[j] * dot) * inv;
                    }
                }
            });
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let (n, d) = (node.shape[0], node.shape[1]);
            let gam = &nodes[*gamma].data;
            // column-wise statistics of dL/dxhat
            let mut sum_dxh = vec![0.0; d];
            let mut sum_dxh_xh = vec![0.0; d];
            for i in 0..n {
                for j in 0..d {
                    let dxh = g[i * d + j] * gam[j];
                    sum_dxh[j] += dxh;
                    sum_dxh_xh[j] += dxh * xhat[i * d + j];
                }
            }
            let inv_n = 1.0 / n as f64;
            with_slot(grads, nodes, *x, |dx| {
                for i in 0..n {
                    for j in 0..d {
                        let dxh = g[i * d + j] * gam[j];
                        dx[i * d + j] += inv_std[j]
                            * (dxh - inv_n * sum_dxh[j] - xhat[i * d + j] * inv_n * sum_dxh_xh[j]);
                    }
                }
            });
            with_slot(grads, nodes, *gamma, |dg| {
                for i in 0..n {
                    for j in 0..d {
                        dg[j] += g[i * d + j] * xhat[i * d + j];
                    }
                }
            });
            with_slot(grads, nodes, *beta, |db| {
                for i in 0..n {
                    for j in 0..d {
                        db[j] += g[i * d + j];
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let (n, d) = (node.shape[0], node.shape[1]);
            let gam = &nodes[*gamma].data;
            let inv_d = 1.0 / d as f64;
            with_slot(grads, nodes, *x, |dx| {
                for i in 0..n {
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for j in 0..d {
                        let dxh = g[i * d + j] * gam[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xhat[i * d + j];
                    }
                    for j in 0..d {
                        let dxh = g[i * d + j] * gam[j];
                        dx[i * d + j] += inv_std[i]
                            * (dxh - inv_d * sum_dxh - xhat[i * d + j] * inv_d * sum_dxh_xh);
                    }
                }
            });
            with_slot(grads, nodes, *gamma, |dg| {
                for i in 0..n {
                    for j in 0..d {
                        dg[j] += g[i * d + j] * xhat[i * d + j];
                    }
                }
            });
            with_slot(grads, nodes, *beta, |db| {
                for i in 0..n {
                    for j in 0..d {
                        db[j] += g[i * d + j];
                    }
                }
            });
        }
        Op::MulMask { x, mask } => {
            with_slot(grads, nodes, *x, |dx| {
                for i in 0..g.len() {
                    dx[i] += g[i] * mask[i];
                }
            });
        }
    }
}

impl<'t> Val<'t> {
    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.idx].shape.clone()
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.idx];
        Tensor::new(node.shape.clone(), node.data.clone()).expect("tape node is well-formed")
    }

    pub fn scalar_value(&self) -> f64 {
        let nodes = self.tape.nodes.borrow();
        debug_assert_eq!(nodes[self.idx].data.len(), 1);
        nodes[self.idx].data[0]
    }

    fn data(&self) -> std::cell::Ref<'t, [f64]> {
        std::cell::Ref::map(self.tape.nodes.borrow(), |n| &n[self.idx].data[..])
    }

    fn needs(&self) -> bool {
        self.tape.needs(self.idx)
    }

    fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        let shape = self.shape();
        if shape.len() == 2 {
            Ok((shape[0], shape[1]))
        } else {
            Err(KernelError::BadShape {
                op,
                expected: "rank-2 tensor",
                got: shape,
            })
        }
    }

    /// Length of a column-like tensor: rank 1, or rank 2 with one column.
    fn column_len(&self, op: &'static str) -> Result<usize> {
        let shape = self.shape();
        match shape.as_slice() {
            [n] => Ok(*n),
            [n, 1] => Ok(*n),
            _ => Err(KernelError::BadShape {
                op,
                expected: "column vector",
                got: shape,
            }),
        }
    }

    /// Length of a row-like tensor: rank 1, or rank 2 with one row.
    fn row_len(&self, op: &'static str) -> Result<usize> {
        let shape = self.shape();
        match shape.as_slice() {
            [n] => Ok(*n),
            [1, n] => Ok(*n),
            _ => Err(KernelError::BadShape {
                op,
                expected: "row vector",
                got: shape,
            }),
        }
    }

    fn rows_as_matrix(&self) -> usize {
        self.shape()[0]
    }

    fn cols_as_matrix(&self) -> usize {
        let shape = self.shape();
        if shape.len() == 2 {
            shape[1]
        } else {
            1
        }
    }

    pub fn matmul(self, other: Val<'t>) -> Result<Val<'t>> {
        self.tape.check_same_tape(other)?;
        let (m, k) = self.matrix_dims("matmul")?;
        let (k2, n) = other.matrix_dims("matmul")?;
        if k != k2 {
            return Err(KernelError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_raw(&self.data(), &other.data(), m, k, n, &mut out);
        self.tape.push(
            vec![m, n],
            out,
            Op::Matmul {
                a: self.idx,
                b: other.idx,
            },
            self.needs() || other.needs(),
        )
    }

    pub fn transpose(self) -> Result<Val<'t>> {
        let (r, c) = self.matrix_dims("transpose")?;
        let xd = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        drop(xd);
        self.tape
            .push(vec![c, r], out, Op::Transpose { x: self.idx }, self.needs())
    }

    /// Row-wise softmax with temperature, stabilized by row-max subtraction.
    pub fn softmax_rows(self, temperature: f64) -> Result<Val<'t>> {
        if temperature <= 0.0 {
            return Err(KernelError::NonPositiveTemperature(temperature));
        }
        let (n, d) = self.matrix_dims("softmax_rows")?;
        let xd = self.data();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &xd[i * d..(i + 1) * d];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..d {
                let e = ((row[j] - max) / temperature).exp();
                out[i * d + j] = e;
                sum += e;
            }
            for j in 0..d {
                out[i * d + j] /= sum;
            }
        }
        drop(xd);
        self.tape.push(
            vec![n, d],
            out,
            Op::SoftmaxRows {
                x: self.idx,
                temp: temperature,
            },
            self.needs(),
        )
    }

    pub fn add(self, other: Val<'t>) -> Result<Val<'t>> {
        self.zip_elementwise(other, "add", |a, b| a + b, |a, b| Op::Add { a, b })
    }

    pub fn sub(self, other: Val<'t>) -> Result<Val<'t>> {
        self.zip_elementwise(other, "sub", |a, b| a - b, |a, b| Op::Sub { a, b })
    }

    pub fn mul(self, other: Val<'t>) -> Result<Val<'t>> {
        self.zip_elementwise(other, "mul", |a, b| a * b, |a, b| Op::Mul { a, b })
    }

    /// Elementwise maximum; gradient ties route to `self`.
    pub fn maximum(self, other: Val<'t>) -> Result<Val<'t>> {
        self.zip_elementwise(other, "maximum", f64::max, |a, b| Op::Maximum { a, b })
    }

    fn zip_elementwise(
        self,
        other: Val<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Val<'t>> {
        self.tape.check_same_tape(other)?;
        if self.shape() != other.shape() {
            return Err(KernelError::ShapeMismatch {
                op: name,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let out: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| f(*a, *b))
            .collect();
        self.tape
            .push(self.shape(), out, op(self.idx, other.idx), self.needs() || other.needs())
    }

    pub fn scale(self, c: f64) -> Result<Val<'t>> {
        let out: Vec<f64> = self.data().iter().map(|v| v * c).collect();
        self.tape
            .push(self.shape(), out, Op::Scale { x: self.idx, c }, self.needs())
    }

    pub fn add_const(self, c: f64) -> Result<Val<'t>> {
        let out: Vec<f64> = self.data().iter().map(|v| v + c).collect();
        self.tape
            .push(self.shape(), out, Op::AddConst { x: self.idx }, self.needs())
    }

    /// Add a row vector to every row.
    pub fn add_rowvec(self, v: Val<'t>) -> Result<Val<'t>> {
        self.tape.check_same_tape(v)?;
        let (n, d) = self.matrix_dims("add_rowvec")?;
        let vd_len = v.row_len("add_rowvec")?;
        if vd_len != d {
            return Err(KernelError::ShapeMismatch {
                op: "add_rowvec",
                lhs: vec![n, d],
                rhs: v.shape(),
            });
        }
        let xd = self.data();
        let vd = v.data();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] = xd[i * d + j] + vd[j];
            }
        }
        drop(xd);
        drop(vd);
        self.tape.push(
            vec![n, d],
            out,
            Op::AddRowVec {
                x: self.idx,
                v: v.idx,
            },
            self.needs() || v.needs(),
        )
    }

    /// Scale row `i` by `v[i]`.
    pub fn scale_rows(self, v: Val<'t>) -> Result<Val<'t>> {
        self.tape.check_same_tape(v)?;
        let (n, d) = self.matrix_dims("scale_rows")?;
        let vd_len = v.column_len("scale_rows")?;
        if vd_len != n {
            return Err(KernelError::ShapeMismatch {
                op: "scale_rows",
                lhs: vec![n, d],
                rhs: v.shape(),
            });
        }
        let xd = self.data();
        let vd = v.data();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] = xd[i * d + j] * vd[i];
            }
        }
        drop(xd);
        drop(vd);
        self.tape.push(
            vec![n, d],
            out,
            Op::ScaleRows {
                x: self.idx,
                v: v.idx,
            },
            self.needs() || v.needs(),
        )
    }

    /// Multiply the whole tensor by a scalar-valued tape node.
    pub fn scale_by_scalar(self, s: Val<'t>) -> Result<Val<'t>> {
        self.tape.check_same_tape(s)?;
        if s.value().numel() != 1 {
            return Err(KernelError::BadShape {
                op: "scale_by_scalar",
                expected: "scalar",
                got: s.shape(),
            });
        }
        let sv = s.data()[0];
        let out: Vec<f64> = self.data().iter().map(|v| v * sv).collect();
        self.tape.push(
            self.shape(),
            out,
            Op::ScaleByScalar {
                x: self.idx,
                s: s.idx,
            },
            self.needs() || s.needs(),
        )
    }

    pub fn relu(self) -> Result<Val<'t>> {
        let out: Vec<f64> = self.data().iter().map(|v| v.max(0.0)).collect();
        self.tape
            .push(self.shape(), out, Op::Relu { x: self.idx }, self.needs())
    }

    pub fn leaky_relu(self, slope: f64) -> Result<Val<'t>> {
        let out: Vec<f64> = self
            .data()
            .iter()
            .map(|&v| if v >= 0.0 { v } else { slope * v })
            .collect();
        self.tape.push(
            self.shape(),
            out,
            Op::LeakyRelu { x: self.idx, slope },
            self.needs(),
        )
    }

    pub fn exp(self) -> Result<Val<'t>> {
        let out: Vec<f64> = self.data().iter().map(|v| v.exp()).collect();
        self.tape
            .push(self.shape(), out, Op::Exp { x: self.idx }, self.needs())
    }

    pub fn ln(self) -> Result<Val<'t>> {
        let out: Vec<f64> = self.data().iter().map(|v| v.ln()).collect();
        self.tape
            .push(self.shape(), out, Op::Ln { x: self.idx }, self.needs())
    }

    pub fn clamp_min(self, c: f64) -> Result<Val<'t>> {
        let out: Vec<f64> = self.data().iter().map(|v| v.max(c)).collect();
        self.tape
            .push(self.shape(), out, Op::ClampMin { x: self.idx, c }, self.needs())
    }

    pub fn sum(self) -> Result<Val<'t>> {
        let s: f64 = self.data().iter().sum();
        self.tape
            .push(vec![1], vec![s], Op::Sum { x: self.idx }, self.needs())
    }

    pub fn mean(self) -> Result<Val<'t>> {
        let d = self.data();
        let s: f64 = d.iter().sum::<f64>() / d.len() as f64;
        drop(d);
        self.tape
            .push(vec![1], vec![s], Op::Mean { x: self.idx }, self.needs())
    }

    /// Sum along each row: `[n, d] -> [n]`.
    pub fn row_sums(self) -> Result<Val<'t>> {
        let (n, d) = self.matrix_dims("row_sums")?;
        let xd = self.data();
        let out: Vec<f64> = (0..n).map(|i| xd[i * d..(i + 1) * d].iter().sum()).collect();
        drop(xd);
        self.tape
            .push(vec![n], out, Op::RowSums { x: self.idx }, self.needs())
    }

    /// Per-row dot products of two same-shaped matrices: `[n, d] x [n, d] -> [n]`.
    pub fn row_dots(self, other: Val<'t>) -> Result<Val<'t>> {
        self.tape.check_same_tape(other)?;
        let (n, d) = self.matrix_dims("row_dots")?;
        if other.shape() != vec![n, d] {
            return Err(KernelError::ShapeMismatch {
                op: "row_dots",
                lhs: vec![n, d],
                rhs: other.shape(),
            });
        }
        let (ad, bd) = (self.data(), other.data());
        let out: Vec<f64> = (0..n)
            .map(|i| {
                ad[i * d..(i + 1) * d]
                    .iter()
                    .zip(&bd[i * d..(i + 1) * d])
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        drop(ad);
        drop(bd);
        self.tape.push(
            vec![n],
            out,
            Op::RowDots {
                a: self.idx,
                b: other.idx,
            },
            self.needs() || other.needs(),
        )
    }

    /// Extract column `col` as a rank-1 tensor.
    pub fn col_slice(self, col: usize) -> Result<Val<'t>> {
        let (n, d) = self.matrix_dims("col_slice")?;
        if col >= d {
            return Err(KernelError::ColOutOfRange { col, cols: d });
        }
        let xd = self.data();
        let out: Vec<f64> = (0..n).map(|i| xd[i * d + col]).collect();
        drop(xd);
        self.tape
            .push(vec![n], out, Op::ColSlice { x: self.idx, col }, self.needs())
    }

    /// Extract row `row` as a rank-1 tensor.
    pub fn row_slice(self, row: usize) -> Result<Val<'t>> {
        let (n, d) = self.matrix_dims("row_slice")?;
        if row >= n {
            return Err(KernelError::RowOutOfRange { row, rows: n });
        }
        let out = self.data()[row * d..(row + 1) * d].to_vec();
        self.tape
            .push(vec![d], out, Op::RowSlice { x: self.idx, row }, self.needs())
    }

    /// Main diagonal of a square matrix as a rank-1 tensor.
    pub fn diag(self) -> Result<Val<'t>> {
        let (n, d) = self.matrix_dims("diag")?;
        if n != d {
            return Err(KernelError::BadShape {
                op: "diag",
                expected: "square matrix",
                got: vec![n, d],
            });
        }
        let xd = self.data();
        let out: Vec<f64> = (0..n).map(|i| xd[i * d + i]).collect();
        drop(xd);
        self.tape
            .push(vec![n], out, Op::Diag { x: self.idx }, self.needs())
    }

    /// Gather rows by index (duplicates allowed); backward scatter-adds.
    pub fn gather_rows(self, idx: &Rc<Vec<usize>>) -> Result<Val<'t>> {
        let (n, d) = self.matrix_dims("gather_rows")?;
        for &i in idx.iter() {
            if i >= n {
                return Err(KernelError::RowOutOfRange { row: i, rows: n });
            }
        }
        let xd = self.data();
        let mut out = vec![0.0; idx.len() * d];
        for (row, &src) in idx.iter().enumerate() {
            out[row * d..(row + 1) * d].copy_from_slice(&xd[src * d..(src + 1) * d]);
        }
        drop(xd);
        self.tape.push(
            vec![idx.len(), d],
            out,
            Op::GatherRows {
                x: self.idx,
                idx: Rc::clone(idx),
            },
            self.needs(),
        )
    }

    /// Normalize each row to unit L2 norm (norms below `1e-12` are clamped).
    pub fn l2_normalize_rows(self) -> Result<Val<'t>> {
        const EPS: f64 = 1e-12;
        let (n, d) = self.matrix_dims("l2_normalize_rows")?;
        let xd = self.data();
        let mut out = vec![0.0; n * d];
        let mut denoms = vec![0.0; n];
        for i in 0..n {
            let row = &xd[i * d..(i + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(EPS);
            denoms[i] = norm;
            for j in 0..d {
                out[i * d + j] = row[j] / norm;
            }
        }
        drop(xd);
        self.tape.push(
            vec![n, d],
            out,
            Op::L2NormalizeRows {
                x: self.idx,
                denoms,
            },
            self.needs(),
        )
    }

    /// Batch normalization over rows with learnable scale and shift,
    /// always using the current batch statistics.
    pub fn batch_norm(self, gamma: Val<'t>, beta: Val<'t>, eps: f64) -> Result<Val<'t>> {
        let (n, d) = self.matrix_dims("batch_norm")?;
        self.norm_common(gamma, beta, "batch_norm", d)?;
        let xd = self.data();
        let mut mu = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                mu[j] += xd[i * d + j];
            }
        }
        for m in mu.iter_mut() {
            *m /= n as f64;
        }
        let mut var = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                let c = xd[i * d + j] - mu[j];
                var[j] += c * c;
            }
        }
        let inv_std: Vec<f64> = var
            .iter()
            .map(|v| 1.0 / ((v / n as f64) + eps).sqrt())
            .collect();
        let (gd, bd) = (gamma.data(), beta.data());
        let mut xhat = vec![0.0; n * d];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                let h = (xd[i * d + j] - mu[j]) * inv_std[j];
                xhat[i * d + j] = h;
                out[i * d + j] = gd[j] * h + bd[j];
            }
        }
        drop(xd);
        drop(gd);
        drop(bd);
        self.tape.push(
            vec![n, d],
            out,
            Op::BatchNorm {
                x: self.idx,
                gamma: gamma.idx,
                beta: beta.idx,
                xhat,
                inv_std,
            },
            self.needs() || gamma.needs() || beta.needs(),
        )
    }

    /// Layer normalization across each row with learnable scale and shift.
    pub fn layer_norm(self, gamma: Val<'t>, beta: Val<'t>, eps: f64) -> Result<Val<'t>> {
        let (n, d) = self.matrix_dims("layer_norm")?;
        self.norm_common(gamma, beta, "layer_norm", d)?;
        let xd = self.data();
        let (gd, bd) = (gamma.data(), beta.data());
        let mut xhat = vec![0.0; n * d];
        let mut out = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        for i in 0..n {
            let row = &xd[i * d..(i + 1) * d];
            let mu: f64 = row.iter().sum::<f64>() / d as f64;
            let var: f64 = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..d {
                let h = (row[j] - mu) * inv;
                xhat[i * d + j] = h;
                out[i * d + j] = gd[j] * h + bd[j];
            }
        }
        drop(xd);
        drop(gd);
        drop(bd);
        self.tape.push(
            vec![n, d],
            out,
            Op::LayerNorm {
                x: self.idx,
                gamma: gamma.idx,
                beta: beta.idx,
                xhat,
                inv_std,
            },
            self.needs() || gamma.needs() || beta.needs(),
        )
    }

    fn norm_common(&self, gamma: Val<'t>, beta: Val<'t>, op: &'static str, d: usize) -> Result<()> {
        self.tape.check_same_tape(gamma)?;
        self.tape.check_same_tape(beta)?;
        if gamma.row_len(op)? != d || beta.row_len(op)? != d {
            return Err(KernelError::ShapeMismatch {
                op,
                lhs: vec![d],
                rhs: gamma.shape(),
            });
        }
        Ok(())
    }

    /// Elementwise multiply by a fixed 0/1 (or arbitrary constant) mask.
    pub fn mul_mask(self, mask: &Rc<Vec<f64>>) -> Result<Val<'t>> {
        let numel: usize = self.shape().iter().product();
        if mask.len() != numel {
            return Err(KernelError::ShapeMismatch {
                op: "mul_mask",
                lhs: self.shape(),
                rhs: vec![mask.len()],
            });
        }
        let out: Vec<f64> = self
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(a, b)| a * b)
            .collect();
        self.tape.push(
            self.shape(),
            out,
            Op::MulMask {
                x: self.idx,
                mask: Rc::clone(mask),
            },
            self.needs(),
        )
    }

    /// Re-enter the value as a constant, cutting the gradient path.
    pub fn detach(self) -> Result<Val<'t>> {
        self.tape.constant(self.value())
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m x k] += a[m x n] . b[k x n]^T`
fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let b_row = &b[j * n..(j + 1) * n];
            let dot: f64 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            out[i * k + j] += dot;
        }
    }
}

/// `out[k x n] += a[m x k]^T . g[m x n]`
fn matmul_tn_raw(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
}
