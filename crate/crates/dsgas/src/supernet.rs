//! The K-factor disentangled super-network: per-factor mixed operations over
//! shared candidate weights, wired into the node-level path DAG or the
//! graph-level aggregate/pool/merge DAG.

use std::collections::HashMap;
use std::rc::Rc;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use numkernel::{argmax, KernelError, Param, ReduceMode, Tape, Tensor, Val};

use crate::error::Result;
use crate::graph::Task;
use crate::ops::{
    apply_agg, apply_merge, apply_pool, glorot, AggKind, AggWeights, BatchCtx, LeafCache,
    MergeKind, MergeWeights, PoolKind, PoolWeights, AGG_KINDS, MERGE_KINDS, POOL_KINDS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    Batch,
    Layer,
}

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct NetConfig {
    pub task: Task,
    pub factors: usize,
    pub layers: usize,
    pub dim: usize,
    pub in_features: usize,
    pub norm: NormKind,
}

/// Transient augmentation overrides for one forward pass. The base
/// parameters are never mutated; a clean forward after any augmented one is
/// bit-identical to a clean forward taken before it.
#[derive(Clone)]
pub struct ForwardCtx {
    /// Softmax temperature applied to every operation-logit row.
    pub temperature: f64,
    /// Perturbed replacement values keyed by parameter name.
    pub overrides: Rc<HashMap<String, Tensor>>,
    /// Embedding dropout on every mixed-operation output: `(ratio, seed)`.
    pub embed_dropout: Option<(f64, u64)>,
}

impl ForwardCtx {
    pub fn clean() -> Self {
        ForwardCtx {
            temperature: 1.0,
            overrides: Rc::new(HashMap::new()),
            embed_dropout: None,
        }
    }
}

impl Default for ForwardCtx {
    fn default() -> Self {
        Self::clean()
    }
}

/// Discretized per-factor operation choices (argmax of the logits,
/// ties broken by the lowest operation index).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub agg: Vec<Vec<AggKind>>,
    pub pool: Vec<Vec<PoolKind>>,
    pub merge: Vec<MergeKind>,
}

impl Architecture {
    pub fn num_factors(&self) -> usize {
        self.agg.len()
    }

    pub fn num_layers(&self) -> usize {
        self.agg.first().map_or(0, |f| f.len())
    }
}

pub struct ForwardOutput<'t> {
    /// Per-factor embeddings: `[N, d]` rows for graph tasks, `[n, d]` node
    /// rows for node tasks.
    pub per_factor: Vec<Val<'t>>,
    /// Concatenation over factors: `[N, K*d]`.
    pub z: Val<'t>,
}

struct NormParams {
    gamma: Param,
    beta: Param,
}

pub struct SuperNet {
    pub cfg: NetConfig,
    agg_kinds: Vec<AggKind>,
    pool_kinds: Vec<PoolKind>,
    merge_kinds: Vec<MergeKind>,
    agg_weights: Vec<Vec<AggWeights>>,
    pool_weights: Vec<Vec<PoolWeights>>,
    merge_weights: Vec<MergeWeights>,
    norms: Vec<NormParams>,
    theta_agg: Vec<Param>,
    theta_pool: Vec<Param>,
    theta_merge: Option<Param>,
    /// Factor prototypes, sized `[K, 2d]` to match the concatenated
    /// embedding-plus-encoding similarity space.
    prototypes: Param,
    /// Linear map from flattened per-factor operation choices to `d`.
    enc_map: Param,
}

/// Softmax of one logit row with temperature (the mixed-operation weights).
pub fn mixed_alpha(theta: &[f64], tau: f64) -> Result<Vec<f64>> {
    if tau <= 0.0 {
        return Err(KernelError::NonPositiveTemperature(tau).into());
    }
    let max = theta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = theta.iter().map(|v| ((v - max) / tau).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| e / sum).collect())
}

impl SuperNet {
    pub fn new(cfg: NetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (pool_kinds, merge_kinds) = match cfg.task {
            Task::GraphLevel => (POOL_KINDS.to_vec(), MERGE_KINDS.to_vec()),
            Task::NodeLevel => (Vec::new(), Vec::new()),
        };
        Self::with_pools(cfg, AGG_KINDS.to_vec(), pool_kinds, merge_kinds, rng)
    }

    /// Constructor with an explicit operation pool (ablation studies and
    /// reference-oracle tests use reduced pools).
    pub fn with_pools(
        cfg: NetConfig,
        agg_kinds: Vec<AggKind>,
        pool_kinds: Vec<PoolKind>,
        merge_kinds: Vec<MergeKind>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        assert!(cfg.factors >= 1, "need at least one factor");
        assert!(cfg.layers >= 1, "need at least one layer");
        assert!(!agg_kinds.is_empty(), "empty aggregation pool");
        if cfg.task == Task::GraphLevel {
            assert!(!pool_kinds.is_empty() && !merge_kinds.is_empty());
        }

        let (k, l, d) = (cfg.factors, cfg.layers, cfg.dim);
        let mut agg_weights = Vec::with_capacity(l);
        let mut pool_weights = Vec::with_capacity(l);
        let mut norms = Vec::with_capacity(l);
        for layer in 0..l {
            let d_in = if layer == 0 { cfg.in_features } else { d };
            agg_weights.push(
                agg_kinds
                    .iter()
                    .map(|&kind| AggWeights::new(kind, &format!("layer{layer}"), d_in, d, rng))
                    .collect::<Vec<_>>(),
            );
            if cfg.task == Task::GraphLevel {
                pool_weights.push(
                    pool_kinds
                        .iter()
                        .map(|&kind| PoolWeights::new(kind, &format!("layer{layer}"), d, rng))
                        .collect::<Vec<_>>(),
                );
            }
            norms.push(NormParams {
                gamma: Param::new(format!("norm{layer}.gamma"), Tensor::ones(vec![1, d])),
                beta: Param::new(format!("norm{layer}.beta"), Tensor::zeros(vec![1, d])),
            });
        }
        let merge_weights = if cfg.task == Task::GraphLevel {
            merge_kinds
                .iter()
                .map(|&kind| MergeWeights::new(kind, "merge", l, d, rng))
                .collect()
        } else {
            Vec::new()
        };

        // logits start near-uniform with small random noise so the K factor
        // paths are not exactly symmetric at initialization
        let mut theta = |name: String, cols: usize| -> Param {
            let data: Vec<f64> = (0..k * cols)
                .map(|_| {
                    use rand::Rng;
                    1e-3 * rng.random_range(-1.0..1.0)
                })
                .collect();
            Param::new(name, Tensor::matrix(k, cols, data).expect("shape"))
        };
        let theta_agg: Vec<Param> = (0..l)
            .map(|layer| theta(format!("theta.agg{layer}"), agg_kinds.len()))
            .collect();
        let theta_pool: Vec<Param> = if cfg.task == Task::GraphLevel {
            (0..l)
                .map(|layer| theta(format!("theta.pool{layer}"), pool_kinds.len()))
                .collect()
        } else {
            Vec::new()
        };
        let theta_merge = if cfg.task == Task::GraphLevel {
            Some(theta("theta.merge".to_string(), merge_kinds.len()))
        } else {
            None
        };

        let flat = Self::flat_alpha_dim_for(
            cfg.task,
            l,
            agg_kinds.len(),
            pool_kinds.len(),
            merge_kinds.len(),
        );
        let enc_map = glorot("enc.map", flat, d, rng);
        let prototypes = glorot("prototypes", k, 2 * d, rng);

        Ok(SuperNet {
            cfg,
            agg_kinds,
            pool_kinds,
            merge_kinds,
            agg_weights,
            pool_weights,
            merge_weights,
            norms,
            theta_agg,
            theta_pool,
            theta_merge,
            prototypes,
            enc_map,
        })
    }

    fn flat_alpha_dim_for(
        task: Task,
        layers: usize,
        aggs: usize,
        pools: usize,
        merges: usize,
    ) -> usize {
        match task {
            Task::GraphLevel => layers * aggs + layers * pools + merges,
            Task::NodeLevel => layers * aggs,
        }
    }

    pub fn flat_alpha_dim(&self) -> usize {
        Self::flat_alpha_dim_for(
            self.cfg.task,
            self.cfg.layers,
            self.agg_kinds.len(),
            self.pool_kinds.len(),
            self.merge_kinds.len(),
        )
    }

    pub fn agg_kinds(&self) -> &[AggKind] {
        &self.agg_kinds
    }

    pub fn pool_kinds(&self) -> &[PoolKind] {
        &self.pool_kinds
    }

    pub fn merge_kinds(&self) -> &[MergeKind] {
        &self.merge_kinds
    }

    pub fn prototypes(&self) -> &Param {
        &self.prototypes
    }

    pub fn enc_map(&self) -> &Param {
        &self.enc_map
    }

    /// Full forward pass for one batch under an augmentation context.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        ctx: &BatchCtx,
        aug: &ForwardCtx,
    ) -> Result<ForwardOutput<'t>> {
        let mut leafs = LeafCache::new(tape, Rc::clone(&aug.overrides));
        let mut dropout = DropoutState::new(aug.embed_dropout);

        let x = tape.constant(ctx.features.clone())?;
        let alphas_agg: Vec<Val<'t>> = self
            .theta_agg
            .iter()
            .map(|t| Ok(leafs.leaf(t)?.softmax_rows(aug.temperature)?))
            .collect::<Result<_>>()?;
        let alphas_pool: Vec<Val<'t>> = self
            .theta_pool
            .iter()
            .map(|t| Ok(leafs.leaf(t)?.softmax_rows(aug.temperature)?))
            .collect::<Result<_>>()?;
        let alpha_merge: Option<Val<'t>> = match &self.theta_merge {
            Some(t) => Some(leafs.leaf(t)?.softmax_rows(aug.temperature)?),
            None => None,
        };

        let mut per_factor = Vec::with_capacity(self.cfg.factors);
        for k in 0..self.cfg.factors {
            let mut h = x;
            let mut pooled = Vec::with_capacity(self.cfg.layers);
            for layer in 0..self.cfg.layers {
                let alpha = alphas_agg[layer].row_slice(k)?;
                let outs: Vec<Val<'t>> = self.agg_weights[layer]
                    .iter()
                    .map(|w| apply_agg(w, tape, &mut leafs, h, ctx))
                    .collect::<Result<_>>()?;
                let mixed = tape.weighted_sum(&outs, alpha)?;
                let mixed = dropout.apply(tape, mixed)?;
                let act = mixed.relu()?;
                h = self.apply_norm(layer, act, &mut leafs)?;

                if self.cfg.task == Task::GraphLevel {
                    let ap = alphas_pool[layer].row_slice(k)?;
                    let pouts: Vec<Val<'t>> = self.pool_weights[layer]
                        .iter()
                        .map(|w| apply_pool(w, tape, &mut leafs, h, ctx))
                        .collect::<Result<_>>()?;
                    let pz = tape.weighted_sum(&pouts, ap)?;
                    pooled.push(dropout.apply(tape, pz)?);
                }
            }
            let z_k = match self.cfg.task {
                Task::NodeLevel => h,
                Task::GraphLevel => {
                    let am = alpha_merge.expect("graph task has a merge slot").row_slice(k)?;
                    let mouts: Vec<Val<'t>> = self
                        .merge_weights
                        .iter()
                        .map(|w| apply_merge(w, tape, &mut leafs, &pooled))
                        .collect::<Result<_>>()?;
                    let mz = tape.weighted_sum(&mouts, am)?;
                    dropout.apply(tape, mz)?
                }
            };
            per_factor.push(z_k);
        }

        let z = tape.concat_cols(&per_factor)?;
        Ok(ForwardOutput { per_factor, z })
    }

    fn apply_norm<'t>(
        &self,
        layer: usize,
        x: Val<'t>,
        leafs: &mut LeafCache<'t>,
    ) -> Result<Val<'t>> {
        let gamma = leafs.leaf(&self.norms[layer].gamma)?;
        let beta = leafs.leaf(&self.norms[layer].beta)?;
        Ok(match self.cfg.norm {
            NormKind::Batch => x.batch_norm(gamma, beta, NORM_EPS)?,
            NormKind::Layer => x.layer_norm(gamma, beta, NORM_EPS)?,
        })
    }

    /// Per-factor architecture encodings: each factor's operation-choice
    /// distributions across every slot, flattened and linearly mapped to
    /// `d`. Returns a `[K, d]` value.
    pub fn encode_arch<'t>(&self, tape: &'t Tape, leafs: &mut LeafCache<'t>) -> Result<Val<'t>> {
        let mut pieces: Vec<Val<'t>> = Vec::new();
        for t in &self.theta_agg {
            pieces.push(leafs.leaf(t)?.softmax_rows(1.0)?);
        }
        for t in &self.theta_pool {
            pieces.push(leafs.leaf(t)?.softmax_rows(1.0)?);
        }
        if let Some(t) = &self.theta_merge {
            pieces.push(leafs.leaf(t)?.softmax_rows(1.0)?);
        }
        let flat = tape.concat_cols(&pieces)?;
        Ok(flat.matmul(leafs.leaf(&self.enc_map)?)?)
    }

    /// Per-factor graph-level embeddings for the factor posterior: the
    /// forward outputs directly for graph tasks, mean-pooled over nodes for
    /// node tasks.
    pub fn per_factor_graph_embeddings<'t>(
        &self,
        tape: &'t Tape,
        ctx: &BatchCtx,
        out: &ForwardOutput<'t>,
    ) -> Result<Vec<Val<'t>>> {
        match self.cfg.task {
            Task::GraphLevel => Ok(out.per_factor.clone()),
            Task::NodeLevel => out
                .per_factor
                .iter()
                .map(|z| {
                    Ok(tape.segment_reduce(*z, &ctx.segments, ctx.num_graphs, ReduceMode::Mean)?)
                })
                .collect(),
        }
    }

    /// Argmax discretization of the operation logits.
    pub fn discretize(&self) -> Architecture {
        let k = self.cfg.factors;
        let pick = |theta: &Param, len: usize, factor: usize| -> usize {
            let t = theta.tensor();
            argmax(&t.data()[factor * len..(factor + 1) * len])
        };
        let agg = (0..k)
            .map(|f| {
                self.theta_agg
                    .iter()
                    .map(|t| self.agg_kinds[pick(t, self.agg_kinds.len(), f)])
                    .collect()
            })
            .collect();
        let pool = (0..k)
            .map(|f| {
                self.theta_pool
                    .iter()
                    .map(|t| self.pool_kinds[pick(t, self.pool_kinds.len(), f)])
                    .collect()
            })
            .collect();
        let merge = match &self.theta_merge {
            Some(t) => (0..k)
                .map(|f| self.merge_kinds[pick(t, self.merge_kinds.len(), f)])
                .collect(),
            None => Vec::new(),
        };
        Architecture { agg, pool, merge }
    }

    /// Shared operation/normalization parameters on the embedding path
    /// (the target of transient weight perturbation).
    pub fn forward_path_params(&self) -> Vec<Param> {
        let mut params = Vec::new();
        for layer in &self.agg_weights {
            for w in layer {
                params.extend(w.params());
            }
        }
        for layer in &self.pool_weights {
            for w in layer {
                params.extend(w.params());
            }
        }
        for w in &self.merge_weights {
            params.extend(w.params());
        }
        for n in &self.norms {
            params.push(n.gamma.clone());
            params.push(n.beta.clone());
        }
        params
    }

    /// Everything trained by the weight step: forward-path parameters plus
    /// the architecture-encoding map and the factor prototypes.
    pub fn weight_params(&self) -> Vec<Param> {
        let mut params = self.forward_path_params();
        params.push(self.enc_map.clone());
        params.push(self.prototypes.clone());
        params
    }

    /// Operation logits, trained by the architecture step.
    pub fn theta_params(&self) -> Vec<Param> {
        let mut params = self.theta_agg.clone();
        params.extend(self.theta_pool.clone());
        if let Some(t) = &self.theta_merge {
            params.push(t.clone());
        }
        params
    }

    pub fn all_params(&self) -> Vec<Param> {
        let mut params = self.weight_params();
        params.extend(self.theta_params());
        params
    }

    /// Learnable weight count excluding the operation logits and the factor
    /// prototypes; identical across K by weight sharing.
    pub fn shared_weight_count(&self) -> usize {
        self.forward_path_params()
            .iter()
            .map(|p| p.numel())
            .sum::<usize>()
            + self.enc_map.numel()
    }
}

/// Lazily materialized exact-count dropout masks for mixed-operation
/// outputs, deterministic per (ratio, seed) and traversal order.
struct DropoutState {
    rng: Option<(f64, ChaCha8Rng)>,
}

impl DropoutState {
    fn new(spec: Option<(f64, u64)>) -> Self {
        DropoutState {
            rng: spec.map(|(ratio, seed)| (ratio, ChaCha8Rng::seed_from_u64(seed))),
        }
    }

    fn apply<'t>(&mut self, _tape: &'t Tape, v: Val<'t>) -> Result<Val<'t>> {
        let Some((ratio, rng)) = &mut self.rng else {
            return Ok(v);
        };
        let numel: usize = v.shape().iter().product();
        let drop = ((*ratio) * numel as f64).round() as usize;
        if drop == 0 {
            return Ok(v);
        }
        let mut mask = vec![1.0; numel];
        // partial Fisher-Yates over the index range
        let mut indices: Vec<usize> = (0..numel).collect();
        for i in 0..drop {
            use rand::Rng;
            let j = rng.random_range(i..numel);
            indices.swap(i, j);
            mask[indices[i]] = 0.0;
        }
        Ok(v.mul_mask(&Rc::new(mask))?)
    }
}
