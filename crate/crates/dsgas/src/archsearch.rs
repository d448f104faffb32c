//! Contrastive architecture search: transient architecture augmentations,
//! the per-graph architecture discrimination probabilities, and the search
//! loss over the operation logits.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use numkernel::{Tape, Tensor, Val};

use crate::disentangle::similarity_scale;
use crate::error::{Error, Result};
use crate::supernet::{ForwardCtx, SuperNet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugKind {
    /// Resample the operation-choice softmax temperature.
    Alpha,
    /// Add Gaussian noise to a fraction of the shared weights.
    Weight,
    /// Drop a fraction of mixed-operation output entries.
    Embed,
    /// Pick one of the three uniformly.
    Compose,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ArchAugSpec {
    pub kind: AugKind,
    /// Temperature range bound; tau is drawn from `U[1/r1, r1]`.
    pub r1: f64,
    /// Fraction of weight entries perturbed.
    pub r2: f64,
    /// Fraction of mixed-operation output entries dropped.
    pub r3: f64,
}

impl ArchAugSpec {
    pub fn validate(&self) -> Result<()> {
        if self.r1 < 1.0 {
            return Err(Error::BadAugRatio(self.r1));
        }
        if !(0.0..1.0).contains(&self.r2) || !(0.0..1.0).contains(&self.r3) {
            return Err(Error::Invalid(format!(
                "r2/r3 must lie in [0, 1), got {}/{}",
                self.r2, self.r3
            )));
        }
        Ok(())
    }
}

/// Which negatives the discrimination softmax normalizes over: the K
/// augmented architecture views of the same graph (the default reading), or
/// the same architecture's augmented views across the batch graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSet {
    Factors,
    Graphs,
}

/// Sample a transient augmentation context. Base super-network parameters
/// are never mutated; all perturbations live in the returned [`ForwardCtx`].
pub fn augment_architecture(
    net: &SuperNet,
    spec: &ArchAugSpec,
    rng: &mut ChaCha8Rng,
) -> Result<ForwardCtx> {
    spec.validate()?;
    let kind = match spec.kind {
        AugKind::Compose => match rng.random_range(0..3u8) {
            0 => AugKind::Alpha,
            1 => AugKind::Weight,
            _ => AugKind::Embed,
        },
        k => k,
    };
    let mut ctx = ForwardCtx::clean();
    match kind {
        AugKind::Alpha => {
            ctx.temperature = rng.random_range(1.0 / spec.r1..=spec.r1);
        }
        AugKind::Weight => {
            let mut overrides = HashMap::new();
            for p in net.forward_path_params() {
                let t = p.value();
                let data = t.data();
                let n = data.len();
                let perturb = ((spec.r2 * n as f64).round() as usize).min(n);
                if perturb == 0 {
                    continue;
                }
                let mean = data.iter().sum::<f64>() / n as f64;
                let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let sigma = var.sqrt();
                if sigma == 0.0 {
                    continue;
                }
                let normal = Normal::new(0.0, sigma).expect("sigma > 0");
                let mut new_data = data.to_vec();
                let mut indices: Vec<usize> = (0..n).collect();
                for i in 0..perturb {
                    let j = rng.random_range(i..n);
                    indices.swap(i, j);
                    new_data[indices[i]] += normal.sample(rng);
                }
                let tensor = Tensor::new(t.shape().to_vec(), new_data)
                    .map_err(numkernel::KernelError::from)?;
                overrides.insert(p.name().to_string(), tensor);
            }
            ctx.overrides = Rc::new(overrides);
        }
        AugKind::Embed => {
            ctx.embed_dropout = Some((spec.r3, rng.random()));
        }
        AugKind::Compose => unreachable!("resolved above"),
    }
    Ok(ctx)
}

/// Architecture-level instance discrimination probabilities.
///
/// For each graph `i` and factor `k`, the clean embedding `z_{i,k}` is
/// scored against candidate augmented views by scaled dot product and
/// softmax-normalized; entry `[i, k]` is the probability assigned to the
/// architecture's own augmented view (its surrogate label). With
/// [`NegativeSet::Factors`] the candidates are the K augmented views of
/// graph `i`; with [`NegativeSet::Graphs`] they are architecture `k`'s
/// augmented views across the batch.
pub fn arch_discrimination_probs<'t>(
    tape: &'t Tape,
    clean: &[Val<'t>],
    augmented: &[Val<'t>],
    negatives: NegativeSet,
) -> Result<Val<'t>> {
    let k = clean.len();
    if k == 0 || augmented.len() != k {
        return Err(Error::Invalid(format!(
            "clean/augmented factor counts disagree: {k} vs {}",
            augmented.len()
        )));
    }
    let shape = clean[0].shape();
    for v in clean.iter().chain(augmented.iter()) {
        if v.shape() != shape {
            return Err(Error::Invalid(format!(
                "embedding shape mismatch: {:?} vs {shape:?}",
                v.shape()
            )));
        }
    }
    let (n, d) = (shape[0], shape[1]);
    let scale = similarity_scale(d);

    let mut columns = Vec::with_capacity(k);
    match negatives {
        NegativeSet::Factors => {
            for anchor in 0..k {
                let mut sims = Vec::with_capacity(k);
                for aug in augmented {
                    sims.push(clean[anchor].row_dots(*aug)?.scale(scale)?);
                }
                let logits = tape.concat_cols(&sims)?; // [N, K]
                let probs = logits.softmax_rows(1.0)?;
                columns.push(probs.col_slice(anchor)?);
            }
        }
        NegativeSet::Graphs => {
            if n < 2 {
                return Err(Error::BatchTooSmall(n));
            }
            for anchor in 0..k {
                let sims = clean[anchor]
                    .matmul(augmented[anchor].transpose()?)?
                    .scale(scale)?; // [N, N]
                let probs = sims.softmax_rows(1.0)?;
                columns.push(probs.diag()?);
            }
        }
    }
    Ok(tape.concat_cols(&columns)?)
}

/// `L_alpha = sum_i -log( 1/K * sum_k probs[i, k] )`, floored at 1e-12
/// before the log. Zero exactly when every probability is 1.
pub fn contrastive_search_loss<'t>(probs: Val<'t>) -> Result<Val<'t>> {
    let shape = probs.shape();
    let k = shape[1];
    let mean = probs.row_sums()?.scale(1.0 / k as f64)?;
    Ok(mean.clamp_min(1e-12)?.ln()?.sum()?.scale(-1.0)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(tape: &Tape, data: Vec<f64>, n: usize, d: usize) -> Val<'_> {
        tape.constant(Tensor::matrix(n, d, data).unwrap()).unwrap()
    }

    #[test]
    fn single_factor_probs_are_one() {
        let tape = Tape::new();
        let z = col(&tape, vec![0.5, -0.1, 0.2, 0.9], 2, 2);
        let za = col(&tape, vec![0.1, 0.3, -0.4, 0.6], 2, 2);
        let p = arch_discrimination_probs(&tape, &[z], &[za], NegativeSet::Factors).unwrap();
        assert_eq!(p.value().data(), &[1.0, 1.0]);
    }

    #[test]
    fn equal_similarities_give_uniform_probs() {
        let tape = Tape::new();
        // all-zero embeddings: every pairwise similarity is 0
        let z0 = col(&tape, vec![0.0; 4], 2, 2);
        let z1 = col(&tape, vec![0.0; 4], 2, 2);
        let a0 = col(&tape, vec![0.0; 4], 2, 2);
        let a1 = col(&tape, vec![0.0; 4], 2, 2);
        let p = arch_discrimination_probs(&tape, &[z0, z1], &[a0, a1], NegativeSet::Factors)
            .unwrap()
            .value();
        for v in p.data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn probs_match_scalar_oracle_n2_k2_d2() {
        let z: [[[f64; 2]; 2]; 2] = [
            [[0.8, -0.2], [0.1, 0.5]],
            [[-0.3, 0.7], [0.9, -0.6]],
        ];
        let za: [[[f64; 2]; 2]; 2] = [
            [[0.4, 0.1], [-0.2, 0.3]],
            [[0.6, -0.5], [0.2, 0.8]],
        ];
        let scale = 1.0 / 2.0_f64.sqrt();
        let dot = |a: &[f64; 2], b: &[f64; 2]| a[0] * b[0] + a[1] * b[1];

        // oracle: probs[i][anchor] = softmax over candidates of
        // phi(z[anchor][i], za[cand][i]) evaluated at cand = anchor
        let mut expected = [[0.0f64; 2]; 2];
        for i in 0..2 {
            for anchor in 0..2 {
                let logits: Vec<f64> = (0..2)
                    .map(|cand| scale * dot(&z[anchor][i], &za[cand][i]))
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
                let sum: f64 = exps.iter().sum();
                expected[i][anchor] = exps[anchor] / sum;
            }
        }

        let tape = Tape::new();
        let z0 = col(&tape, vec![0.8, -0.2, 0.1, 0.5], 2, 2);
        let z1 = col(&tape, vec![-0.3, 0.7, 0.9, -0.6], 2, 2);
        let a0 = col(&tape, vec![0.4, 0.1, -0.2, 0.3], 2, 2);
        let a1 = col(&tape, vec![0.6, -0.5, 0.2, 0.8], 2, 2);
        let p = arch_discrimination_probs(&tape, &[z0, z1], &[a0, a1], NegativeSet::Factors)
            .unwrap()
            .value();
        for i in 0..2 {
            for k in 0..2 {
                assert!(
                    (p.data()[i * 2 + k] - expected[i][k]).abs() < 1e-9,
                    "entry ({i},{k})"
                );
            }
        }
    }

    #[test]
    fn search_loss_closed_forms() {
        let tape = Tape::new();
        // all probabilities 1 -> zero loss
        let perfect = col(&tape, vec![1.0; 4], 2, 2);
        let l = contrastive_search_loss(perfect).unwrap();
        assert!(l.scalar_value().abs() < 1e-12);

        // uniform probabilities 1/K -> N log K
        let uniform = col(&tape, vec![0.5; 4], 2, 2);
        let l = contrastive_search_loss(uniform).unwrap();
        assert!((l.scalar_value() - 2.0 * 2.0_f64.ln()).abs() < 1e-12);

        // row [0.9, 0.9] -> -log(0.9) per graph
        let high = col(&tape, vec![0.9, 0.9], 1, 2);
        let l = contrastive_search_loss(high).unwrap();
        assert!((l.scalar_value() + 0.9_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn search_loss_matches_scalar_oracle_on_random_probs() {
        let probs = [0.3, 0.9, 0.45, 0.8, 0.2, 0.6];
        let expected: f64 = (0..3)
            .map(|i| -(0.5 * (probs[i * 2] + probs[i * 2 + 1])).ln())
            .sum();
        let tape = Tape::new();
        let p = col(&tape, probs.to_vec(), 3, 2);
        let l = contrastive_search_loss(p).unwrap();
        assert!((l.scalar_value() - expected).abs() < 1e-12);
    }

    #[test]
    fn search_loss_is_nonnegative() {
        let tape = Tape::new();
        let p = col(&tape, vec![0.05, 0.6, 0.99, 0.3], 2, 2);
        let l = contrastive_search_loss(p).unwrap();
        assert!(l.scalar_value() >= 0.0);
    }

    #[test]
    fn rejects_bad_r1() {
        let spec = ArchAugSpec {
            kind: AugKind::Alpha,
            r1: 0.5,
            r2: 0.1,
            r3: 0.05,
        };
        assert!(matches!(spec.validate(), Err(Error::BadAugRatio(_))));
    }
}
