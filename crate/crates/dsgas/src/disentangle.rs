//! Architecture-aware factor inference and the factor-routed training loss:
//! graphs are soft-assigned to latent factors by comparing per-factor
//! embeddings (concatenated with architecture encodings) against learnable
//! factor prototypes, and per-factor pretext losses are mixed under that
//! posterior.

use numkernel::{Tape, Val};

use crate::error::{Error, Result};

/// Scaled-dot-product similarity scale for a given embedding width.
pub fn similarity_scale(dim: usize) -> f64 {
    1.0 / (dim as f64).sqrt()
}

/// Factor posterior `p(k | G_i)`: for each architecture `j`, concatenate the
/// per-factor graph embeddings `z_{i,j}` with that architecture's encoding,
/// score against every prototype `c_k` by scaled dot product, softmax over
/// `k`, and average over architectures under a uniform prior. Returns a
/// `[N, K]` matrix whose rows sum to 1.
pub fn infer_factor_probs<'t>(
    tape: &'t Tape,
    per_factor_z: &[Val<'t>],
    arch_enc: Val<'t>,
    prototypes: Val<'t>,
    detach_z: bool,
) -> Result<Val<'t>> {
    let k = per_factor_z.len();
    assert!(k >= 1, "at least one factor");
    let n = per_factor_z[0].shape()[0];
    let d = per_factor_z[0].shape()[1];
    let proto_shape = prototypes.shape();
    if proto_shape != vec![k, 2 * d] {
        return Err(Error::Invalid(format!(
            "prototypes must be [K, 2d] = [{k}, {}], got {proto_shape:?}",
            2 * d
        )));
    }
    if arch_enc.shape() != vec![k, d] {
        return Err(Error::Invalid(format!(
            "architecture encodings must be [K, d] = [{k}, {d}], got {:?}",
            arch_enc.shape()
        )));
    }

    let scale = similarity_scale(2 * d);
    let proto_t = prototypes.transpose()?;
    let mut acc: Option<Val<'t>> = None;
    for (j, z) in per_factor_z.iter().enumerate() {
        let z_j = if detach_z { z.detach()? } else { *z };
        let enc_row = arch_enc.row_slice(j)?;
        let enc_broadcast = tape.zeros(n, d)?.add_rowvec(enc_row)?;
        let joint = tape.concat_cols(&[z_j, enc_broadcast])?;
        let logits = joint.matmul(proto_t)?.scale(scale)?;
        let probs_j = logits.softmax_rows(1.0)?;
        acc = Some(match acc {
            Some(a) => a.add(probs_j)?,
            None => probs_j,
        });
    }
    Ok(acc.expect("k >= 1").scale(1.0 / k as f64)?)
}

/// `L_w`: posterior-weighted mean of the per-factor pretext losses,
/// `1/N * sum_i sum_k p(k|G_i) * l(f_{alpha_k, w}, G_i)`.
///
/// Gradients reach the super-network weights through the losses and the
/// prototypes/encodings through the posterior. Fails fast on non-finite
/// loss entries.
pub fn factor_weighted_loss<'t>(posterior: Val<'t>, losses: Val<'t>) -> Result<Val<'t>> {
    let shape = posterior.shape();
    if losses.shape() != shape {
        return Err(Error::Invalid(format!(
            "posterior {shape:?} and losses {:?} must agree",
            losses.shape()
        )));
    }
    if !losses.value().is_finite() {
        return Err(Error::Invalid(
            "non-finite entry in per-factor pretext losses".into(),
        ));
    }
    let n = shape[0];
    Ok(posterior.mul(losses)?.sum()?.scale(1.0 / n as f64)?)
}
