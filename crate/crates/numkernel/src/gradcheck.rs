use crate::{Param, Result};

/// Central-difference gradient check.
///
/// `run(true)` must build a fresh tape, compute the (deterministic) scalar
/// loss, call backward, and return the loss value; `run(false)` must compute
/// the same loss without touching gradients. The function perturbs each
/// parameter coordinate by `+/- eps`, compares the two-sided difference
/// quotient against the analytic gradient left by `run(true)`, and returns
/// the worst relative error
/// `|analytic - fd| / (|analytic| + 1e-8)` over all coordinates.
pub fn finite_diff_check<F>(mut run: F, params: &[Param], eps: f64) -> Result<f64>
where
    F: FnMut(bool) -> Result<f64>,
{
    for p in params {
        p.zero_grad();
    }
    run(true)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut max_rel = 0.0f64;
    for (p, grad) in params.iter().zip(&analytic) {
        let base = p.value().data().to_vec();
        for i in 0..base.len() {
            let mut bumped = base.clone();
            bumped[i] = base[i] + eps;
            p.set_data(&bumped);
            let f_plus = run(false)?;
            bumped[i] = base[i] - eps;
            p.set_data(&bumped);
            let f_minus = run(false)?;
            p.set_data(&base);

            let fd = (f_plus - f_minus) / (2.0 * eps);
            let rel = (grad[i] - fd).abs() / (grad[i].abs() + 1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
