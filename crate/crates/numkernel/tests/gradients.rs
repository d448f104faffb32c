//! Backward-pass verification: every primitive against central finite
//! differences, the spec'd closed-form cases, and a randomized composite
//! property over many seeds.

mod common;

use std::rc::Rc;

use common::{random_vec, rng};
use numkernel::{
    finite_diff_check, KernelError, Param, ReduceMode, Result, SparseAdj, Tape, Tensor, Val,
};
use rand::Rng;

/// Run `finite_diff_check` for a loss builder over the given params.
fn fd<F>(params: &[Param], eps: f64, build: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Val<'t>]) -> Result<Val<'t>>,
{
    let run = |with_grad: bool| -> Result<f64> {
        let tape = Tape::new();
        let leafs: Vec<Val<'_>> = params
            .iter()
            .map(|p| tape.leaf(p))
            .collect::<Result<_>>()?;
        let loss = build(&tape, &leafs)?;
        let v = loss.scalar_value();
        if with_grad {
            tape.backward(loss)?;
        }
        Ok(v)
    };
    finite_diff_check(run, params, eps).expect("finite_diff_check failed")
}

fn param(name: &str, rows: usize, cols: usize, seed: u64) -> Param {
    let mut r = rng(seed);
    Param::new(
        name,
        Tensor::matrix(rows, cols, random_vec(&mut r, rows * cols)).unwrap(),
    )
}

#[test]
fn backward_of_sum_is_ones() {
    let p = param("x", 2, 3, 1);
    let tape = Tape::new();
    let x = tape.leaf(&p).unwrap();
    let loss = x.sum().unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(p.grad().unwrap(), vec![1.0; 6]);
}

#[test]
fn backward_of_half_square_sum_is_x() {
    let p = param("x", 2, 2, 2);
    let tape = Tape::new();
    let x = tape.leaf(&p).unwrap();
    let loss = x.mul(x).unwrap().sum().unwrap().scale(0.5).unwrap();
    tape.backward(loss).unwrap();
    common::assert_close(&p.grad().unwrap(), p.value().data(), 1e-15, "d(x^2/2)");
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let p = param("x", 2, 2, 3);
    let tape = Tape::new();
    let x = tape.leaf(&p).unwrap();
    assert!(matches!(
        tape.backward(x),
        Err(KernelError::NonScalarLoss(_))
    ));
}

#[test]
fn backward_frees_the_tape() {
    let p = param("x", 1, 2, 4);
    let tape = Tape::new();
    let x = tape.leaf(&p).unwrap();
    let loss = x.sum().unwrap();
    tape.backward(loss).unwrap();
    assert!(matches!(tape.leaf(&p), Err(KernelError::TapeConsumed)));
    assert!(tape.is_empty());
}

#[test]
fn gradients_accumulate_across_backward_calls() {
    let p = param("x", 1, 3, 5);
    for _ in 0..2 {
        let tape = Tape::new();
        let x = tape.leaf(&p).unwrap();
        let loss = x.sum().unwrap();
        tape.backward(loss).unwrap();
    }
    assert_eq!(p.grad().unwrap(), vec![2.0; 3]);
}

#[test]
fn composite_spmm_softmax_matmul_matches_fd() {
    let adj = Rc::new(SparseAdj::new(5, vec![(0, 1), (1, 2), (2, 0), (3, 4), (4, 3), (1, 0)]).unwrap());
    let w = param("w", 3, 3, 6);
    let x = param("x", 5, 3, 7);
    let err = fd(&[w, x], 1e-5, |tape, leafs| {
        let h = tape.spmm(&adj, leafs[1])?;
        let s = h.softmax_rows(1.0)?;
        let y = s.matmul(leafs[0])?;
        y.sum()
    });
    assert!(err < 1e-4, "composite rel err {err}");
}

#[test]
fn finite_diff_linear_function_is_exact() {
    let p = param("x", 1, 4, 8);
    let err = fd(&[p], 1e-5, |_tape, leafs| {
        leafs[0].scale(3.0)?.add_const(1.0)?.sum()
    });
    assert!(err < 1e-9, "linear fd err {err}");
}

#[test]
fn finite_diff_softmax_cross_entropy_matches_closed_form() {
    let p = param("logits", 1, 4, 9);
    // analytic gradient of -log softmax(x)[t] is softmax(x) - onehot(t)
    let target = 2;
    let tape = Tape::new();
    let x = tape.leaf(&p).unwrap();
    let probs = x.softmax_rows(1.0).unwrap();
    let picked = probs.col_slice(target).unwrap();
    let loss = picked.ln().unwrap().scale(-1.0).unwrap().sum().unwrap();
    tape.backward(loss).unwrap();

    let sm = {
        let d = p.value();
        let max = d.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = d.data().iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.iter().map(|e| e / sum).collect::<Vec<_>>()
    };
    let closed: Vec<f64> = sm
        .iter()
        .enumerate()
        .map(|(i, s)| if i == target { s - 1.0 } else { *s })
        .collect();
    common::assert_close(&p.grad().unwrap(), &closed, 1e-12, "ce closed form");

    let err = fd(&[p], 1e-5, |_tape, leafs| {
        let probs = leafs[0].softmax_rows(1.0)?;
        probs.col_slice(target)?.ln()?.scale(-1.0)?.sum()
    });
    assert!(err < 1e-5, "softmax-ce fd err {err}");
}

// ---------------------------------------------------------------------------
// per-primitive finite-difference checks
// ---------------------------------------------------------------------------

#[test]
fn fd_matmul_and_transpose() {
    let a = param("a", 3, 4, 10);
    let b = param("b", 4, 2, 11);
    let err = fd(&[a, b], 1e-5, |_t, l| {
        l[0].matmul(l[1])?.transpose()?.sum()
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn fd_spmm_weighted() {
    let edges = Rc::new(
        numkernel::EdgeEndpoints::new(4, vec![0, 1, 2, 3, 1], vec![1, 2, 3, 0, 0]).unwrap(),
    );
    let w = param("w", 5, 1, 12);
    let x = param("x", 4, 3, 13);
    let err = fd(&[w, x], 1e-5, |tape, l| {
        tape.spmm_weighted(&edges, l[0], l[1])?.mul(
            tape.spmm_weighted(&edges, l[0], l[1])?,
        )?.sum()
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn fd_softmax_rows_with_temperature() {
    let x = param("x", 3, 5, 14);
    for temp in [0.3, 1.0, 2.5] {
        let err = fd(std::slice::from_ref(&x), 1e-5, |_t, l| {
            let s = l[0].softmax_rows(temp)?;
            s.mul(s)?.sum()
        });
        assert!(err < 1e-5, "temp {temp}: {err}");
    }
}

#[test]
fn fd_segment_reduce_all_modes() {
    let seg = Rc::new(vec![0, 0, 1, 1, 1]);
    for mode in [ReduceMode::Sum, ReduceMode::Mean, ReduceMode::Max] {
        let x = param("x", 5, 3, 15);
        let err = fd(&[x], 1e-5, |tape, l| {
            let r = tape.segment_reduce(l[0], &seg, 2, mode)?;
            r.mul(r)?.sum()
        });
        assert!(err < 1e-5, "{mode:?}: {err}");
    }
}

#[test]
fn segment_max_backward_routes_to_first_on_ties() {
    let p = Param::new(
        "x",
        Tensor::matrix(3, 1, vec![2.0, 2.0, 1.0]).unwrap(),
    );
    let seg = Rc::new(vec![0, 0, 0]);
    let tape = Tape::new();
    let x = tape.leaf(&p).unwrap();
    let m = tape.segment_reduce(x, &seg, 1, ReduceMode::Max).unwrap();
    tape.backward(m.sum().unwrap()).unwrap();
    assert_eq!(p.grad().unwrap(), vec![1.0, 0.0, 0.0]);
}

#[test]
fn fd_segment_softmax() {
    let groups = Rc::new(vec![0, 1, 0, 1, 0]);
    let x = param("x", 5, 1, 16);
    let err = fd(&[x], 1e-5, |tape, l| {
        let s = tape.segment_softmax(l[0], &groups, 2)?;
        s.mul(s)?.sum()
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn fd_elementwise_family() {
    let a = param("a", 2, 3, 17);
    let b = param("b", 2, 3, 18);
    let err = fd(&[a, b], 1e-5, |_t, l| {
        let s = l[0].add(l[1])?;
        let d = l[0].sub(l[1])?;
        let m = l[0].mul(l[1])?;
        let mx = l[0].maximum(l[1])?;
        s.add(d)?.add(m)?.add(mx)?.scale(0.5)?.add_const(1.0)?.sum()
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn fd_broadcast_family() {
    let x = param("x", 4, 3, 19);
    let v = param("v", 1, 3, 20);
    let c = param("c", 4, 1, 21);
    let s = param("s", 1, 1, 22);
    let err = fd(&[x, v, c, s], 1e-5, |_t, l| {
        let y = l[0].add_rowvec(l[1])?;
        let z = y.scale_rows(l[2])?;
        z.scale_by_scalar(l[3])?.sum()
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn fd_weighted_sum() {
    let a = param("a", 3, 2, 23);
    let b = param("b", 3, 2, 24);
    let w = param("w", 1, 2, 25);
    let err = fd(&[a, b, w], 1e-5, |tape, l| {
        let wvec = l[2].row_slice(0)?;
        let ws = tape.weighted_sum(&[l[0], l[1]], wvec)?;
        ws.mul(ws)?.sum()
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn fd_nonlinearities() {
    let x = param("x", 3, 3, 26);
    let err = fd(&[x], 1e-5, |_t, l| {
        let r = l[0].relu()?;
        let lr = l[0].leaky_relu(0.2)?;
        let e = l[0].exp()?;
        let lg = l[0].exp()?.add_const(0.5)?.ln()?;
        let cm = l[0].clamp_min(0.25)?;
        r.add(lr)?.add(e)?.add(lg)?.add(cm)?.sum()
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn fd_reductions_and_slices() {
    let x = param("x", 3, 3, 27);
    let y = param("y", 3, 3, 28);
    let err = fd(&[x, y], 1e-5, |tape, l| {
        let rs = l[0].row_sums()?;
        let rd = l[0].row_dots(l[1])?;
        let cs = l[0].col_slice(1)?;
        let rw = l[0].row_slice(2)?;
        let dg = l[0].diag()?;
        let cc = tape.concat_cols(&[rs, rd, cs, dg])?;
        let m = cc.mean()?;
        rw.sum()?.add(m)?.sum()
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn fd_gather_rows() {
    let idx = Rc::new(vec![2, 0, 2, 1]);
    let x = param("x", 3, 3, 29);
    let err = fd(&[x], 1e-5, |_t, l| {
        let g = l[0].gather_rows(&idx)?;
        g.mul(g)?.sum()
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn fd_l2_normalize_rows() {
    let x2 = param("x2", 4, 3, 31);
    let y = param("y", 4, 3, 32);
    let err2 = fd(&[x2, y], 1e-5, |_t, l| {
        l[0].l2_normalize_rows()?.row_dots(l[1])?.sum()
    });
    assert!(err2 < 1e-4, "{err2}");
}

#[test]
fn fd_batch_and_layer_norm() {
    let x = param("x", 5, 3, 33);
    let gamma = param("gamma", 1, 3, 34);
    let beta = param("beta", 1, 3, 35);
    let mut r = rng(77);
    let probe = Tensor::matrix(5, 3, random_vec(&mut r, 15)).unwrap();
    let err = fd(&[x.clone(), gamma.clone(), beta.clone()], 1e-5, |t, l| {
        let y = l[0].batch_norm(l[1], l[2], 1e-5)?;
        let c = t.constant(probe.clone())?;
        y.mul(c)?.sum()?.exp()?.sum()
    });
    assert!(err < 1e-4, "batch_norm {err}");

    let err = fd(&[x, gamma, beta], 1e-5, |t, l| {
        let y = l[0].layer_norm(l[1], l[2], 1e-5)?;
        let c = t.constant(probe.clone())?;
        y.mul(c)?.sum()?.exp()?.sum()
    });
    assert!(err < 1e-4, "layer_norm {err}");
}

#[test]
fn fd_mul_mask_and_detach() {
    let mask = Rc::new(vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
    let x = param("x", 2, 3, 36);
    let err = fd(&[x.clone()], 1e-5, |_t, l| l[0].mul_mask(&mask)?.sum());
    assert!(err < 1e-9, "{err}");

    // detached path carries no gradient
    x.zero_grad();
    let tape = Tape::new();
    let v = tape.leaf(&x).unwrap();
    let d = v.detach().unwrap();
    let loss = d.mul(d).unwrap().sum().unwrap();
    tape.backward(loss).unwrap();
    assert!(x.grad().is_none() || x.grad().unwrap().iter().all(|g| *g == 0.0));
}

/// Randomized composed computations over many seeds (the kernel-level
/// trainability property): gradients of a multi-op pipeline stay within
/// 1e-4 relative error of central differences.
#[test]
fn fd_random_composites_over_seeds() {
    for seed in 0..24u64 {
        let mut r = rng(1000 + seed);
        let n = r.random_range(3..7);
        let d = 3;
        let mut edges = Vec::new();
        for s in 0..n {
            for t in 0..n {
                if s != t && r.random_range(0.0..1.0) < 0.4 {
                    edges.push((s, t));
                }
            }
        }
        edges.push(((n + 1) % n, 0));
        let adj = Rc::new(SparseAdj::new(n, edges).unwrap());
        let seg = Rc::new((0..n).map(|i| usize::from(i >= n / 2)).collect::<Vec<_>>());

        let x = param("x", n, d, 2000 + seed);
        let w1 = param("w1", d, d, 3000 + seed);
        let w2 = param("w2", d, d, 4000 + seed);
        let theta = param("theta", 1, 2, 5000 + seed);
        let gamma = param("gamma", 1, d, 6000 + seed);
        let beta = param("beta", 1, d, 7000 + seed);

        let err = fd(&[x, w1, w2, theta, gamma, beta], 1e-5, |tape, l| {
            let h = tape.spmm(&adj, l[0])?;
            let a = h.matmul(l[1])?;
            let b = l[0].matmul(l[2])?;
            let alpha = l[3].softmax_rows(1.0)?.row_slice(0)?;
            let mixed = tape.weighted_sum(&[a, b], alpha)?;
            let act = mixed.leaky_relu(0.1)?;
            let normed = act.batch_norm(l[4], l[5], 1e-5)?;
            let pooled = tape.segment_reduce(normed, &seg, 2, ReduceMode::Mean)?;
            let z = pooled.l2_normalize_rows()?;
            let sims = z.matmul(z.transpose()?)?;
            sims.softmax_rows(0.7)?.diag()?.ln()?.scale(-1.0)?.sum()
        });
        assert!(err < 1e-4, "seed {seed}: rel err {err}");
    }
}
