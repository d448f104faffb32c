//! Forward-path checks against independent oracles: densified products,
//! naive loops, and scalar evaluations of the closed formulas.

mod common;

use std::rc::Rc;

use common::{assert_close, dense_matmul, random_vec, rng};
use numkernel::{KernelError, ReduceMode, SparseAdj, Tape, Tensor};
use rand::Rng;

#[test]
fn matmul_identity_is_noop() {
    let tape = Tape::new();
    let a = tape
        .constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap())
        .unwrap();
    let eye = tape
        .constant(Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap())
        .unwrap();
    let out = a.matmul(eye).unwrap();
    assert_eq!(out.value().data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
}

#[test]
fn matmul_hand_case() {
    let tape = Tape::new();
    let a = tape
        .constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap())
        .unwrap();
    let b = tape
        .constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap())
        .unwrap();
    let out = a.matmul(b).unwrap();
    assert_eq!(out.value().data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    let mut r = rng(11);
    let a = random_vec(&mut r, 3 * 4);
    let b = random_vec(&mut r, 4 * 2);
    let expected = dense_matmul(&a, &b, 3, 4, 2);

    let tape = Tape::new();
    let av = tape.constant(Tensor::matrix(3, 4, a).unwrap()).unwrap();
    let bv = tape.constant(Tensor::matrix(4, 2, b).unwrap()).unwrap();
    let out = av.matmul(bv).unwrap();
    assert_close(out.value().data(), &expected, 1e-12, "matmul");
}

#[test]
fn matmul_shape_mismatch_errors() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3])).unwrap();
    let b = tape.constant(Tensor::zeros(vec![2, 3])).unwrap();
    assert!(matches!(
        a.matmul(b),
        Err(KernelError::ShapeMismatch { op: "matmul", .. })
    ));
}

#[test]
fn spmm_empty_edge_set_gives_zeros() {
    let adj = Rc::new(SparseAdj::new(4, vec![]).unwrap());
    let tape = Tape::new();
    let x = tape
        .constant(Tensor::matrix(4, 2, (0..8).map(|i| i as f64).collect()).unwrap())
        .unwrap();
    let out = tape.spmm(&adj, x).unwrap();
    assert_eq!(out.value().data(), &[0.0; 8]);
}

#[test]
fn spmm_identity_self_loops() {
    let adj = Rc::new(SparseAdj::new(3, (0..3).map(|i| (i, i)).collect()).unwrap());
    let tape = Tape::new();
    let data: Vec<f64> = (0..6).map(|i| i as f64 * 0.5).collect();
    let x = tape
        .constant(Tensor::matrix(3, 2, data.clone()).unwrap())
        .unwrap();
    let out = tape.spmm(&adj, x).unwrap();
    assert_eq!(out.value().data(), &data[..]);
}

#[test]
fn spmm_matches_densified_product() {
    let mut r = rng(5);
    // random 5-node / 8-edge adjacency
    let mut edges = Vec::new();
    while edges.len() < 8 {
        let e = (r.random_range(0..5), r.random_range(0..5));
        if !edges.contains(&e) {
            edges.push(e);
        }
    }
    let weights: Vec<f64> = (0..8).map(|_| r.random_range(0.1..2.0)).collect();
    let adj = Rc::new(SparseAdj::new_weighted(5, edges, weights).unwrap());
    let x = random_vec(&mut r, 5 * 3);

    let dense = adj.to_dense();
    let expected = dense_matmul(&dense, &x, 5, 5, 3);

    let tape = Tape::new();
    let xv = tape
        .constant(Tensor::matrix(5, 3, x).unwrap())
        .unwrap();
    let out = tape.spmm(&adj, xv).unwrap();
    assert_close(out.value().data(), &expected, 1e-10, "spmm vs densified");
}

#[test]
fn spmm_random_graphs_match_dense_up_to_16_nodes() {
    for seed in 0..10u64 {
        let mut r = rng(seed);
        let n = r.random_range(2..=16);
        let mut edges = Vec::new();
        for s in 0..n {
            for t in 0..n {
                if r.random_range(0.0..1.0) < 0.3 {
                    edges.push((s, t));
                }
            }
        }
        let adj = Rc::new(SparseAdj::new(n, edges).unwrap());
        let x = random_vec(&mut r, n * 4);
        let expected = dense_matmul(&adj.to_dense(), &x, n, n, 4);

        let tape = Tape::new();
        let xv = tape.constant(Tensor::matrix(n, 4, x).unwrap()).unwrap();
        let out = tape.spmm(&adj, xv).unwrap();
        assert_close(out.value().data(), &expected, 1e-10, "spmm random");
    }
}

#[test]
fn softmax_uniform_row() {
    let tape = Tape::new();
    let x = tape
        .constant(Tensor::matrix(1, 3, vec![0.0, 0.0, 0.0]).unwrap())
        .unwrap();
    let out = x.softmax_rows(1.0).unwrap();
    let third = 1.0 / 3.0;
    assert_close(out.value().data(), &[third, third, third], 1e-15, "softmax");
}

#[test]
fn softmax_scalar_oracle() {
    // independent scalar evaluation of exp(x_j - max) / sum
    let row = [1.0f64, 2.0, 3.0];
    let max = 3.0;
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let expected: Vec<f64> = exps.iter().map(|e| e / sum).collect();

    let tape = Tape::new();
    let x = tape
        .constant(Tensor::matrix(1, 3, row.to_vec()).unwrap())
        .unwrap();
    let out = x.softmax_rows(1.0).unwrap();
    assert_close(out.value().data(), &expected, 1e-15, "softmax oracle");
}

#[test]
fn softmax_rejects_bad_temperature() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::zeros(vec![1, 3])).unwrap();
    assert!(matches!(
        x.softmax_rows(0.0),
        Err(KernelError::NonPositiveTemperature(_))
    ));
    let x2 = tape.constant(Tensor::zeros(vec![1, 3])).unwrap();
    assert!(x2.softmax_rows(-1.0).is_err());
}

#[test]
fn softmax_rows_sum_to_one_and_keep_argmax() {
    for seed in 0..50u64 {
        let mut r = rng(seed);
        let n = r.random_range(1..6);
        let d = r.random_range(2..8);
        let data = random_vec(&mut r, n * d);
        let temp = r.random_range(0.05..20.0);

        let tape = Tape::new();
        let x = tape
            .constant(Tensor::matrix(n, d, data.clone()).unwrap())
            .unwrap();
        let out = x.softmax_rows(temp).unwrap();
        let o = out.value();
        for i in 0..n {
            let row = &o.data()[i * d..(i + 1) * d];
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "row sum {sum}");
            let arg_in = numkernel::argmax(&data[i * d..(i + 1) * d]);
            let arg_out = numkernel::argmax(row);
            assert_eq!(arg_in, arg_out, "argmax changed (seed {seed}, temp {temp})");
        }
    }
}

#[test]
fn softmax_shift_invariance() {
    let mut r = rng(99);
    let data = random_vec(&mut r, 2 * 5);
    let shifted: Vec<f64> = data.iter().map(|v| v + 7.25).collect();

    let tape = Tape::new();
    let a = tape
        .constant(Tensor::matrix(2, 5, data).unwrap())
        .unwrap()
        .softmax_rows(0.7)
        .unwrap();
    let b = tape
        .constant(Tensor::matrix(2, 5, shifted).unwrap())
        .unwrap()
        .softmax_rows(0.7)
        .unwrap();
    assert_close(a.value().data(), b.value().data(), 1e-12, "shift invariance");
}

#[test]
fn segment_reduce_single_graph_sum_is_column_sum() {
    let tape = Tape::new();
    let x = tape
        .constant(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap())
        .unwrap();
    let seg = Rc::new(vec![0, 0, 0]);
    let out = tape.segment_reduce(x, &seg, 1, ReduceMode::Sum).unwrap();
    assert_eq!(out.value().data(), &[9.0, 12.0]);
}

#[test]
fn segment_reduce_singletons_are_identity() {
    let data = vec![1.0, -2.0, 3.5, 0.25];
    for mode in [ReduceMode::Sum, ReduceMode::Mean, ReduceMode::Max] {
        let tape = Tape::new();
        let x = tape
            .constant(Tensor::matrix(2, 2, data.clone()).unwrap())
            .unwrap();
        let seg = Rc::new(vec![0, 1]);
        let out = tape.segment_reduce(x, &seg, 2, mode).unwrap();
        assert_eq!(out.value().data(), &data[..], "{mode:?}");
    }
}

#[test]
fn segment_reduce_matches_naive_loop() {
    let mut r = rng(3);
    let data = random_vec(&mut r, 6 * 3);
    let seg = vec![0, 1, 0, 1, 1, 0];

    for mode in [ReduceMode::Sum, ReduceMode::Mean, ReduceMode::Max] {
        // naive per-graph loop oracle
        let mut expected = match mode {
            ReduceMode::Max => vec![f64::NEG_INFINITY; 2 * 3],
            _ => vec![0.0; 2 * 3],
        };
        let mut counts = [0usize; 2];
        for (i, &s) in seg.iter().enumerate() {
            counts[s] += 1;
            for j in 0..3 {
                let v = data[i * 3 + j];
                match mode {
                    ReduceMode::Max => {
                        if v > expected[s * 3 + j] {
                            expected[s * 3 + j] = v;
                        }
                    }
                    _ => expected[s * 3 + j] += v,
                }
            }
        }
        if mode == ReduceMode::Mean {
            for s in 0..2 {
                for j in 0..3 {
                    expected[s * 3 + j] /= counts[s] as f64;
                }
            }
        }

        let tape = Tape::new();
        let x = tape
            .constant(Tensor::matrix(6, 3, data.clone()).unwrap())
            .unwrap();
        let segments = Rc::new(seg.clone());
        let out = tape.segment_reduce(x, &segments, 2, mode).unwrap();
        assert_close(out.value().data(), &expected, 1e-12, "segment_reduce");
    }
}

#[test]
fn segment_reduce_rejects_empty_segment() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::zeros(vec![2, 2])).unwrap();
    let seg = Rc::new(vec![0, 0]);
    assert!(matches!(
        tape.segment_reduce(x, &seg, 2, ReduceMode::Sum),
        Err(KernelError::EmptySegment(1))
    ));
}

#[test]
fn segment_softmax_groups_sum_to_one() {
    let mut r = rng(17);
    let data = random_vec(&mut r, 7);
    let groups = Rc::new(vec![0, 1, 0, 2, 1, 2, 2]);
    let tape = Tape::new();
    let x = tape.constant(Tensor::vector(data)).unwrap();
    let out = tape.segment_softmax(x, &groups, 3).unwrap();
    let o = out.value();
    let mut sums = [0.0f64; 3];
    for (i, &g) in groups.iter().enumerate() {
        sums[g] += o.data()[i];
    }
    for s in sums {
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn tensor_rejects_bad_data_length() {
    assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
}

#[test]
fn determinism_same_inputs_bit_identical() {
    let build = || {
        let mut r = rng(42);
        let adj = Rc::new(SparseAdj::new(4, vec![(0, 1), (1, 2), (2, 3), (3, 0)]).unwrap());
        let tape = Tape::new();
        let x = tape
            .constant(Tensor::matrix(4, 3, random_vec(&mut r, 12)).unwrap())
            .unwrap();
        let w = tape
            .constant(Tensor::matrix(3, 3, random_vec(&mut r, 9)).unwrap())
            .unwrap();
        let h = tape.spmm(&adj, x).unwrap();
        let y = h.matmul(w).unwrap().softmax_rows(0.5).unwrap();
        y.value().data().to_vec()
    };
    let a = build();
    let b = build();
    assert_eq!(a, b, "bit-identical outputs expected");
}
