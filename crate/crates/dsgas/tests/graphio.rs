//! Dataset ingestion and batching behaviour: the hand-built fixture, error
//! paths, write/parse round trips, batching-commutes-with-message-passing,
//! and the planted-factor rule-classifier oracle.

use std::fs;
use std::path::Path;
use std::rc::Rc;

use dsgas::graph::{batch_graphs, Task};
use dsgas::io::{parse_node_dataset, parse_tudataset, write_tudataset};
use dsgas::synthetic::{
    decode_variants, default_factors, factor_node_range, make_synthetic_factors, MotifKind,
};
use dsgas::Error;
use numkernel::{Tape, Tensor};

fn fixture_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures"))
}

#[test]
fn fixture_parses_with_hand_verified_counts() {
    let ds = parse_tudataset(&fixture_dir().join("TINY"), "TINY", false).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.num_features, 3); // three distinct node labels, one-hot
    assert_eq!(ds.num_classes, 2);
    assert_eq!(ds.task, Task::GraphLevel);

    let triangle = &ds.graphs[0];
    assert_eq!(triangle.num_nodes(), 3);
    assert_eq!(triangle.num_undirected_edges(), 3);
    assert_eq!(triangle.num_directed_edges(), 6);
    // raw labels 1 / -1 map to classes 1 / 0 in sorted order
    assert_eq!(triangle.label, Some(1));

    let pair = &ds.graphs[1];
    assert_eq!(pair.num_nodes(), 2);
    assert_eq!(pair.num_undirected_edges(), 1);
    assert_eq!(pair.label, Some(0));

    // one-hot features follow the node label file
    assert_eq!(triangle.node_features.data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn parse_is_idempotent_and_order_stable() {
    let a = parse_tudataset(&fixture_dir().join("TINY"), "TINY", false).unwrap();
    let b = parse_tudataset(&fixture_dir().join("TINY"), "TINY", false).unwrap();
    assert_eq!(a.len(), b.len());
    for (ga, gb) in a.graphs.iter().zip(&b.graphs) {
        assert_eq!(ga.node_features.data(), gb.node_features.data());
        assert_eq!(ga.adj.edges(), gb.adj.edges());
        assert_eq!(ga.label, gb.label);
    }
}

#[test]
fn missing_file_error_names_the_file() {
    let err = parse_tudataset(&fixture_dir().join("TINY"), "NOPE", false).unwrap_err();
    match err {
        Error::MissingFile(path) => {
            assert!(path.to_string_lossy().contains("NOPE_graph_indicator.txt"));
        }
        other => panic!("expected MissingFile, got {other:?}"),
    }
}

#[test]
fn dangling_node_index_reports_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let name = "BAD";
    fs::write(dir.path().join("BAD_graph_indicator.txt"), "1\n1\n").unwrap();
    fs::write(dir.path().join("BAD_graph_labels.txt"), "0\n").unwrap();
    fs::write(dir.path().join("BAD_A.txt"), "1, 2\n2, 7\n").unwrap();
    let err = parse_tudataset(dir.path(), name, false).unwrap_err();
    match err {
        Error::Parse { line, .. } => assert_eq!(line, 2),
        other => panic!("expected Parse error, got {other:?}"),
    }
}

#[test]
fn empty_indicator_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("E_graph_indicator.txt"), "").unwrap();
    fs::write(dir.path().join("E_graph_labels.txt"), "").unwrap();
    fs::write(dir.path().join("E_A.txt"), "").unwrap();
    assert!(matches!(
        parse_tudataset(dir.path(), "E", false),
        Err(Error::Parse { .. })
    ));
}

#[test]
fn featureless_graphs_get_constant_one() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("C_graph_indicator.txt"), "1\n1\n").unwrap();
    fs::write(dir.path().join("C_graph_labels.txt"), "0\n").unwrap();
    fs::write(dir.path().join("C_A.txt"), "1, 2\n2, 1\n").unwrap();
    let ds = parse_tudataset(dir.path(), "C", false).unwrap();
    assert_eq!(ds.num_features, 1);
    assert_eq!(ds.graphs[0].node_features.data(), &[1.0, 1.0]);

    let ds = parse_tudataset(dir.path(), "C", true).unwrap();
    // both nodes have degree 1: a single one-hot degree bucket
    assert_eq!(ds.num_features, 1);
}

#[test]
fn node_dataset_path_graph() {
    let dir = tempfile::tempdir().unwrap();
    let edges = dir.path().join("edges.txt");
    let feats = dir.path().join("feats.txt");
    let labels = dir.path().join("labels.txt");
    fs::write(&edges, "0 1\n1 2\n").unwrap();
    fs::write(&feats, "1.0 0.0\n0.5 0.5\n0.0 1.0\n").unwrap();
    fs::write(&labels, "0\n1\n0\n").unwrap();
    let ds = parse_node_dataset(&edges, &feats, &labels).unwrap();
    assert_eq!(ds.task, Task::NodeLevel);
    assert_eq!(ds.len(), 1);
    assert_eq!(ds.graphs[0].num_nodes(), 3);
    assert_eq!(ds.num_classes, 2);
    assert_eq!(ds.graphs[0].node_labels.as_ref().unwrap(), &[0, 1, 0]);
}

#[test]
fn node_dataset_rejects_row_count_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let edges = dir.path().join("edges.txt");
    let feats = dir.path().join("feats.txt");
    let labels = dir.path().join("labels.txt");
    fs::write(&edges, "0 1\n").unwrap();
    fs::write(&feats, "1 0\n0 1\n1 1\n0 0\n").unwrap();
    fs::write(&labels, "0\n1\n0\n").unwrap();
    assert!(matches!(
        parse_node_dataset(&edges, &feats, &labels),
        Err(Error::RowCountMismatch {
            features: 4,
            labels: 3
        })
    ));
}

#[test]
fn tudataset_write_parse_round_trip() {
    let ds = make_synthetic_factors(12, &default_factors(), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_tudataset(&ds, dir.path(), "SYN").unwrap();
    let back = parse_tudataset(dir.path(), "SYN", false).unwrap();
    assert_eq!(back.len(), ds.len());
    assert_eq!(back.num_features, ds.num_features);
    assert_eq!(back.num_classes, ds.num_classes);
    for (a, b) in ds.graphs.iter().zip(&back.graphs) {
        assert_eq!(a.label, b.label);
        assert_eq!(a.adj.edges(), b.adj.edges());
        for (x, y) in a.node_features.data().iter().zip(b.node_features.data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }
}

/// Batching commutes with message passing: spmm on the block-diagonal batch
/// equals per-graph spmm stacked in order.
#[test]
fn batching_commutes_with_spmm() {
    let ds = make_synthetic_factors(6, &default_factors(), 11).unwrap();
    let refs: Vec<_> = ds.graphs.iter().collect();
    let batch = batch_graphs(&refs).unwrap();

    let tape = Tape::new();
    let x = tape.constant(batch.features.clone()).unwrap();
    let batched = tape.spmm(&Rc::new(batch.adj.clone()), x).unwrap().value();

    let mut stacked: Vec<f64> = Vec::new();
    for g in &ds.graphs {
        let tape = Tape::new();
        let x = tape.constant(g.node_features.clone()).unwrap();
        let out = tape.spmm(&Rc::new(g.adj.clone()), x).unwrap().value();
        stacked.extend_from_slice(out.data());
    }
    assert_eq!(batched.data().len(), stacked.len());
    for (a, b) in batched.data().iter().zip(&stacked) {
        assert!((a - b).abs() < 1e-10);
    }
}

/// A hand-coded rule classifier reading each factor's own subset separates
/// that factor's variants perfectly and stays near chance on the other
/// factor (the planted signals are independent).
#[test]
fn rule_classifier_oracle_on_generating_parameters() {
    let factors = default_factors();
    assert_eq!(factors[0].structures, vec![MotifKind::Dense, MotifKind::Star]);
    assert_eq!(factors[1].structures, vec![MotifKind::Ring, MotifKind::Matching]);
    let ds = make_synthetic_factors(400, &factors, 13).unwrap();

    let range0 = factor_node_range(&factors, 0);
    let range1 = factor_node_range(&factors, 1);

    // factor 0 rule: within-subset edge density above 0.5 means Dense (variant 0)
    let density_rule = |g: &dsgas::graph::Graph| -> usize {
        let m = range0.len();
        let pairs = (m * (m - 1)) / 2;
        let within = g
            .undirected_edges()
            .iter()
            .filter(|(a, b)| range0.contains(a) && range0.contains(b) && a != b)
            .count();
        usize::from((within as f64 / pairs as f64) < 0.5)
    };
    // factor 1 rule: max within-subset degree >= 2 means Ring (variant 0)
    let degree_rule = |g: &dsgas::graph::Graph| -> usize {
        let mut deg = vec![0usize; g.num_nodes()];
        for (a, b) in g.undirected_edges() {
            if range1.contains(&a) && range1.contains(&b) && a != b {
                deg[a] += 1;
                deg[b] += 1;
            }
        }
        let max = range1.clone().map(|i| deg[i]).max().unwrap_or(0);
        usize::from(max < 2)
    };

    let mut hits = [[0usize; 2]; 2]; // [rule][factor]
    for g in &ds.graphs {
        let variants = decode_variants(g.label.unwrap(), &factors);
        let d = density_rule(g);
        let k = degree_rule(g);
        hits[0][0] += usize::from(d == variants[0]);
        hits[0][1] += usize::from(d == variants[1]);
        hits[1][0] += usize::from(k == variants[0]);
        hits[1][1] += usize::from(k == variants[1]);
    }
    let n = ds.len() as f64;
    let acc = |h: usize| h as f64 / n;

    assert_eq!(acc(hits[0][0]), 1.0, "density rule must nail factor 0");
    assert_eq!(acc(hits[1][1]), 1.0, "degree rule must nail factor 1");
    assert!(
        (0.35..=0.65).contains(&acc(hits[0][1])),
        "density rule on factor 1 should be near chance, got {}",
        acc(hits[0][1])
    );
    assert!(
        (0.35..=0.65).contains(&acc(hits[1][0])),
        "degree rule on factor 0 should be near chance, got {}",
        acc(hits[1][0])
    );
}
