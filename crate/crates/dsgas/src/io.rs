//! Dataset ingestion: the TUDataset text layout and a generic plain-text
//! node-classification format, plus a TUDataset-format writer used by the
//! synthetic generator CLI.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use numkernel::Tensor;

use crate::error::{Error, Result};
use crate::graph::{Graph, GraphDataset, Task};

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    Ok(text.lines().map(|l| l.trim().to_string()).collect())
}

/// Split on commas and/or whitespace, skipping empties.
fn fields(line: &str) -> Vec<&str> {
    line.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .collect()
}

fn parse_usize(path: &Path, lineno: usize, s: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::parse(path, lineno, format!("expected an integer, got {s:?}")))
}

fn parse_i64(path: &Path, lineno: usize, s: &str) -> Result<i64> {
    s.parse()
        .map_err(|_| Error::parse(path, lineno, format!("expected an integer, got {s:?}")))
}

fn parse_f64(path: &Path, lineno: usize, s: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| Error::parse(path, lineno, format!("expected a float, got {s:?}")))
}

/// Parse a dataset in the TUDataset text layout from `directory`.
///
/// Mandatory files: `{name}_A.txt` (1-based `src, dst` edge lines),
/// `{name}_graph_indicator.txt` (1-based graph id per node line),
/// `{name}_graph_labels.txt` (one label per graph line). Node features come
/// from `{name}_node_attributes.txt` when present, otherwise from one-hot
/// encoded `{name}_node_labels.txt`, otherwise a constant-1 feature
/// (or one-hot degrees when `degree_features` is set).
pub fn parse_tudataset(directory: &Path, name: &str, degree_features: bool) -> Result<GraphDataset> {
    let file = |suffix: &str| -> PathBuf { directory.join(format!("{name}_{suffix}.txt")) };

    let indicator_path = file("graph_indicator");
    let indicator_lines = read_lines(&indicator_path)?;
    let node_graph: Vec<usize> = indicator_lines
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| parse_usize(&indicator_path, i + 1, l))
        .collect::<Result<_>>()?;
    if node_graph.is_empty() {
        return Err(Error::parse(&indicator_path, 1, "empty graph indicator"));
    }
    let num_nodes = node_graph.len();
    let num_graphs = *node_graph.iter().max().expect("nonempty");
    for (i, &g) in node_graph.iter().enumerate() {
        if g == 0 || g > num_graphs {
            return Err(Error::parse(
                &indicator_path,
                i + 1,
                format!("graph id {g} out of range 1..={num_graphs}"),
            ));
        }
    }

    // node index (0-based, global) -> local index within its graph
    let mut graph_nodes: Vec<Vec<usize>> = vec![Vec::new(); num_graphs];
    let mut local_index = vec![0usize; num_nodes];
    for (node, &g) in node_graph.iter().enumerate() {
        local_index[node] = graph_nodes[g - 1].len();
        graph_nodes[g - 1].push(node);
    }
    if let Some(empty) = graph_nodes.iter().position(|nodes| nodes.is_empty()) {
        return Err(Error::parse(
            &indicator_path,
            1,
            format!("graph {} has no nodes", empty + 1),
        ));
    }

    let labels_path = file("graph_labels");
    let label_lines = read_lines(&labels_path)?;
    let raw_labels: Vec<i64> = label_lines
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| parse_i64(&labels_path, i + 1, l))
        .collect::<Result<_>>()?;
    if raw_labels.len() != num_graphs {
        return Err(Error::parse(
            &labels_path,
            raw_labels.len().min(1),
            format!("{} labels for {num_graphs} graphs", raw_labels.len()),
        ));
    }
    let mut classes: Vec<i64> = raw_labels.clone();
    classes.sort_unstable();
    classes.dedup();
    let class_of = |raw: i64| classes.binary_search(&raw).expect("label seen before");

    let edges_path = file("A");
    let edge_lines = read_lines(&edges_path)?;
    let mut per_graph_edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); num_graphs];
    for (i, line) in edge_lines.iter().enumerate() {
        if line.is_empty() {
            continue;
        }
        let f = fields(line);
        if f.len() != 2 {
            return Err(Error::parse(
                &edges_path,
                i + 1,
                format!("expected 'src, dst', got {line:?}"),
            ));
        }
        let src = parse_usize(&edges_path, i + 1, f[0])?;
        let dst = parse_usize(&edges_path, i + 1, f[1])?;
        if src == 0 || src > num_nodes || dst == 0 || dst > num_nodes {
            return Err(Error::parse(
                &edges_path,
                i + 1,
                format!("node index out of range 1..={num_nodes}"),
            ));
        }
        let (src, dst) = (src - 1, dst - 1);
        if node_graph[src] != node_graph[dst] {
            return Err(Error::parse(
                &edges_path,
                i + 1,
                "edge crosses graph boundaries",
            ));
        }
        per_graph_edges[node_graph[src] - 1].push((local_index[src], local_index[dst]));
    }

    // Feature source precedence: attributes, then one-hot node labels,
    // then degrees or constant 1.
    let attrs_path = file("node_attributes");
    let node_labels_path = file("node_labels");
    let features: Vec<Vec<f64>> = if attrs_path.exists() {
        let lines = read_lines(&attrs_path)?;
        let rows: Vec<Vec<f64>> = lines
            .iter()
            .enumerate()
            .filter(|(_, l)| !l.is_empty())
            .map(|(i, l)| {
                fields(l)
                    .iter()
                    .map(|s| parse_f64(&attrs_path, i + 1, s))
                    .collect()
            })
            .collect::<Result<_>>()?;
        if rows.len() != num_nodes {
            return Err(Error::parse(
                &attrs_path,
                rows.len(),
                format!("{} attribute rows for {num_nodes} nodes", rows.len()),
            ));
        }
        let width = rows[0].len();
        for (i, r) in rows.iter().enumerate() {
            if r.len() != width {
                return Err(Error::parse(
                    &attrs_path,
                    i + 1,
                    format!("row width {} differs from {width}", r.len()),
                ));
            }
        }
        rows
    } else if node_labels_path.exists() {
        let lines = read_lines(&node_labels_path)?;
        let raw: Vec<i64> = lines
            .iter()
            .enumerate()
            .filter(|(_, l)| !l.is_empty())
            .map(|(i, l)| parse_i64(&node_labels_path, i + 1, l))
            .collect::<Result<_>>()?;
        if raw.len() != num_nodes {
            return Err(Error::parse(
                &node_labels_path,
                raw.len(),
                format!("{} node labels for {num_nodes} nodes", raw.len()),
            ));
        }
        let mut values = raw.clone();
        values.sort_unstable();
        values.dedup();
        one_hot_rows(&raw, &values)
    } else if degree_features {
        let mut degrees = vec![0usize; num_nodes];
        for (g, edges) in per_graph_edges.iter().enumerate() {
            for &(src, _) in edges {
                degrees[graph_nodes[g][src]] += 1;
            }
        }
        let raw: Vec<i64> = degrees.iter().map(|&d| d as i64).collect();
        let mut values = raw.clone();
        values.sort_unstable();
        values.dedup();
        one_hot_rows(&raw, &values)
    } else {
        vec![vec![1.0]; num_nodes]
    };
    let num_features = features[0].len();

    let mut graphs = Vec::with_capacity(num_graphs);
    for g in 0..num_graphs {
        let nodes = &graph_nodes[g];
        let mut data = Vec::with_capacity(nodes.len() * num_features);
        for &node in nodes {
            data.extend_from_slice(&features[node]);
        }
        let feats = Tensor::matrix(nodes.len(), num_features, data)
            .map_err(numkernel::KernelError::from)?;
        let mut graph = Graph::new(feats, &per_graph_edges[g])?;
        graph.label = Some(class_of(raw_labels[g]));
        graphs.push(graph);
    }

    GraphDataset::new(graphs, classes.len(), Task::GraphLevel)
}

fn one_hot_rows(raw: &[i64], values: &[i64]) -> Vec<Vec<f64>> {
    raw.iter()
        .map(|v| {
            let mut row = vec![0.0; values.len()];
            let idx = values.binary_search(v).expect("value seen before");
            row[idx] = 1.0;
            row
        })
        .collect()
}

/// Parse a single-graph node-classification dataset from three plain-text
/// files: `src dst` edge lines (0-based), one feature row per node, and one
/// integer class per node.
pub fn parse_node_dataset(
    edge_file: &Path,
    feature_file: &Path,
    label_file: &Path,
) -> Result<GraphDataset> {
    let feature_lines = read_lines(feature_file)?;
    let features: Vec<Vec<f64>> = feature_lines
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            fields(l)
                .iter()
                .map(|s| parse_f64(feature_file, i + 1, s))
                .collect()
        })
        .collect::<Result<_>>()?;
    if features.is_empty() {
        return Err(Error::parse(feature_file, 1, "no feature rows"));
    }
    let num_nodes = features.len();
    let num_features = features[0].len();
    for (i, row) in features.iter().enumerate() {
        if row.len() != num_features {
            return Err(Error::parse(
                feature_file,
                i + 1,
                format!("row width {} differs from {num_features}", row.len()),
            ));
        }
    }

    let label_lines = read_lines(label_file)?;
    let raw_labels: Vec<i64> = label_lines
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| parse_i64(label_file, i + 1, l))
        .collect::<Result<_>>()?;
    if raw_labels.len() != num_nodes {
        return Err(Error::RowCountMismatch {
            features: num_nodes,
            labels: raw_labels.len(),
        });
    }
    let mut classes = raw_labels.clone();
    classes.sort_unstable();
    classes.dedup();

    let edge_lines = read_lines(edge_file)?;
    let mut edges = Vec::new();
    for (i, line) in edge_lines.iter().enumerate() {
        if line.is_empty() {
            continue;
        }
        let f = fields(line);
        if f.len() != 2 {
            return Err(Error::parse(
                edge_file,
                i + 1,
                format!("expected 'src dst', got {line:?}"),
            ));
        }
        let src = parse_usize(edge_file, i + 1, f[0])?;
        let dst = parse_usize(edge_file, i + 1, f[1])?;
        if src >= num_nodes || dst >= num_nodes {
            return Err(Error::parse(
                edge_file,
                i + 1,
                format!("node index out of range 0..{num_nodes}"),
            ));
        }
        edges.push((src, dst));
    }

    let mut data = Vec::with_capacity(num_nodes * num_features);
    for row in &features {
        data.extend_from_slice(row);
    }
    let feats =
        Tensor::matrix(num_nodes, num_features, data).map_err(numkernel::KernelError::from)?;
    let mut graph = Graph::new(feats, &edges)?;
    graph.node_labels = Some(
        raw_labels
            .iter()
            .map(|v| classes.binary_search(v).expect("seen"))
            .collect(),
    );

    GraphDataset::new(vec![graph], classes.len(), Task::NodeLevel)
}

/// Write a graph-level dataset in the TUDataset text layout (features go to
/// `_node_attributes.txt`), so generated datasets round-trip through
/// [`parse_tudataset`].
pub fn write_tudataset(dataset: &GraphDataset, directory: &Path, name: &str) -> Result<()> {
    fs::create_dir_all(directory).map_err(|e| Error::io(directory, e))?;
    let open = |suffix: &str| -> Result<(PathBuf, fs::File)> {
        let path = directory.join(format!("{name}_{suffix}.txt"));
        let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok((path, f))
    };

    let (a_path, mut a_file) = open("A")?;
    let (ind_path, mut ind_file) = open("graph_indicator")?;
    let (lab_path, mut lab_file) = open("graph_labels")?;
    let (attr_path, mut attr_file) = open("node_attributes")?;

    let mut offset = 1usize; // TUDataset node ids are 1-based
    for (gi, g) in dataset.graphs.iter().enumerate() {
        for &(src, dst) in g.adj.edges() {
            writeln!(a_file, "{}, {}", src + offset, dst + offset)
                .map_err(|e| Error::io(&a_path, e))?;
        }
        for node in 0..g.num_nodes() {
            writeln!(ind_file, "{}", gi + 1).map_err(|e| Error::io(&ind_path, e))?;
            let row = &g.node_features.data()[node * dataset.num_features..][..dataset.num_features];
            let line = row
                .iter()
                .map(|v| format!("{v:.17}"))
                .collect::<Vec<_>>()
                .join(", ");
            writeln!(attr_file, "{line}").map_err(|e| Error::io(&attr_path, e))?;
        }
        writeln!(lab_file, "{}", g.label.unwrap_or(0)).map_err(|e| Error::io(&lab_path, e))?;
        offset += g.num_nodes();
    }
    Ok(())
}

/// Per-class counts, mostly for reporting.
pub fn class_histogram(dataset: &GraphDataset) -> BTreeMap<usize, usize> {
    let mut hist = BTreeMap::new();
    match dataset.task {
        Task::GraphLevel => {
            for g in &dataset.graphs {
                if let Some(l) = g.label {
                    *hist.entry(l).or_insert(0) += 1;
                }
            }
        }
        Task::NodeLevel => {
            if let Some(labels) = &dataset.graphs[0].node_labels {
                for &l in labels {
                    *hist.entry(l).or_insert(0) += 1;
                }
            }
        }
    }
    hist
}
