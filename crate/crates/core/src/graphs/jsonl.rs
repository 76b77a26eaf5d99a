//! JSON-lines graph dataset serialization.
//!
//! One JSON object per line with fields `{id, topology_kind, n,
//! node_features, edges, edge_features, node_labels, graph_label}`.
//! Floats are written with 17 significant digits so every f64 round-trips
//! exactly; emission is fully deterministic, so identical datasets produce
//! identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::Deserialize;

use super::{GraphError, SpatialGraph, TopologyKind};
use crate::autodiff::Tensor;

/// Formats an f64 with 17 significant digits as a JSON number.
fn push_f64(out: &mut String, v: f64) {
    write!(out, "{v:.16e}").expect("write to string");
}

fn push_f64_matrix(out: &mut String, t: &Tensor, cols: usize) {
    out.push('[');
    let rows = t.numel() / cols.max(1);
    for r in 0..rows {
        if r > 0 {
            out.push(',');
        }
        out.push('[');
        for c in 0..cols {
            if c > 0 {
                out.push(',');
            }
            push_f64(out, t.data()[r * cols + c]);
        }
        out.push(']');
    }
    out.push(']');
}

/// Serializes one graph as a single JSON line (without trailing newline).
pub fn write_graph_line(id: usize, graph: &SpatialGraph) -> String {
    let mut out = String::new();
    let _ = write!(
        out,
        "{{\"id\":{id},\"topology_kind\":\"{}\",\"n\":{}",
        graph.topology,
        graph.n_nodes()
    );
    out.push_str(",\"node_features\":");
    push_f64_matrix(&mut out, &graph.node_features, graph.node_features.shape()[1]);
    out.push_str(",\"edges\":[");
    for (i, &(u, v)) in graph.edges.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "[{u},{v}]");
    }
    out.push_str("],\"edge_features\":");
    push_f64_matrix(&mut out, &graph.edge_features, 2);
    out.push_str(",\"node_labels\":[");
    for (i, y) in graph.node_labels.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "{y}");
    }
    let _ = write!(out, "],\"graph_label\":{}}}", graph.graph_label);
    out
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphRecord {
    id: usize,
    topology_kind: TopologyKind,
    n: usize,
    node_features: Vec<Vec<f64>>,
    edges: Vec<(usize, usize)>,
    edge_features: Vec<Vec<f64>>,
    node_labels: Vec<usize>,
    graph_label: usize,
}

impl GraphRecord {
    fn into_graph(self, line: usize) -> Result<(usize, SpatialGraph), GraphError> {
        if self.node_features.len() != self.n || self.node_labels.len() != self.n {
            return Err(GraphError::Malformed {
                line,
                reason: format!(
                    "n = {} but {} feature rows and {} labels",
                    self.n,
                    self.node_features.len(),
                    self.node_labels.len()
                ),
            });
        }
        if self.edge_features.len() != self.edges.len() {
            return Err(GraphError::Malformed {
                line,
                reason: format!(
                    "{} edges but {} edge feature rows",
                    self.edges.len(),
                    self.edge_features.len()
                ),
            });
        }
        let node_features = Tensor::from_rows(&self.node_features).map_err(|e| GraphError::Malformed {
            line,
            reason: e.to_string(),
        })?;
        let mut ef = Vec::with_capacity(self.edges.len() * 2);
        for row in &self.edge_features {
            if row.len() != 2 {
                return Err(GraphError::Malformed {
                    line,
                    reason: format!("edge feature row of width {}", row.len()),
                });
            }
            ef.extend_from_slice(row);
        }
        let edge_features = Tensor::matrix(self.edges.len(), 2, ef).expect("edge feature shape");
        for &(u, v) in &self.edges {
            if u >= self.n || v >= self.n {
                return Err(GraphError::Malformed {
                    line,
                    reason: format!("edge ({u}, {v}) out of range for n = {}", self.n),
                });
            }
        }
        Ok((
            self.id,
            SpatialGraph {
                topology: self.topology_kind,
                node_features,
                edges: self.edges,
                edge_features,
                node_labels: self.node_labels,
                graph_label: self.graph_label,
            },
        ))
    }
}

/// Both topologies of one cluster, keyed by the shared cluster id.
#[derive(Debug, Clone, Default)]
pub struct ClusterGraphs {
    pub knn: Option<SpatialGraph>,
    pub radius: Option<SpatialGraph>,
}

impl ClusterGraphs {
    pub fn by_kind(&self, kind: TopologyKind) -> Option<&SpatialGraph> {
        match kind {
            TopologyKind::Knn => self.knn.as_ref(),
            TopologyKind::Radius => self.radius.as_ref(),
        }
    }

    /// Any available graph; node features and labels agree across kinds.
    pub fn any(&self) -> Option<&SpatialGraph> {
        self.knn.as_ref().or(self.radius.as_ref())
    }
}

/// A graph dataset grouped by cluster id, in ascending id order.
#[derive(Debug, Clone, Default)]
pub struct GraphDataset {
    pub clusters: BTreeMap<usize, ClusterGraphs>,
}

impl GraphDataset {
    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&ClusterGraphs> {
        self.clusters.get(&id)
    }

    pub fn insert(&mut self, id: usize, graph: SpatialGraph) {
        let entry = self.clusters.entry(id).or_default();
        match graph.topology {
            TopologyKind::Knn => entry.knn = Some(graph),
            TopologyKind::Radius => entry.radius = Some(graph),
        }
    }
}

/// Writes a dataset as JSON lines, ids ascending, knn before radius.
pub fn write_dataset(path: &Path, dataset: &GraphDataset) -> Result<(), GraphError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (&id, graphs) in &dataset.clusters {
        if let Some(g) = &graphs.knn {
            writeln!(file, "{}", write_graph_line(id, g))?;
        }
        if let Some(g) = &graphs.radius {
            writeln!(file, "{}", write_graph_line(id, g))?;
        }
    }
    file.flush()?;
    Ok(())
}

/// Reads a JSON-lines dataset, grouping lines by cluster id.
pub fn read_dataset(path: &Path) -> Result<GraphDataset, GraphError> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut dataset = GraphDataset::default();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: GraphRecord = serde_json::from_str(&line).map_err(|e| GraphError::Malformed {
            line: i + 1,
            reason: e.to_string(),
        })?;
        let (id, graph) = record.into_graph(i + 1)?;
        dataset.insert(id, graph);
    }
    Ok(dataset)
}
