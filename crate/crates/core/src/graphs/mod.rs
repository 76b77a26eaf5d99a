//! Spatial graph construction from annotated point clusters: coordinate
//! normalization, k-nearest-neighbor and radius topologies, relative-
//! coordinate edge features, and node features assembled from a patch
//! descriptor concatenated with normalized coordinates.

mod descriptor;
mod jsonl;
mod kdtree;

pub use descriptor::{Patch, PatchDescriptor, StatsDescriptor};
pub use jsonl::{read_dataset, write_dataset, write_graph_line, GraphDataset};

use kdtree::KdTree;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("cluster must contain at least {min} points, got {got}")]
    TooFewPoints { min: usize, got: usize },
    #[error("point {index} at ({x}, {y}) lies outside the image extent {extent:?}")]
    PointOutsideExtent {
        index: usize,
        x: f64,
        y: f64,
        extent: (f64, f64),
    },
    #[error("image extent must have positive area, got {0:?}")]
    ZeroAreaExtent((f64, f64)),
    #[error("empty point list")]
    EmptyPoints,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("radius must be nonnegative, got {0}")]
    NegativeRadius(f64),
    #[error("patch {index} is {got}x{got}, expected {expected}x{expected}")]
    PatchSizeMismatch {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("cluster has {points} points but {field} has {got} entries")]
    FieldLengthMismatch {
        field: &'static str,
        points: usize,
        got: usize,
    },
    #[error("edge ({src}, {dst}) references a node outside 0..{n}")]
    EdgeOutOfRange { src: usize, dst: usize, n: usize },
    #[error("dataset line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Minimum number of points for a valid cluster.
pub const MIN_CLUSTER_POINTS: usize = 3;

/// An image-plane point cluster with per-point intensity patches, per-point
/// morphology labels, and one cluster-level distribution label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedCluster {
    /// (width, height) in pixels.
    pub image_extent: (f64, f64),
    /// Point centers in pixel coordinates.
    pub points: Vec<(f64, f64)>,
    pub patches: Vec<Patch>,
    pub node_labels: Vec<usize>,
    pub graph_label: usize,
}

impl AnnotatedCluster {
    pub fn n_points(&self) -> usize {
        self.points.len()
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        if self.points.len() < MIN_CLUSTER_POINTS {
            return Err(GraphError::TooFewPoints {
                min: MIN_CLUSTER_POINTS,
                got: self.points.len(),
            });
        }
        let (w, h) = self.image_extent;
        if !(w > 0.0 && h > 0.0) {
            return Err(GraphError::ZeroAreaExtent(self.image_extent));
        }
        for (i, &(x, y)) in self.points.iter().enumerate() {
            if !(0.0..=w).contains(&x) || !(0.0..=h).contains(&y) {
                return Err(GraphError::PointOutsideExtent {
                    index: i,
                    x,
                    y,
                    extent: self.image_extent,
                });
            }
        }
        if self.patches.len() != self.points.len() {
            return Err(GraphError::FieldLengthMismatch {
                field: "patches",
                points: self.points.len(),
                got: self.patches.len(),
            });
        }
        let patch_size = self.patches[0].size;
        for (i, p) in self.patches.iter().enumerate() {
            if p.size != patch_size {
                return Err(GraphError::PatchSizeMismatch {
                    index: i,
                    got: p.size,
                    expected: patch_size,
                });
            }
        }
        if self.node_labels.len() != self.points.len() {
            return Err(GraphError::FieldLengthMismatch {
                field: "node_labels",
                points: self.points.len(),
                got: self.node_labels.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    Knn,
    Radius,
}

impl std::fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TopologyKind::Knn => write!(f, "knn"),
            TopologyKind::Radius => write!(f, "radius"),
        }
    }
}

/// Topology selector with its builder parameter. Distances are measured in
/// normalized [0, 1] coordinates, so `radius` is resolution independent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GraphTopology {
    Knn { k: usize },
    Radius { radius: f64 },
}

impl GraphTopology {
    pub fn kind(&self) -> TopologyKind {
        match self {
            GraphTopology::Knn { .. } => TopologyKind::Knn,
            GraphTopology::Radius { .. } => TopologyKind::Radius,
        }
    }
}

/// A cluster transformed into graph form: node feature matrix, directed
/// edges with relative-coordinate features, and the carried-through labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGraph {
    pub topology: TopologyKind,
    /// `n x d` node features: descriptor output ++ normalized coordinates.
    pub node_features: Tensor,
    /// Directed (src, dst) pairs, sorted, with no self-loops or duplicates.
    pub edges: Vec<(usize, usize)>,
    /// `|edges| x 2` relative Cartesian coordinates, dst minus src.
    pub edge_features: Tensor,
    pub node_labels: Vec<usize>,
    pub graph_label: usize,
}

impl SpatialGraph {
    pub fn n_nodes(&self) -> usize {
        self.node_features.shape()[0]
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn sources(&self) -> Vec<usize> {
        self.edges.iter().map(|&(s, _)| s).collect()
    }

    pub fn destinations(&self) -> Vec<usize> {
        self.edges.iter().map(|&(_, d)| d).collect()
    }
}

/// Maps pixel coordinates into the unit square by dividing through the
/// image extent.
pub fn normalize_coordinates(
    points: &[(f64, f64)],
    extent: (f64, f64),
) -> Result<Vec<(f64, f64)>, GraphError> {
    let (w, h) = extent;
    if !(w > 0.0 && h > 0.0) {
        return Err(GraphError::ZeroAreaExtent(extent));
    }
    points
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| {
            if !(0.0..=w).contains(&x) || !(0.0..=h).contains(&y) {
                Err(GraphError::PointOutsideExtent {
                    index: i,
                    x,
                    y,
                    extent,
                })
            } else {
                Ok((x / w, y / h))
            }
        })
        .collect()
}

/// Directed k-nearest-neighbor edges: u -> v iff v is among u's k nearest
/// points by Euclidean distance, distance ties broken by lower index.
/// Every node gets exactly `min(k, n - 1)` outgoing edges.
pub fn build_knn_graph(points: &[(f64, f64)], k: usize) -> Result<Vec<(usize, usize)>, GraphError> {
    if points.is_empty() {
        return Err(GraphError::EmptyPoints);
    }
    if k == 0 {
        return Err(GraphError::InvalidK);
    }
    let tree = KdTree::build(points);
    let mut edges = Vec::with_capacity(points.len() * k);
    for (u, &p) in points.iter().enumerate() {
        for v in tree.k_nearest(p, u, k) {
            edges.push((u, v));
        }
    }
    edges.sort_unstable();
    Ok(edges)
}

/// Symmetric radius edges: u -> v iff 0 < d(u, v) <= r, both directions.
pub fn build_radius_graph(
    points: &[(f64, f64)],
    r: f64,
) -> Result<Vec<(usize, usize)>, GraphError> {
    if points.is_empty() {
        return Err(GraphError::EmptyPoints);
    }
    if r < 0.0 {
        return Err(GraphError::NegativeRadius(r));
    }
    let tree = KdTree::build(points);
    let mut edges = Vec::new();
    for (u, &p) in points.iter().enumerate() {
        for v in tree.within_radius(p, u, r) {
            edges.push((u, v));
        }
    }
    edges.sort_unstable();
    Ok(edges)
}

/// Adds the reverse of every edge and removes duplicates.
pub fn symmetrize_edges(edges: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = edges
        .iter()
        .flat_map(|&(u, v)| [(u, v), (v, u)])
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Relative Cartesian edge features: row for (u, v) is coords(v) - coords(u).
pub fn compute_edge_features(
    edges: &[(usize, usize)],
    coords: &[(f64, f64)],
) -> Result<Tensor, GraphError> {
    let n = coords.len();
    let mut data = Vec::with_capacity(edges.len() * 2);
    for &(src, dst) in edges {
        if src >= n || dst >= n {
            return Err(GraphError::EdgeOutOfRange { src, dst, n });
        }
        data.push(coords[dst].0 - coords[src].0);
        data.push(coords[dst].1 - coords[src].1);
    }
    Ok(Tensor::matrix(edges.len(), 2, data).expect("edge feature shape"))
}

/// Builds a [`SpatialGraph`] from a cluster: normalizes coordinates, runs
/// the chosen topology builder on them, computes relative-coordinate edge
/// features, and assembles node features as descriptor(patch) ++ coords.
pub fn assemble_graph(
    cluster: &AnnotatedCluster,
    topology: GraphTopology,
    descriptor: &dyn PatchDescriptor,
    symmetrize: bool,
) -> Result<SpatialGraph, GraphError> {
    cluster.validate()?;
    let coords = normalize_coordinates(&cluster.points, cluster.image_extent)?;

    let mut edges = match topology {
        GraphTopology::Knn { k } => build_knn_graph(&coords, k)?,
        GraphTopology::Radius { radius } => build_radius_graph(&coords, radius)?,
    };
    if symmetrize {
        edges = symmetrize_edges(&edges);
    }
    let edge_features = compute_edge_features(&edges, &coords)?;

    let d = descriptor.dim() + 2;
    let mut features = Vec::with_capacity(cluster.n_points() * d);
    for (patch, &(x, y)) in cluster.patches.iter().zip(&coords) {
        let desc = descriptor.describe(patch);
        debug_assert_eq!(desc.len(), descriptor.dim());
        features.extend(desc);
        features.push(x);
        features.push(y);
    }
    let node_features = Tensor::matrix(cluster.n_points(), d, features).expect("node feature shape");

    Ok(SpatialGraph {
        topology: topology.kind(),
        node_features,
        edges,
        edge_features,
        node_labels: cluster.node_labels.clone(),
        graph_label: cluster.graph_label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seeded_points(seed: u64, n: usize) -> Vec<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (rng.gen::<f64>(), rng.gen::<f64>())).collect()
    }

    fn cluster_of(points: Vec<(f64, f64)>, extent: (f64, f64)) -> AnnotatedCluster {
        let n = points.len();
        AnnotatedCluster {
            image_extent: extent,
            points,
            patches: vec![Patch::zeros(8); n],
            node_labels: vec![0; n],
            graph_label: 1,
        }
    }

    #[test]
    fn knn_nearest_by_inspection() {
        let points = vec![(0.0, 0.0), (1.0, 0.0), (5.0, 0.0)];
        let edges = build_knn_graph(&points, 1).unwrap();
        assert_eq!(edges, vec![(0, 1), (1, 0), (2, 1)]);
    }

    #[test]
    fn knn_single_point_has_no_edges() {
        let edges = build_knn_graph(&[(0.5, 0.5)], 3).unwrap();
        assert!(edges.is_empty());
        assert!(matches!(
            build_knn_graph(&[], 3),
            Err(GraphError::EmptyPoints)
        ));
    }

    #[test]
    fn knn_matches_brute_force_on_seeded_points() {
        let points = seeded_points(11, 20);
        let edges = build_knn_graph(&points, 3).unwrap();
        assert_eq!(edges, reference::brute_force_knn_edges(&points, 3));
    }

    #[test]
    fn knn_out_degree_is_min_k_n_minus_one() {
        let points = seeded_points(5, 7);
        for k in [1, 3, 6, 10, 50] {
            let edges = build_knn_graph(&points, k).unwrap();
            let mut out_deg = vec![0usize; points.len()];
            for (u, _) in edges {
                out_deg[u] += 1;
            }
            assert!(out_deg.iter().all(|&d| d == k.min(points.len() - 1)));
        }
    }

    #[test]
    fn radius_zero_gives_empty_edge_set() {
        let points = seeded_points(3, 10);
        assert!(build_radius_graph(&points, 0.0).unwrap().is_empty());
    }

    #[test]
    fn radius_boundary_is_inclusive() {
        let points = vec![(0.0, 0.0), (0.3, 0.0)];
        let edges = build_radius_graph(&points, 0.3).unwrap();
        assert_eq!(edges, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn radius_rejects_negative() {
        assert!(matches!(
            build_radius_graph(&[(0.0, 0.0)], -0.1),
            Err(GraphError::NegativeRadius(_))
        ));
    }

    #[test]
    fn radius_matches_brute_force_and_is_symmetric() {
        let points = seeded_points(17, 20);
        let edges = build_radius_graph(&points, 0.3).unwrap();
        assert_eq!(edges, reference::brute_force_radius_edges(&points, 0.3));
        for &(u, v) in &edges {
            assert!(edges.binary_search(&(v, u)).is_ok(), "missing reverse of ({u},{v})");
        }
    }

    #[test]
    fn normalize_examples() {
        let coords = normalize_coordinates(&[(50.0, 100.0), (0.0, 0.0), (99.0, 199.0)], (100.0, 200.0)).unwrap();
        assert_eq!(coords[0], (0.5, 0.5));
        assert_eq!(coords[1], (0.0, 0.0));
        assert_eq!(coords[2], (0.99, 0.995));
        assert!(matches!(
            normalize_coordinates(&[(0.0, 0.0)], (0.0, 10.0)),
            Err(GraphError::ZeroAreaExtent(_))
        ));
    }

    #[test]
    fn edge_features_are_antisymmetric_relative_coords() {
        let coords = vec![(0.1, 0.1), (0.4, 0.5)];
        let f = compute_edge_features(&[(0, 1), (1, 0)], &coords).unwrap();
        assert!((f.at2(0, 0) - 0.3).abs() < 1e-15);
        assert!((f.at2(0, 1) - 0.4).abs() < 1e-15);
        assert_eq!(f.at2(0, 0), -f.at2(1, 0));
        assert_eq!(f.at2(0, 1), -f.at2(1, 1));
    }

    #[test]
    fn assemble_zero_patch_features_are_coords() {
        let cluster = cluster_of(vec![(10.0, 10.0), (20.0, 10.0), (10.0, 20.0)], (100.0, 100.0));
        let g = assemble_graph(&cluster, GraphTopology::Knn { k: 2 }, &StatsDescriptor, false).unwrap();
        assert_eq!(g.node_features.shape(), &[3, StatsDescriptor::DIM + 2]);
        for i in 0..3 {
            let row = g.node_features.row(i);
            assert!(row[..StatsDescriptor::DIM].iter().all(|v| *v == 0.0));
            assert_eq!(row[StatsDescriptor::DIM], cluster.points[i].0 / 100.0);
            assert_eq!(row[StatsDescriptor::DIM + 1], cluster.points[i].1 / 100.0);
        }
    }

    #[test]
    fn small_cluster_knn_and_radius_saturate_identically() {
        let cluster = cluster_of(vec![(10.0, 10.0), (20.0, 10.0), (10.0, 20.0)], (100.0, 100.0));
        let knn = assemble_graph(&cluster, GraphTopology::Knn { k: 2 }, &StatsDescriptor, false).unwrap();
        let radius = assemble_graph(&cluster, GraphTopology::Radius { radius: 2.0 }, &StatsDescriptor, false).unwrap();
        assert_eq!(knn.edges, radius.edges);
        assert_eq!(knn.edges.len(), 6); // complete digraph on 3 nodes
    }

    #[test]
    fn assemble_matches_composed_sub_operations() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let points: Vec<(f64, f64)> = (0..15)
            .map(|_| (rng.gen::<f64>() * 640.0, rng.gen::<f64>() * 480.0))
            .collect();
        let cluster = cluster_of(points, (640.0, 480.0));
        let g = assemble_graph(&cluster, GraphTopology::Knn { k: 4 }, &StatsDescriptor, false).unwrap();

        let coords = normalize_coordinates(&cluster.points, cluster.image_extent).unwrap();
        assert_eq!(g.edges, reference::brute_force_knn_edges(&coords, 4));
        let feats = compute_edge_features(&g.edges, &coords).unwrap();
        assert_eq!(g.edge_features, feats);
    }

    #[test]
    fn translation_leaves_edge_features_unchanged() {
        let points = seeded_points(29, 12);
        let scaled: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x * 50.0, y * 50.0)).collect();
        let shifted: Vec<(f64, f64)> = scaled.iter().map(|&(x, y)| (x + 25.0, y + 30.0)).collect();
        let extent = (200.0, 200.0);
        let a = compute_edge_features(
            &build_knn_graph(&normalize_coordinates(&scaled, extent).unwrap(), 3).unwrap(),
            &normalize_coordinates(&scaled, extent).unwrap(),
        )
        .unwrap();
        let b = compute_edge_features(
            &build_knn_graph(&normalize_coordinates(&shifted, extent).unwrap(), 3).unwrap(),
            &normalize_coordinates(&shifted, extent).unwrap(),
        )
        .unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn validate_rejects_undersized_clusters() {
        let cluster = cluster_of(vec![(1.0, 1.0), (2.0, 2.0)], (10.0, 10.0));
        assert!(matches!(
            cluster.validate(),
            Err(GraphError::TooFewPoints { min: 3, got: 2 })
        ));
    }

    #[test]
    fn symmetrize_adds_reverse_edges_once() {
        let edges = vec![(0, 1), (1, 0), (2, 1)];
        assert_eq!(symmetrize_edges(&edges), vec![(0, 1), (1, 0), (1, 2), (2, 1)]);
    }
}
