//! Dataset plumbing shared by the CLI commands and tests: generating a
//! graph dataset directory from a run config, loading it back, and the
//! teacher-logits side file used by distillation.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::config::RunConfig;
use crate::datasynth::{self, ClusterProvenance, SplitManifest};
use crate::graphs::{
    assemble_graph, read_dataset, write_dataset, GraphDataset, GraphTopology, StatsDescriptor,
};
use crate::train::TrainError;

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const SPLIT_FILE: &str = "split.json";

/// A graph dataset directory loaded into memory.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub graphs: GraphDataset,
    pub manifest: SplitManifest,
}

impl LoadedDataset {
    /// Feature width of the node matrices (uniform across clusters).
    pub fn node_in_dim(&self) -> Option<usize> {
        self.graphs
            .clusters
            .values()
            .find_map(|c| c.any())
            .map(|g| g.node_features.shape()[1])
    }

    /// (morphology classes, distribution classes) implied by the labels.
    pub fn class_counts(&self) -> (usize, usize) {
        let mut morph = 0usize;
        let mut dist = 0usize;
        for cluster in self.graphs.clusters.values() {
            if let Some(g) = cluster.any() {
                for &l in &g.node_labels {
                    morph = morph.max(l + 1);
                }
                dist = dist.max(g.graph_label + 1);
            }
        }
        (morph.max(2), dist.max(2))
    }
}

/// Generates the synthetic clusters for `config`, assembles both graph
/// topologies per cluster, and writes `dataset.jsonl` + `split.json` into
/// `out_dir`. Returns the provenance of each cluster in id order.
pub fn generate_to_dir(
    config: &RunConfig,
    out_dir: &Path,
) -> Result<Vec<ClusterProvenance>, TrainError> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let (clusters, provenance, manifest) = datasynth::generate_dataset(&config.generator)?;

    let descriptor = StatsDescriptor;
    let mut dataset = GraphDataset::default();
    for (id, cluster) in clusters.iter().enumerate() {
        let knn = assemble_graph(
            cluster,
            GraphTopology::Knn { k: config.graph.k },
            &descriptor,
            config.graph.symmetrize,
        )?;
        let radius = assemble_graph(
            cluster,
            GraphTopology::Radius { radius: config.graph.r },
            &descriptor,
            false,
        )?;
        dataset.insert(id, knn);
        dataset.insert(id, radius);
    }
    write_dataset(&out_dir.join(DATASET_FILE), &dataset)?;
    datasynth::write_split_manifest(&out_dir.join(SPLIT_FILE), &manifest)?;
    Ok(provenance)
}

/// Loads `dataset.jsonl` and `split.json` from a dataset directory.
pub fn load_dataset(data_dir: &Path) -> Result<LoadedDataset, TrainError> {
    let graphs = read_dataset(&data_dir.join(DATASET_FILE))?;
    let manifest = datasynth::read_split_manifest(&data_dir.join(SPLIT_FILE))?;
    Ok(LoadedDataset { graphs, manifest })
}

/// Teacher outputs for one cluster, used as soft distillation targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherLogits {
    /// `n x morphology_classes`.
    pub node_logits: Tensor,
    /// `1 x distribution_classes`.
    pub graph_logits: Tensor,
}

#[derive(Debug, Serialize, Deserialize)]
struct TeacherRecord {
    id: usize,
    node_logits: Vec<Vec<f64>>,
    graph_logits: Vec<f64>,
}

/// Reads a JSON-lines teacher file `{id, node_logits, graph_logits}`.
pub fn read_teacher_logits(path: &Path) -> Result<BTreeMap<usize, TeacherLogits>, TrainError> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut out = BTreeMap::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TeacherRecord =
            serde_json::from_str(&line).map_err(|e| TrainError::TeacherFile {
                line: i + 1,
                reason: e.to_string(),
            })?;
        let node_logits = Tensor::from_rows(&record.node_logits).map_err(|e| TrainError::TeacherFile {
            line: i + 1,
            reason: e.to_string(),
        })?;
        let width = record.graph_logits.len();
        let graph_logits =
            Tensor::matrix(1, width, record.graph_logits).map_err(|e| TrainError::TeacherFile {
                line: i + 1,
                reason: e.to_string(),
            })?;
        out.insert(
            record.id,
            TeacherLogits {
                node_logits,
                graph_logits,
            },
        );
    }
    Ok(out)
}

/// Writes teacher logits as JSON lines, ids ascending.
pub fn write_teacher_logits(
    path: &Path,
    teachers: &BTreeMap<usize, TeacherLogits>,
) -> Result<(), TrainError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (&id, t) in teachers {
        let node_logits: Vec<Vec<f64>> = (0..t.node_logits.shape()[0])
            .map(|r| t.node_logits.row(r).to_vec())
            .collect();
        let record = TeacherRecord {
            id,
            node_logits,
            graph_logits: t.graph_logits.data().to_vec(),
        };
        writeln!(file, "{}", serde_json::to_string(&record)?)?;
    }
    file.flush()?;
    Ok(())
}

/// Convenience for tests: a fresh dataset directory for `config`, returning
/// its path inside `root`.
pub fn ensure_dataset(config: &RunConfig, root: &Path) -> Result<PathBuf, TrainError> {
    let dir = root.join("data");
    generate_to_dir(config, &dir)?;
    Ok(dir)
}
