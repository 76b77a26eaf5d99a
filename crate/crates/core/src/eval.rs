//! Evaluation: runs the model over a dataset split without recording
//! gradients and reports macro one-vs-rest AUC and accuracy for both tasks.

use std::path::Path;

use crate::autodiff::{Tape, Tensor};
use crate::dataset::{load_dataset, LoadedDataset};
use crate::datasynth::Split;
use crate::metrics::{
    accuracy, multiclass_auc, per_class_auc, MetricsReport, PerClassAuc, ScoredPredictions,
    TaskAccuracy,
};
use crate::model::{forward, load_checkpoint, GraphMode, ModelParams};
use crate::train::TrainError;

/// Per-node and per-graph class probabilities over a set of clusters.
pub struct SplitScores {
    pub node_scores: Vec<Vec<f64>>,
    pub node_labels: Vec<usize>,
    pub graph_scores: Vec<Vec<f64>>,
    pub graph_labels: Vec<usize>,
}

/// Forward pass over every cluster in `ids`, collecting softmax scores.
pub fn score_split(
    model: &ModelParams,
    ds: &LoadedDataset,
    ids: &[usize],
) -> Result<SplitScores, TrainError> {
    let mut node_scores = Vec::new();
    let mut node_labels = Vec::new();
    let mut graph_scores = Vec::new();
    let mut graph_labels = Vec::new();

    for &id in ids {
        let cluster = ds.graphs.get(id).ok_or(TrainError::MissingCluster { id })?;
        let need_knn = matches!(model.hyper.graph_mode, GraphMode::Multi | GraphMode::KnnOnly);
        let need_radius = matches!(
            model.hyper.graph_mode,
            GraphMode::Multi | GraphMode::RadiusOnly
        );
        let knn = match (need_knn, cluster.knn.as_ref()) {
            (true, None) => {
                return Err(TrainError::MissingTopology {
                    id,
                    kind: crate::graphs::TopologyKind::Knn,
                })
            }
            (true, Some(g)) => Some(g),
            (false, _) => None,
        };
        let radius = match (need_radius, cluster.radius.as_ref()) {
            (true, None) => {
                return Err(TrainError::MissingTopology {
                    id,
                    kind: crate::graphs::TopologyKind::Radius,
                })
            }
            (true, Some(g)) => Some(g),
            (false, _) => None,
        };
        let reference = knn.or(radius).expect("mode requires at least one graph");

        let mut tape = Tape::new();
        let binding = model.bind(&mut tape)?;
        tape.set_recording(false);
        let out = forward(&mut tape, model, &binding, knn, radius)?;
        let node_probs = tape.softmax_rows(out.node_logits)?;
        let graph_probs = tape.softmax_rows(out.graph_logits)?;

        let probs = tape.value(node_probs);
        for (row, &label) in (0..reference.n_nodes())
            .map(|r| probs.row(r))
            .zip(&reference.node_labels)
        {
            node_scores.push(row.to_vec());
            node_labels.push(label);
        }
        graph_scores.push(tape.value(graph_probs).row(0).to_vec());
        graph_labels.push(reference.graph_label);
    }

    Ok(SplitScores {
        node_scores,
        node_labels,
        graph_scores,
        graph_labels,
    })
}

/// Evaluates a model over the given cluster ids, producing the full report.
pub fn evaluate_model(
    model: &ModelParams,
    ds: &LoadedDataset,
    ids: &[usize],
) -> Result<MetricsReport, TrainError> {
    if ids.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let scores = score_split(model, ds, ids)?;

    let node_preds = ScoredPredictions::new(
        Tensor::from_rows(&scores.node_scores)?,
        scores.node_labels.clone(),
    )?;
    let graph_preds = ScoredPredictions::new(
        Tensor::from_rows(&scores.graph_scores)?,
        scores.graph_labels.clone(),
    )?;

    Ok(MetricsReport {
        distribution_auc: Some(multiclass_auc(&graph_preds)?),
        morphology_auc: Some(multiclass_auc(&node_preds)?),
        per_class_auc: PerClassAuc {
            distribution: per_class_auc(&graph_preds)?,
            morphology: per_class_auc(&node_preds)?,
        },
        accuracy: TaskAccuracy {
            distribution: accuracy(&graph_preds),
            morphology: accuracy(&node_preds),
        },
        n_nodes: scores.node_labels.len(),
        n_graphs: scores.graph_labels.len(),
    })
}

/// Loads a checkpoint and dataset, verifies that their dimensions agree,
/// and evaluates the requested split.
pub fn eval_checkpoint(
    checkpoint: &Path,
    data_dir: &Path,
    split: Split,
) -> Result<MetricsReport, TrainError> {
    let (model, _seed) = load_checkpoint(checkpoint)?;
    let ds = load_dataset(data_dir)?;
    let dataset_dim = ds.node_in_dim().ok_or(TrainError::EmptyDataset)?;
    if dataset_dim != model.hyper.node_in_dim {
        return Err(TrainError::DimensionMismatch {
            checkpoint: model.hyper.node_in_dim,
            dataset: dataset_dim,
        });
    }
    let ids = ds.manifest.ids(split).to_vec();
    evaluate_model(&model, &ds, &ids)
}

/// Renders a metrics report as deterministic pretty JSON.
pub fn report_to_json(report: &MetricsReport) -> String {
    let mut text = serde_json::to_string_pretty(report).expect("report serializes");
    text.push('\n');
    text
}
