//! The training loop: SGD with momentum over per-cluster steps, GradNorm
//! task-weight balancing in multitask mode, optional soft-target
//! distillation, a JSON-lines step log, and checkpointing. Everything is
//! seeded and single-threaded, so identical configs produce byte-identical
//! artifacts.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::config::{ConfigError, RunConfig, TaskMode};
use crate::dataset::{load_dataset, read_teacher_logits, LoadedDataset, TeacherLogits};
use crate::datasynth::DatasynthError;
use crate::graphs::{GraphError, SpatialGraph, TopologyKind};
use crate::metrics::MetricsError;
use crate::model::{
    forward, save_checkpoint, CheckpointError, ForwardOutput, GraphMode, ModelError, ModelParams,
};
use crate::multitask::{
    distill_loss, multitask_loss, task_gradient_norms, GradNormState, MultitaskError, TaskLosses,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Datasynth(#[from] DatasynthError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Multitask(#[from] MultitaskError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("training diverged to a non-finite value at step {step}")]
    Diverged { step: u64 },
    #[error("dataset has no cluster with id {id}")]
    MissingCluster { id: usize },
    #[error("cluster {id} lacks the {kind} topology required by this graph mode")]
    MissingTopology { id: usize, kind: TopologyKind },
    #[error("dataset is empty or the split has no ids")]
    EmptyDataset,
    #[error("checkpoint expects {checkpoint}-dimensional node features, dataset provides {dataset}")]
    DimensionMismatch { checkpoint: usize, dataset: usize },
    #[error("teacher logits line {line}: {reason}")]
    TeacherFile { line: usize, reason: String },
    #[error("distillation enabled but no teacher logits for cluster {id}")]
    TeacherMissing { id: usize },
}

/// One JSON line per optimization step. Single-task modes log only their
/// own loss; multitask logs the GradNorm trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    #[serde(rename = "L_m", skip_serializing_if = "Option::is_none")]
    pub l_m: Option<f64>,
    #[serde(rename = "L_d", skip_serializing_if = "Option::is_none")]
    pub l_d: Option<f64>,
    #[serde(rename = "w_m", skip_serializing_if = "Option::is_none")]
    pub w_m: Option<f64>,
    #[serde(rename = "w_d", skip_serializing_if = "Option::is_none")]
    pub w_d: Option<f64>,
    #[serde(rename = "G_m", skip_serializing_if = "Option::is_none")]
    pub g_m: Option<f64>,
    #[serde(rename = "G_d", skip_serializing_if = "Option::is_none")]
    pub g_d: Option<f64>,
    #[serde(rename = "L_grad", skip_serializing_if = "Option::is_none")]
    pub l_grad: Option<f64>,
}

/// Artifacts and summary of a finished training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint_json: PathBuf,
    pub log_path: PathBuf,
    pub steps: u64,
    pub first_epoch_mean_loss: Option<f64>,
    pub last_epoch_mean_loss: Option<f64>,
    pub final_task_weights: [f64; 2],
}

struct SgdMomentum {
    lr: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdMomentum {
    fn new(lr: f64, momentum: f64, model: &ModelParams) -> Self {
        let mut velocity = Vec::new();
        model.for_each(&mut |_, t| velocity.push(vec![0.0; t.numel()]));
        SgdMomentum {
            lr,
            momentum,
            velocity,
        }
    }

    fn step(&mut self, model: &mut ModelParams, grads: &[Tensor]) {
        let mut i = 0usize;
        model.for_each_mut(&mut |t| {
            let g = grads[i].data();
            let v = &mut self.velocity[i];
            let data = t.data_mut();
            for slot in 0..data.len() {
                v[slot] = self.momentum * v[slot] + g[slot];
                data[slot] -= self.lr * v[slot];
            }
            i += 1;
        });
    }
}

/// Graphs needed by one step under the configured graph mode.
fn cluster_graphs<'a>(
    ds: &'a LoadedDataset,
    id: usize,
    mode: GraphMode,
) -> Result<(Option<&'a SpatialGraph>, Option<&'a SpatialGraph>), TrainError> {
    let cluster = ds.graphs.get(id).ok_or(TrainError::MissingCluster { id })?;
    let need_knn = matches!(mode, GraphMode::Multi | GraphMode::KnnOnly);
    let need_radius = matches!(mode, GraphMode::Multi | GraphMode::RadiusOnly);
    let knn = if need_knn {
        Some(cluster.knn.as_ref().ok_or(TrainError::MissingTopology {
            id,
            kind: TopologyKind::Knn,
        })?)
    } else {
        None
    };
    let radius = if need_radius {
        Some(cluster.radius.as_ref().ok_or(TrainError::MissingTopology {
            id,
            kind: TopologyKind::Radius,
        })?)
    } else {
        None
    };
    Ok((knn, radius))
}

fn labels_of(knn: Option<&SpatialGraph>, radius: Option<&SpatialGraph>) -> (Vec<usize>, usize) {
    let g = knn.or(radius).expect("at least one graph per mode");
    (g.node_labels.clone(), g.graph_label)
}

struct StepLosses {
    total: Var,
    morphology: Var,
    distribution: Var,
}

#[allow(clippy::too_many_arguments)]
fn step_losses(
    tape: &mut Tape,
    out: &ForwardOutput,
    node_labels: &[usize],
    graph_label: usize,
    task_mode: TaskMode,
    weights: [f64; 2],
    teacher: Option<&TeacherLogits>,
    temperature: f64,
) -> Result<StepLosses, TrainError> {
    let morphology = tape.cross_entropy_from_logits(out.node_logits, node_labels)?;
    let distribution = tape.cross_entropy_from_logits(out.graph_logits, &[graph_label])?;
    let mut total = match task_mode {
        TaskMode::Multitask => multitask_loss(tape, morphology, distribution, weights)?,
        TaskMode::MorphologyOnly => morphology,
        TaskMode::DistributionOnly => distribution,
    };
    if let Some(teacher) = teacher {
        if matches!(task_mode, TaskMode::Multitask | TaskMode::MorphologyOnly) {
            let soft = distill_loss(tape, out.node_logits, &teacher.node_logits, temperature)?;
            total = tape.add(total, soft)?;
        }
        if matches!(task_mode, TaskMode::Multitask | TaskMode::DistributionOnly) {
            let soft = distill_loss(tape, out.graph_logits, &teacher.graph_logits, temperature)?;
            total = tape.add(total, soft)?;
        }
    }
    Ok(StepLosses {
        total,
        morphology,
        distribution,
    })
}

/// Trains per `config` on the dataset under `config.data_dir`, writing
/// `train_log.jsonl`, `checkpoint.json`, and `checkpoint.bin` to `out_dir`.
pub fn train(config: &RunConfig, out_dir: &Path) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let ds = load_dataset(Path::new(&config.data_dir))?;
    let node_in_dim = ds.node_in_dim().ok_or(TrainError::EmptyDataset)?;
    let (morph_classes, dist_classes) = ds.class_counts();
    let hyper = config.model_hyper(node_in_dim, morph_classes, dist_classes);

    let teachers = if config.distill.enabled {
        let path = config.distill.teacher_logits_path.as_ref().expect("validated");
        Some(read_teacher_logits(Path::new(path))?)
    } else {
        None
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = ModelParams::init(hyper, &mut rng);
    let mut optimizer = SgdMomentum::new(
        config.training.learning_rate,
        config.training.momentum,
        &model,
    );
    let mut gradnorm = GradNormState::new(config.training.alpha, config.training.weight_lr);

    let log_path = out_dir.join("train_log.jsonl");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);

    let train_ids = ds.manifest.train_ids.clone();
    if train_ids.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    // Fail fast if any required topology is missing.
    for &id in &train_ids {
        cluster_graphs(&ds, id, config.graph_mode)?;
    }

    let mut step: u64 = 0;
    let mut first_epoch_mean = None;
    let mut last_epoch_mean = None;
    let mut order = train_ids.clone();

    for epoch in 0..config.training.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for &id in &order {
            let result: Result<f64, TrainError> = (|| {
                let (knn, radius) = cluster_graphs(&ds, id, config.graph_mode)?;
                let (node_labels, graph_label) = labels_of(knn, radius);
                let teacher = match &teachers {
                    Some(map) => Some(map.get(&id).ok_or(TrainError::TeacherMissing { id })?),
                    None => None,
                };

                let mut tape = Tape::new();
                let binding = model.bind(&mut tape)?;
                let out = forward(&mut tape, &model, &binding, knn, radius)?;
                let weights = gradnorm.weights();
                let losses = step_losses(
                    &mut tape,
                    &out,
                    &node_labels,
                    graph_label,
                    config.task_mode,
                    weights,
                    teacher,
                    config.distill.temperature,
                )?;

                let l_m = tape.scalar_value(losses.morphology)?;
                let l_d = tape.scalar_value(losses.distribution)?;
                let total = tape.scalar_value(losses.total)?;

                let grads = tape.backward(losses.total)?;
                let grad_tensors: Vec<Tensor> = binding
                    .vars()
                    .iter()
                    .map(|v| grads.get(*v).expect("leaf gradients are materialized").clone())
                    .collect();
                optimizer.step(&mut model, &grad_tensors);

                let record = match config.task_mode {
                    TaskMode::Multitask => {
                        let snapshot = TaskLosses {
                            morphology: l_m,
                            distribution: l_d,
                        };
                        gradnorm.ensure_initial(snapshot)?;
                        let norms = task_gradient_norms(
                            &tape,
                            losses.morphology,
                            losses.distribution,
                            weights,
                            binding.fusion_w,
                        )?;
                        let targets = gradnorm.targets(norms, snapshot)?;
                        let l_grad = gradnorm.update(norms, targets);
                        LogRecord {
                            step,
                            l_m: Some(l_m),
                            l_d: Some(l_d),
                            w_m: Some(weights[0]),
                            w_d: Some(weights[1]),
                            g_m: Some(norms[0]),
                            g_d: Some(norms[1]),
                            l_grad: Some(l_grad),
                        }
                    }
                    TaskMode::MorphologyOnly => LogRecord {
                        step,
                        l_m: Some(l_m),
                        l_d: None,
                        w_m: None,
                        w_d: None,
                        g_m: None,
                        g_d: None,
                        l_grad: None,
                    },
                    TaskMode::DistributionOnly => LogRecord {
                        step,
                        l_m: None,
                        l_d: Some(l_d),
                        w_m: None,
                        w_d: None,
                        g_m: None,
                        g_d: None,
                        l_grad: None,
                    },
                };
                writeln!(log, "{}", serde_json::to_string(&record)?)?;
                Ok(total)
            })();
            let total = result.map_err(|e| match e {
                TrainError::Autodiff(AutodiffError::NonFinite { .. })
                | TrainError::Model(ModelError::Autodiff(AutodiffError::NonFinite { .. }))
                | TrainError::Multitask(MultitaskError::Autodiff(AutodiffError::NonFinite {
                    ..
                })) => TrainError::Diverged { step },
                other => other,
            })?;
            epoch_loss += total;
            step += 1;
        }
        let mean = epoch_loss / order.len() as f64;
        if epoch == 0 {
            first_epoch_mean = Some(mean);
        }
        last_epoch_mean = Some(mean);
    }

    log.flush()?;
    let checkpoint_json = save_checkpoint(out_dir, &model, config.seed)?;
    Ok(TrainOutcome {
        checkpoint_json,
        log_path,
        steps: step,
        first_epoch_mean_loss: first_epoch_mean,
        last_epoch_mean_loss: last_epoch_mean,
        final_task_weights: gradnorm.weights(),
    })
}
