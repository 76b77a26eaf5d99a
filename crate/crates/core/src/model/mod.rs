//! The multi-task deep GCN: per-stream input projections, stacked
//! residual GENConv blocks over the KNN and radius graphs, per-node fusion
//! of the stream embeddings, and linear node/graph classification heads.

mod checkpoint;
mod genconv;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use genconv::{
    apply_mlp, construct_messages, gcn_block, graph_conv, msg_norm_update, softmax_aggregate,
};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::graphs::SpatialGraph;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("graph streams disagree on node count: knn has {knn}, radius has {radius}")]
    NodeCountMismatch { knn: usize, radius: usize },
    #[error("forward pass for {mode:?} requires the {missing} graph")]
    MissingGraph { mode: GraphMode, missing: &'static str },
    #[error("node features have dimension {got}, model expects {expected}")]
    InputDimMismatch { expected: usize, got: usize },
}

/// Which graph streams feed the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphMode {
    Multi,
    KnnOnly,
    RadiusOnly,
}

/// Whether the two streams of a multi-graph model share parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamWeights {
    Independent,
    Shared,
}

/// How per-node stream embeddings are fused. Concatenation followed by a
/// linear projection is the only operator currently implemented; the enum
/// keeps the fusion step swappable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    ConcatProject,
}

/// Architecture hyperparameters. `beta` (aggregation temperature) and
/// `epsilon` (message floor) are fixed per run, not learned.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelHyper {
    pub node_in_dim: usize,
    pub edge_in_dim: usize,
    pub hidden: usize,
    pub depth: usize,
    pub beta: f64,
    pub epsilon: f64,
    pub morphology_classes: usize,
    pub distribution_classes: usize,
    pub graph_mode: GraphMode,
    pub stream_weights: StreamWeights,
    pub fusion: FusionMode,
}

impl ModelHyper {
    pub fn n_streams(&self) -> usize {
        match (self.graph_mode, self.stream_weights) {
            (GraphMode::Multi, StreamWeights::Independent) => 2,
            _ => 1,
        }
    }

    /// Width of the concatenated per-node embedding entering fusion.
    pub fn fusion_in_dim(&self) -> usize {
        match self.graph_mode {
            GraphMode::Multi => 2 * self.hidden,
            _ => self.hidden,
        }
    }
}

/// Parameters of one residual GENConv block.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnBlockParams {
    pub ln_scale: Tensor,
    pub ln_bias: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
    /// Learnable message scaling factor, initialized to 1.
    pub msg_scale: Tensor,
}

/// Parameters of one graph stream: input projections for node and edge
/// features plus the block stack.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamParams {
    pub node_proj_w: Tensor,
    pub node_proj_b: Tensor,
    pub edge_proj_w: Tensor,
    pub edge_proj_b: Tensor,
    pub blocks: Vec<GcnBlockParams>,
}

/// Full parameter set of the two-stream model with both heads. The fusion
/// projection is the last layer shared by both tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub hyper: ModelHyper,
    pub streams: Vec<StreamParams>,
    pub fusion_w: Tensor,
    pub fusion_b: Tensor,
    pub node_head_w: Tensor,
    pub node_head_b: Tensor,
    pub graph_head_w: Tensor,
    pub graph_head_b: Tensor,
}

fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen::<f64>() * 2.0 * limit - limit)
        .collect();
    Tensor::matrix(rows, cols, data).expect("xavier shape")
}

impl ModelParams {
    /// Seeded Xavier-uniform initialization; normalization scales start at
    /// one, biases and shifts at zero, message scales at one.
    pub fn init(hyper: ModelHyper, rng: &mut impl Rng) -> Self {
        let h = hyper.hidden;
        let streams = (0..hyper.n_streams())
            .map(|_| StreamParams {
                node_proj_w: xavier(rng, hyper.node_in_dim, h),
                node_proj_b: Tensor::zeros(&[1, h]),
                edge_proj_w: xavier(rng, hyper.edge_in_dim, h),
                edge_proj_b: Tensor::zeros(&[1, h]),
                blocks: (0..hyper.depth)
                    .map(|_| GcnBlockParams {
                        ln_scale: Tensor::ones(&[1, h]),
                        ln_bias: Tensor::zeros(&[1, h]),
                        mlp_w1: xavier(rng, h, 2 * h),
                        mlp_b1: Tensor::zeros(&[1, 2 * h]),
                        mlp_w2: xavier(rng, 2 * h, h),
                        mlp_b2: Tensor::zeros(&[1, h]),
                        msg_scale: Tensor::scalar(1.0),
                    })
                    .collect(),
            })
            .collect();
        ModelParams {
            hyper,
            streams,
            fusion_w: xavier(rng, hyper.fusion_in_dim(), h),
            fusion_b: Tensor::zeros(&[1, h]),
            node_head_w: xavier(rng, h, hyper.morphology_classes),
            node_head_b: Tensor::zeros(&[1, hyper.morphology_classes]),
            graph_head_w: xavier(rng, h, hyper.distribution_classes),
            graph_head_b: Tensor::zeros(&[1, hyper.distribution_classes]),
        }
    }

    /// Visits every parameter with a stable name, in canonical order.
    /// [`ModelBinding::vars`] yields the same order; keep them in sync.
    pub fn for_each(&self, f: &mut impl FnMut(String, &Tensor)) {
        for (i, s) in self.streams.iter().enumerate() {
            f(format!("stream{i}.node_proj.weight"), &s.node_proj_w);
            f(format!("stream{i}.node_proj.bias"), &s.node_proj_b);
            f(format!("stream{i}.edge_proj.weight"), &s.edge_proj_w);
            f(format!("stream{i}.edge_proj.bias"), &s.edge_proj_b);
            for (l, b) in s.blocks.iter().enumerate() {
                f(format!("stream{i}.block{l}.ln.scale"), &b.ln_scale);
                f(format!("stream{i}.block{l}.ln.bias"), &b.ln_bias);
                f(format!("stream{i}.block{l}.mlp.w1"), &b.mlp_w1);
                f(format!("stream{i}.block{l}.mlp.b1"), &b.mlp_b1);
                f(format!("stream{i}.block{l}.mlp.w2"), &b.mlp_w2);
                f(format!("stream{i}.block{l}.mlp.b2"), &b.mlp_b2);
                f(format!("stream{i}.block{l}.msg_scale"), &b.msg_scale);
            }
        }
        f("fusion.weight".into(), &self.fusion_w);
        f("fusion.bias".into(), &self.fusion_b);
        f("node_head.weight".into(), &self.node_head_w);
        f("node_head.bias".into(), &self.node_head_b);
        f("graph_head.weight".into(), &self.graph_head_w);
        f("graph_head.bias".into(), &self.graph_head_b);
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(&mut Tensor)) {
        for s in &mut self.streams {
            f(&mut s.node_proj_w);
            f(&mut s.node_proj_b);
            f(&mut s.edge_proj_w);
            f(&mut s.edge_proj_b);
            for b in &mut s.blocks {
                f(&mut b.ln_scale);
                f(&mut b.ln_bias);
                f(&mut b.mlp_w1);
                f(&mut b.mlp_b1);
                f(&mut b.mlp_w2);
                f(&mut b.mlp_b2);
                f(&mut b.msg_scale);
            }
        }
        f(&mut self.fusion_w);
        f(&mut self.fusion_b);
        f(&mut self.node_head_w);
        f(&mut self.node_head_b);
        f(&mut self.graph_head_w);
        f(&mut self.graph_head_b);
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.for_each(&mut |name, t| out.push((name, t.clone())));
        out
    }

    pub fn n_parameters(&self) -> usize {
        let mut total = 0;
        self.for_each(&mut |_, t| total += t.numel());
        total
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Result<ModelBinding, ModelError> {
        let mut streams = Vec::with_capacity(self.streams.len());
        for s in &self.streams {
            let mut blocks = Vec::with_capacity(s.blocks.len());
            for b in &s.blocks {
                blocks.push(GcnBlockBinding {
                    ln_scale: tape.leaf(b.ln_scale.clone())?,
                    ln_bias: tape.leaf(b.ln_bias.clone())?,
                    mlp: MlpBinding {
                        w1: tape.leaf(b.mlp_w1.clone())?,
                        b1: tape.leaf(b.mlp_b1.clone())?,
                        w2: tape.leaf(b.mlp_w2.clone())?,
                        b2: tape.leaf(b.mlp_b2.clone())?,
                    },
                    msg_scale: tape.leaf(b.msg_scale.clone())?,
                });
            }
            streams.push(StreamBinding {
                node_proj_w: tape.leaf(s.node_proj_w.clone())?,
                node_proj_b: tape.leaf(s.node_proj_b.clone())?,
                edge_proj_w: tape.leaf(s.edge_proj_w.clone())?,
                edge_proj_b: tape.leaf(s.edge_proj_b.clone())?,
                blocks,
            });
        }
        Ok(ModelBinding {
            streams,
            fusion_w: tape.leaf(self.fusion_w.clone())?,
            fusion_b: tape.leaf(self.fusion_b.clone())?,
            node_head_w: tape.leaf(self.node_head_w.clone())?,
            node_head_b: tape.leaf(self.node_head_b.clone())?,
            graph_head_w: tape.leaf(self.graph_head_w.clone())?,
            graph_head_b: tape.leaf(self.graph_head_b.clone())?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MlpBinding {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct GcnBlockBinding {
    pub ln_scale: Var,
    pub ln_bias: Var,
    pub mlp: MlpBinding,
    pub msg_scale: Var,
}

#[derive(Debug, Clone)]
pub struct StreamBinding {
    pub node_proj_w: Var,
    pub node_proj_b: Var,
    pub edge_proj_w: Var,
    pub edge_proj_b: Var,
    pub blocks: Vec<GcnBlockBinding>,
}

/// Tape handles for every model parameter, in the same traversal order as
/// [`ModelParams::for_each`].
#[derive(Debug, Clone)]
pub struct ModelBinding {
    pub streams: Vec<StreamBinding>,
    pub fusion_w: Var,
    pub fusion_b: Var,
    pub node_head_w: Var,
    pub node_head_b: Var,
    pub graph_head_w: Var,
    pub graph_head_b: Var,
}

impl ModelBinding {
    /// Parameter vars in canonical order; aligned with
    /// [`ModelParams::for_each`] and [`ModelParams::for_each_mut`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for s in &self.streams {
            out.push(s.node_proj_w);
            out.push(s.node_proj_b);
            out.push(s.edge_proj_w);
            out.push(s.edge_proj_b);
            for b in &s.blocks {
                out.push(b.ln_scale);
                out.push(b.ln_bias);
                out.push(b.mlp.w1);
                out.push(b.mlp.b1);
                out.push(b.mlp.w2);
                out.push(b.mlp.b2);
                out.push(b.msg_scale);
            }
        }
        out.push(self.fusion_w);
        out.push(self.fusion_b);
        out.push(self.node_head_w);
        out.push(self.node_head_b);
        out.push(self.graph_head_w);
        out.push(self.graph_head_b);
        out
    }
}

/// Everything the forward pass produces, as tape variables.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// `n x morphology_classes` per-node logits.
    pub node_logits: Var,
    /// `1 x distribution_classes` graph logits.
    pub graph_logits: Var,
    /// `n x hidden` fused per-node embeddings.
    pub node_embeddings: Var,
    /// `1 x hidden` mean-pooled graph embedding.
    pub graph_embedding: Var,
}

fn run_stream(
    tape: &mut Tape,
    stream: &StreamBinding,
    node_feats: Var,
    graph: &SpatialGraph,
    hyper: &ModelHyper,
) -> Result<Var, ModelError> {
    let n = graph.n_nodes();
    let sources = graph.sources();
    let destinations = graph.destinations();

    let edge_leaf = tape.leaf(graph.edge_features.clone())?;
    let e_proj = tape.matmul(edge_leaf, stream.edge_proj_w)?;
    let eb = tape.broadcast(stream.edge_proj_b, &[graph.n_edges(), hyper.hidden])?;
    let e_proj = tape.add(e_proj, eb)?;

    let mut x = tape.matmul(node_feats, stream.node_proj_w)?;
    let nb = tape.broadcast(stream.node_proj_b, &[n, hyper.hidden])?;
    x = tape.add(x, nb)?;

    for block in &stream.blocks {
        x = gcn_block(
            tape,
            x,
            &sources,
            &destinations,
            n,
            Some(e_proj),
            block,
            hyper.beta,
            hyper.epsilon,
        )?;
    }
    Ok(x)
}

/// Full forward pass. Multi-graph mode runs both streams on the shared node
/// features and fuses them per node; single-graph modes run one stream.
pub fn forward(
    tape: &mut Tape,
    model: &ModelParams,
    binding: &ModelBinding,
    knn: Option<&SpatialGraph>,
    radius: Option<&SpatialGraph>,
) -> Result<ForwardOutput, ModelError> {
    let hyper = &model.hyper;

    let graphs: Vec<&SpatialGraph> = match hyper.graph_mode {
        GraphMode::Multi => {
            let knn = knn.ok_or(ModelError::MissingGraph {
                mode: hyper.graph_mode,
                missing: "knn",
            })?;
            let radius = radius.ok_or(ModelError::MissingGraph {
                mode: hyper.graph_mode,
                missing: "radius",
            })?;
            if knn.n_nodes() != radius.n_nodes() {
                return Err(ModelError::NodeCountMismatch {
                    knn: knn.n_nodes(),
                    radius: radius.n_nodes(),
                });
            }
            vec![knn, radius]
        }
        GraphMode::KnnOnly => vec![knn.ok_or(ModelError::MissingGraph {
            mode: hyper.graph_mode,
            missing: "knn",
        })?],
        GraphMode::RadiusOnly => vec![radius.ok_or(ModelError::MissingGraph {
            mode: hyper.graph_mode,
            missing: "radius",
        })?],
    };

    let d_in = graphs[0].node_features.shape()[1];
    if d_in != hyper.node_in_dim {
        return Err(ModelError::InputDimMismatch {
            expected: hyper.node_in_dim,
            got: d_in,
        });
    }
    let n = graphs[0].n_nodes();
    let node_feats = tape.leaf(graphs[0].node_features.clone())?;

    let mut stream_outputs = Vec::with_capacity(graphs.len());
    for (i, graph) in graphs.iter().enumerate() {
        // Shared-weight streams reuse the single parameter set.
        let stream = &binding.streams[i.min(binding.streams.len() - 1)];
        stream_outputs.push(run_stream(tape, stream, node_feats, graph, hyper)?);
    }

    let fused_in = if stream_outputs.len() == 1 {
        stream_outputs[0]
    } else {
        tape.concat(&stream_outputs, 1)?
    };
    let mut node_embeddings = tape.matmul(fused_in, binding.fusion_w)?;
    let fb = tape.broadcast(binding.fusion_b, &[n, hyper.hidden])?;
    node_embeddings = tape.add(node_embeddings, fb)?;

    let mut node_logits = tape.matmul(node_embeddings, binding.node_head_w)?;
    let nhb = tape.broadcast(binding.node_head_b, &[n, hyper.morphology_classes])?;
    node_logits = tape.add(node_logits, nhb)?;

    let summed = tape.sum_axis(node_embeddings, 0)?;
    let graph_embedding = tape.scalar_mul(summed, 1.0 / n as f64)?;
    let mut graph_logits = tape.matmul(graph_embedding, binding.graph_head_w)?;
    let ghb = tape.broadcast(binding.graph_head_b, &[1, hyper.distribution_classes])?;
    graph_logits = tape.add(graph_logits, ghb)?;

    Ok(ForwardOutput {
        node_logits,
        graph_logits,
        node_embeddings,
        graph_embedding,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::TopologyKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const EPS: f64 = 1e-7;

    fn leaf_rows(tape: &mut Tape, rows: &[Vec<f64>]) -> Var {
        tape.leaf(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn message_construction_examples() {
        // relu(h_u + h_e) + eps
        let mut tape = Tape::new();
        let h = leaf_rows(&mut tape, &[vec![1.0, -2.0]]);
        let e = leaf_rows(&mut tape, &[vec![0.5, 0.5]]);
        let m = construct_messages(&mut tape, h, &[0], Some(e), EPS).unwrap();
        assert_eq!(tape.value(m).data(), &[1.5 + EPS, EPS]);

        // No edge features: relu(h_u) + eps, all-negative features floor at eps.
        let mut tape = Tape::new();
        let h = leaf_rows(&mut tape, &[vec![-3.0, -3.0]]);
        let m = construct_messages(&mut tape, h, &[0], None, EPS).unwrap();
        assert_eq!(tape.value(m).data(), &[EPS, EPS]);

        // Cancelling edge features also floor at eps.
        let mut tape = Tape::new();
        let h = leaf_rows(&mut tape, &[vec![2.0, -1.0]]);
        let e = leaf_rows(&mut tape, &[vec![-2.0, 1.0]]);
        let m = construct_messages(&mut tape, h, &[0], Some(e), EPS).unwrap();
        assert_eq!(tape.value(m).data(), &[EPS, EPS]);
    }

    #[test]
    fn messages_are_strictly_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let mut tape = Tape::new();
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..4).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect())
            .collect();
        let h = leaf_rows(&mut tape, &rows);
        let m = construct_messages(&mut tape, h, &[0, 1, 2, 3, 4, 5], None, EPS).unwrap();
        assert!(tape.value(m).data().iter().all(|&v| v >= EPS));
    }

    #[test]
    fn aggregation_beta_limits() {
        // Singleton: the message passes through untouched.
        let mut tape = Tape::new();
        let m = leaf_rows(&mut tape, &[vec![0.4, -0.7, 2.0]]);
        let agg = softmax_aggregate(&mut tape, m, &[0], 1, 3.0).unwrap();
        assert_eq!(tape.value(agg).data(), &[0.4, -0.7, 2.0]);

        // beta = 0: arithmetic mean.
        let mut tape = Tape::new();
        let m = leaf_rows(&mut tape, &[vec![1.0, 0.0], vec![3.0, 2.0]]);
        let agg = softmax_aggregate(&mut tape, m, &[0, 0], 1, 0.0).unwrap();
        for (got, want) in tape.value(agg).data().iter().zip(&[2.0, 1.0]) {
            assert!((got - want).abs() < 1e-12);
        }

        // Large beta: elementwise max.
        let mut tape = Tape::new();
        let m = leaf_rows(&mut tape, &[vec![1.0, 0.0], vec![3.0, 2.0]]);
        let agg = softmax_aggregate(&mut tape, m, &[0, 0], 1, 1e4).unwrap();
        for (got, want) in tape.value(agg).data().iter().zip(&[3.0, 2.0]) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    fn tiny_mlp(tape: &mut Tape, d: usize, zero: bool) -> MlpBinding {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut mk = |rows: usize, cols: usize| {
            let t = if zero {
                Tensor::zeros(&[rows, cols])
            } else {
                xavier(&mut rng, rows, cols)
            };
            tape.leaf(t).unwrap()
        };
        MlpBinding {
            w1: mk(d, 2 * d),
            b1: mk(1, 2 * d),
            w2: mk(2 * d, d),
            b2: mk(1, d),
        }
    }

    #[test]
    fn msg_norm_update_algebra() {
        // s = 0 suppresses the message: output = MLP(h).
        let mut tape = Tape::new();
        let h = leaf_rows(&mut tape, &[vec![1.0, 2.0], vec![-1.0, 0.5]]);
        let m = leaf_rows(&mut tape, &[vec![5.0, -3.0], vec![0.2, 0.8]]);
        let mlp = tiny_mlp(&mut tape, 2, false);
        let s0 = tape.leaf(Tensor::scalar(0.0)).unwrap();
        let out = msg_norm_update(&mut tape, h, m, s0, &mlp).unwrap();
        let direct = apply_mlp(&mut tape, h, &mlp).unwrap();
        assert_eq!(tape.value(out), tape.value(direct));

        // m = h, s = 1: output = MLP(2h).
        let mut tape = Tape::new();
        let h = leaf_rows(&mut tape, &[vec![3.0, 4.0]]);
        let m = leaf_rows(&mut tape, &[vec![3.0, 4.0]]);
        let mlp = tiny_mlp(&mut tape, 2, false);
        let s1 = tape.leaf(Tensor::scalar(1.0)).unwrap();
        let out = msg_norm_update(&mut tape, h, m, s1, &mlp).unwrap();
        let two_h = leaf_rows(&mut tape, &[vec![6.0, 8.0]]);
        let direct = apply_mlp(&mut tape, two_h, &mlp).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(tape.value(direct).data()) {
            assert!((a - b).abs() < 1e-12);
        }

        // h = 0: the ||h|| factor kills the message, output = MLP(0).
        let mut tape = Tape::new();
        let h = leaf_rows(&mut tape, &[vec![0.0, 0.0]]);
        let m = leaf_rows(&mut tape, &[vec![9.0, -9.0]]);
        let mlp = tiny_mlp(&mut tape, 2, false);
        let s1 = tape.leaf(Tensor::scalar(1.0)).unwrap();
        let out = msg_norm_update(&mut tape, h, m, s1, &mlp).unwrap();
        let zero = leaf_rows(&mut tape, &[vec![0.0, 0.0]]);
        let direct = apply_mlp(&mut tape, zero, &mlp).unwrap();
        assert_eq!(tape.value(out), tape.value(direct));
    }

    fn zeroed_block(tape: &mut Tape, d: usize) -> GcnBlockBinding {
        GcnBlockBinding {
            ln_scale: tape.leaf(Tensor::ones(&[1, d])).unwrap(),
            ln_bias: tape.leaf(Tensor::zeros(&[1, d])).unwrap(),
            mlp: tiny_mlp(tape, d, true),
            msg_scale: tape.leaf(Tensor::scalar(0.0)).unwrap(),
        }
    }

    #[test]
    fn residual_block_with_zero_conv_is_identity() {
        let mut tape = Tape::new();
        let h = leaf_rows(&mut tape, &[vec![0.3, -1.2, 0.9], vec![2.0, 0.1, -0.4]]);
        let block = zeroed_block(&mut tape, 3);
        let out = gcn_block(&mut tape, h, &[0, 1], &[1, 0], 2, None, &block, 1.0, EPS).unwrap();
        assert_eq!(tape.value(out), tape.value(h));
    }

    #[test]
    fn isolated_node_block_is_well_defined() {
        let mut tape = Tape::new();
        let h = leaf_rows(&mut tape, &[vec![0.5, -0.5, 1.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = GcnBlockBinding {
            ln_scale: tape.leaf(Tensor::ones(&[1, 3])).unwrap(),
            ln_bias: tape.leaf(Tensor::zeros(&[1, 3])).unwrap(),
            mlp: MlpBinding {
                w1: tape.leaf(xavier(&mut rng, 3, 6)).unwrap(),
                b1: tape.leaf(Tensor::zeros(&[1, 6])).unwrap(),
                w2: tape.leaf(xavier(&mut rng, 6, 3)).unwrap(),
                b2: tape.leaf(Tensor::zeros(&[1, 3])).unwrap(),
            },
            msg_scale: tape.leaf(Tensor::scalar(1.0)).unwrap(),
        };
        // No edges at all: the aggregated message is zero and the residual
        // path is H + MLP(relu(layer_norm(H))).
        let out = gcn_block(&mut tape, h, &[], &[], 1, None, &block, 1.0, EPS).unwrap();
        assert!(tape.value(out).all_finite());
        let loss = tape.sum_all(out).unwrap();
        assert!(tape.backward(loss).is_ok());
    }

    fn tiny_hyper(mode: GraphMode, depth: usize) -> ModelHyper {
        ModelHyper {
            node_in_dim: 4,
            edge_in_dim: 2,
            hidden: 6,
            depth,
            beta: 1.0,
            epsilon: EPS,
            morphology_classes: 4,
            distribution_classes: 5,
            graph_mode: mode,
            stream_weights: StreamWeights::Independent,
            fusion: FusionMode::ConcatProject,
        }
    }

    fn random_graph(seed: u64, n: usize, topology: TopologyKind) -> SpatialGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen(), rng.gen())).collect();
        let edges = match topology {
            TopologyKind::Knn => crate::graphs::build_knn_graph(&points, 3).unwrap(),
            TopologyKind::Radius => crate::graphs::build_radius_graph(&points, 0.5).unwrap(),
        };
        let edge_features = crate::graphs::compute_edge_features(&edges, &points).unwrap();
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..4).map(|_| rng.gen::<f64>() - 0.5).collect())
            .collect();
        SpatialGraph {
            topology,
            node_features: Tensor::from_rows(&rows).unwrap(),
            edges,
            edge_features,
            node_labels: (0..n).map(|i| i % 4).collect(),
            graph_label: 2,
        }
    }

    #[test]
    fn two_blocks_equal_manual_composition() {
        let graph = random_graph(10, 10, TopologyKind::Knn);
        let hyper = tiny_hyper(GraphMode::KnnOnly, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = ModelParams::init(hyper, &mut rng);

        let mut tape = Tape::new();
        let binding = model.bind(&mut tape).unwrap();
        let stacked = forward(&mut tape, &model, &binding, Some(&graph), None).unwrap();

        // Manual: project, apply the two blocks one by one, fuse, head.
        let mut tape2 = Tape::new();
        let binding2 = model.bind(&mut tape2).unwrap();
        let stream = &binding2.streams[0];
        let feats = tape2.leaf(graph.node_features.clone()).unwrap();
        let n = graph.n_nodes();
        let e = tape2.leaf(graph.edge_features.clone()).unwrap();
        let e_proj = tape2.matmul(e, stream.edge_proj_w).unwrap();
        let eb = tape2.broadcast(stream.edge_proj_b, &[graph.n_edges(), hyper.hidden]).unwrap();
        let e_proj = tape2.add(e_proj, eb).unwrap();
        let mut x = tape2.matmul(feats, stream.node_proj_w).unwrap();
        let nb = tape2.broadcast(stream.node_proj_b, &[n, hyper.hidden]).unwrap();
        x = tape2.add(x, nb).unwrap();
        let (src, dst) = (graph.sources(), graph.destinations());
        x = gcn_block(&mut tape2, x, &src, &dst, n, Some(e_proj), &stream.blocks[0], 1.0, EPS).unwrap();
        x = gcn_block(&mut tape2, x, &src, &dst, n, Some(e_proj), &stream.blocks[1], 1.0, EPS).unwrap();
        let mut emb = tape2.matmul(x, binding2.fusion_w).unwrap();
        let fb = tape2.broadcast(binding2.fusion_b, &[n, hyper.hidden]).unwrap();
        emb = tape2.add(emb, fb).unwrap();

        assert_eq!(tape.value(stacked.node_embeddings), tape2.value(emb));
    }

    #[test]
    fn identical_streams_on_identical_graphs_duplicate_embeddings() {
        let graph = random_graph(20, 8, TopologyKind::Knn);
        let hyper = tiny_hyper(GraphMode::Multi, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = ModelParams::init(hyper, &mut rng);
        model.streams[1] = model.streams[0].clone();

        let mut tape = Tape::new();
        let binding = model.bind(&mut tape).unwrap();
        let mut radius = graph.clone();
        radius.topology = TopologyKind::Radius;
        let out = forward(&mut tape, &model, &binding, Some(&graph), Some(&radius)).unwrap();

        // The concat input to fusion is [z | z]; check through node
        // embeddings by comparing against a single-stream model with a
        // doubled fusion block layout.
        let emb = tape.value(out.node_embeddings);
        assert!(emb.all_finite());

        // Directly inspect the stream outputs by rebuilding them.
        let mut tape2 = Tape::new();
        let binding2 = model.bind(&mut tape2).unwrap();
        let feats = tape2.leaf(graph.node_features.clone()).unwrap();
        let z0 = run_stream(&mut tape2, &binding2.streams[0], feats, &graph, &hyper).unwrap();
        let z1 = run_stream(&mut tape2, &binding2.streams[1], feats, &radius, &hyper).unwrap();
        assert_eq!(tape2.value(z0), tape2.value(z1));
    }

    #[test]
    fn depth_zero_pipeline_is_well_formed() {
        let knn = random_graph(30, 6, TopologyKind::Knn);
        let radius = random_graph(31, 6, TopologyKind::Radius);
        let mut radius = radius;
        radius.node_features = knn.node_features.clone();
        let hyper = tiny_hyper(GraphMode::Multi, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = ModelParams::init(hyper, &mut rng);
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape).unwrap();
        let out = forward(&mut tape, &model, &binding, Some(&knn), Some(&radius)).unwrap();
        assert_eq!(tape.value(out.node_logits).shape(), &[6, 4]);
        assert_eq!(tape.value(out.graph_logits).shape(), &[1, 5]);
    }

    #[test]
    fn node_count_mismatch_is_an_error() {
        let knn = random_graph(40, 6, TopologyKind::Knn);
        let radius = random_graph(41, 7, TopologyKind::Radius);
        let hyper = tiny_hyper(GraphMode::Multi, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = ModelParams::init(hyper, &mut rng);
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape).unwrap();
        assert!(matches!(
            forward(&mut tape, &model, &binding, Some(&knn), Some(&radius)),
            Err(ModelError::NodeCountMismatch { knn: 6, radius: 7 })
        ));
    }

    #[test]
    fn permutation_equivariance_on_seeded_instance() {
        let n = 9;
        let knn = random_graph(50, n, TopologyKind::Knn);
        let mut radius = random_graph(51, n, TopologyKind::Radius);
        radius.node_features = knn.node_features.clone();

        let hyper = tiny_hyper(GraphMode::Multi, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = ModelParams::init(hyper, &mut rng);

        let mut tape = Tape::new();
        let binding = model.bind(&mut tape).unwrap();
        let base = forward(&mut tape, &model, &binding, Some(&knn), Some(&radius)).unwrap();

        // Apply a fixed permutation to nodes and relabel edges accordingly.
        let perm: Vec<usize> = vec![3, 7, 0, 5, 1, 8, 2, 6, 4];
        let mut inv = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let permute = |g: &SpatialGraph| -> SpatialGraph {
            let rows: Vec<Vec<f64>> = perm.iter().map(|&old| g.node_features.row(old).to_vec()).collect();
            let mut edges: Vec<(usize, usize)> = g.edges.iter().map(|&(u, v)| (inv[u], inv[v])).collect();
            let mut ef: Vec<Vec<f64>> = g
                .edge_features
                .data()
                .chunks(2)
                .map(|c| c.to_vec())
                .collect();
            let mut paired: Vec<((usize, usize), Vec<f64>)> = edges.drain(..).zip(ef.drain(..)).collect();
            paired.sort_by_key(|(e, _)| *e);
            let (edges, ef): (Vec<_>, Vec<_>) = paired.into_iter().unzip();
            SpatialGraph {
                topology: g.topology,
                node_features: Tensor::from_rows(&rows).unwrap(),
                edges,
                edge_features: Tensor::from_rows(&ef).unwrap(),
                node_labels: perm.iter().map(|&old| g.node_labels[old]).collect(),
                graph_label: g.graph_label,
            }
        };
        let knn_p = permute(&knn);
        let radius_p = permute(&radius);

        let mut tape_p = Tape::new();
        let binding_p = model.bind(&mut tape_p).unwrap();
        let permuted = forward(&mut tape_p, &model, &binding_p, Some(&knn_p), Some(&radius_p)).unwrap();

        let base_logits = tape.value(base.node_logits);
        let perm_logits = tape_p.value(permuted.node_logits);
        for new in 0..n {
            for c in 0..4 {
                let drift = (perm_logits.at2(new, c) - base_logits.at2(perm[new], c)).abs();
                assert!(drift < 1e-9, "node logit drift {drift}");
            }
        }
        let bg = tape.value(base.graph_logits);
        let pg = tape_p.value(permuted.graph_logits);
        for c in 0..5 {
            assert!((bg.at2(0, c) - pg.at2(0, c)).abs() < 1e-9);
        }
    }

    #[test]
    fn binding_var_order_matches_param_traversal() {
        let hyper = tiny_hyper(GraphMode::Multi, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = ModelParams::init(hyper, &mut rng);
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape).unwrap();
        let vars = binding.vars();
        let mut shapes = Vec::new();
        model.for_each(&mut |_, t| shapes.push(t.shape().to_vec()));
        assert_eq!(vars.len(), shapes.len());
        for (v, shape) in vars.iter().zip(&shapes) {
            assert_eq!(tape.value(*v).shape(), shape.as_slice());
        }
        // And the values themselves agree pairwise.
        let mut tensors = Vec::new();
        model.for_each(&mut |_, t| tensors.push(t.clone()));
        for (v, t) in vars.iter().zip(&tensors) {
            assert_eq!(tape.value(*v), t);
        }
    }
}
