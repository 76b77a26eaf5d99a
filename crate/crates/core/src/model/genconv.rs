//! GENConv-style message passing: ReLU + epsilon message construction,
//! per-channel softmax aggregation with temperature beta, norm-scaled
//! message combination before an MLP vertex update, and the pre-activation
//! residual block that stacks them.

use crate::autodiff::{Tape, Var};

use super::{GcnBlockBinding, MlpBinding, ModelError};

/// Per-edge messages: `relu(h_src + h_edge) + epsilon`, or `relu(h_src) +
/// epsilon` when there are no edge features. Strictly positive by
/// construction.
pub fn construct_messages(
    tape: &mut Tape,
    node_feats: Var,
    sources: &[usize],
    edge_feats: Option<Var>,
    epsilon: f64,
) -> Result<Var, ModelError> {
    let gathered = tape.gather_rows(node_feats, sources)?;
    let pre = match edge_feats {
        Some(e) => tape.add(gathered, e)?,
        None => gathered,
    };
    let activated = tape.relu(pre)?;
    let eps = tape.leaf(crate::autodiff::Tensor::scalar(epsilon))?;
    let shape = tape.value(activated).shape().to_vec();
    let eps_full = tape.broadcast(eps, &shape)?;
    Ok(tape.add(activated, eps_full)?)
}

/// Aggregates per-edge messages into per-node vectors with a per-channel
/// softmax over each destination's incoming messages, temperature `beta`.
/// Nodes with no incoming edges aggregate to the zero vector.
pub fn softmax_aggregate(
    tape: &mut Tape,
    messages: Var,
    destinations: &[usize],
    n_nodes: usize,
    beta: f64,
) -> Result<Var, ModelError> {
    Ok(tape.segment_softmax_weighted_sum(messages, destinations, n_nodes, beta)?)
}

/// Two-layer MLP with hidden expansion: `w2 * relu(w1 * x + b1) + b2`.
pub fn apply_mlp(tape: &mut Tape, x: Var, mlp: &MlpBinding) -> Result<Var, ModelError> {
    let rows = tape.value(x).shape()[0];
    let h1 = tape.matmul(x, mlp.w1)?;
    let b1_shape = [rows, tape.value(mlp.b1).shape()[1]];
    let b1 = tape.broadcast(mlp.b1, &b1_shape)?;
    let h1 = tape.add(h1, b1)?;
    let h1 = tape.relu(h1)?;
    let h2 = tape.matmul(h1, mlp.w2)?;
    let b2_shape = [rows, tape.value(mlp.b2).shape()[1]];
    let b2 = tape.broadcast(mlp.b2, &b2_shape)?;
    Ok(tape.add(h2, b2)?)
}

/// Message-normalized vertex update:
/// `MLP(h + s * ||h||_2 * m / ||m||_2)`, rows independently. Aggregated
/// messages with near-zero norm contribute nothing (the unit-rows guard),
/// so isolated nodes still get a well-defined update.
pub fn msg_norm_update(
    tape: &mut Tape,
    node_feats: Var,
    aggregated: Var,
    scale: Var,
    mlp: &MlpBinding,
) -> Result<Var, ModelError> {
    let shape = tape.value(node_feats).shape().to_vec();
    let (n, d) = (shape[0], shape[1]);

    let unit_msg = tape.unit_rows(aggregated)?;
    let h_norm = tape.rows_l2_norm(node_feats)?;
    let s = tape.broadcast(scale, &[n, 1])?;
    let row_scale = tape.mul(h_norm, s)?;
    let row_scale = tape.broadcast(row_scale, &[n, d])?;
    let term = tape.mul(row_scale, unit_msg)?;
    let combined = tape.add(node_feats, term)?;
    apply_mlp(tape, combined, mlp)
}

/// One GraphConv application: message construction, softmax aggregation,
/// norm-scaled MLP update.
#[allow(clippy::too_many_arguments)]
pub fn graph_conv(
    tape: &mut Tape,
    node_feats: Var,
    sources: &[usize],
    destinations: &[usize],
    n_nodes: usize,
    edge_feats: Option<Var>,
    block: &GcnBlockBinding,
    beta: f64,
    epsilon: f64,
) -> Result<Var, ModelError> {
    let messages = construct_messages(tape, node_feats, sources, edge_feats, epsilon)?;
    let aggregated = softmax_aggregate(tape, messages, destinations, n_nodes, beta)?;
    msg_norm_update(tape, node_feats, aggregated, block.msg_scale, &block.mlp)
}

/// Pre-activation residual block:
/// `H' = H + GraphConv(relu(layer_norm(H) * g + b))`.
#[allow(clippy::too_many_arguments)]
pub fn gcn_block(
    tape: &mut Tape,
    hidden: Var,
    sources: &[usize],
    destinations: &[usize],
    n_nodes: usize,
    edge_feats: Option<Var>,
    block: &GcnBlockBinding,
    beta: f64,
    epsilon: f64,
) -> Result<Var, ModelError> {
    let shape = tape.value(hidden).shape().to_vec();
    let normed = tape.layer_norm(hidden)?;
    let ln_scale = tape.broadcast(block.ln_scale, &shape)?;
    let normed = tape.mul(normed, ln_scale)?;
    let ln_bias = tape.broadcast(block.ln_bias, &shape)?;
    let normed = tape.add(normed, ln_bias)?;
    let activated = tape.relu(normed)?;
    let conv = graph_conv(
        tape,
        activated,
        sources,
        destinations,
        n_nodes,
        edge_feats,
        block,
        beta,
        epsilon,
    )?;
    Ok(tape.add(hidden, conv)?)
}
