//! Graph convolutional layers over an ego subgraph: the edge-channel
//! attention layer with a GRU update, and simplified GCN / GAT / EGNN
//! baselines for ordering experiments.
//!
//! All layers are pure functions of (state, params) built on the autodiff
//! tape. Node and edge features arrive as per-node / per-edge tape vectors;
//! adjacency is the subgraph's `(neighbor, edge)` lists. No self-loops are
//! added anywhere: a node's own state enters only through the update cell.

use rand::Rng;

use crate::autodiff::{NodeId, ParamId, ParamSet, Tape, Tensor};
use crate::error::Result;
use crate::seq_encoder::{gru_step, GruIds};

/// `(neighbor index, edge index)` lists per node.
pub type Adjacency = [Vec<(usize, usize)>];

/// Shared convolution parameters: node/edge projections into `channels`
/// attention channels and the GRU update cell. One instance serves every
/// layer application of a model.
#[derive(Debug, Clone, Copy)]
pub struct EwsGcnIds {
    pub w_x: ParamId,
    pub w_e: ParamId,
    pub cell: GruIds,
}

impl EwsGcnIds {
    pub fn init<R: Rng>(
        ps: &mut ParamSet,
        prefix: &str,
        node_dim: usize,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        let s = 1.0 / (node_dim as f64).sqrt();
        let w_x = ps.add(format!("{prefix}.w_x"), Tensor::randn(&[node_dim, channels], s, rng));
        let w_e = ps.add(format!("{prefix}.w_e"), Tensor::randn(&[node_dim, channels], s, rng));
        let cell = GruIds::init(ps, &format!("{prefix}.cell"), channels, node_dim, rng);
        EwsGcnIds { w_x, w_e, cell }
    }
}

/// Per-node, per-neighbor channel attention vectors, aligned with the
/// adjacency lists they were computed from.
pub struct AttentionWeights {
    pub per_node: Vec<Vec<NodeId>>,
}

/// Channel attention from edge features only:
/// `α_ij^k = relu([e_ij W_E]_k) / Σ_l relu([e_il W_E]_k)`.
///
/// A channel whose denominator is zero (every incident logit nullified by
/// the ReLU) yields exactly zero weights for that channel.
pub fn ews_attention(
    tape: &mut Tape,
    ps: &ParamSet,
    w_e: ParamId,
    edge_feats: &[NodeId],
    adj: &Adjacency,
) -> Result<AttentionWeights> {
    let w = tape.param(ps, w_e);
    let logits: Vec<NodeId> = edge_feats
        .iter()
        .map(|&e| {
            let proj = tape.matmul(e, w)?;
            Ok(tape.relu(proj))
        })
        .collect::<Result<_>>()?;

    let mut per_node = Vec::with_capacity(adj.len());
    for neighbors in adj {
        if neighbors.is_empty() {
            per_node.push(Vec::new());
            continue;
        }
        let mut denom = logits[neighbors[0].1];
        for &(_, ei) in &neighbors[1..] {
            denom = tape.add(denom, logits[ei])?;
        }
        // dead channels divide by one instead of zero; their numerators are
        // already exactly zero
        let shift = Tensor::vector(
            tape.value(denom).data().iter().map(|&d| if d == 0.0 { 1.0 } else { 0.0 }).collect(),
        );
        let shift = tape.constant(shift);
        let safe = tape.add(denom, shift)?;
        let weights = neighbors
            .iter()
            .map(|&(_, ei)| tape.div(logits[ei], safe))
            .collect::<Result<_>>()?;
        per_node.push(weights);
    }
    Ok(AttentionWeights { per_node })
}

/// `a_i = Σ_j α_ij ⊙ (x_j W_X)`; the empty neighborhood gives zero.
pub fn ews_aggregate(
    tape: &mut Tape,
    ps: &ParamSet,
    att: &AttentionWeights,
    node_feats: &[NodeId],
    w_x: ParamId,
    adj: &Adjacency,
    channels: usize,
) -> Result<Vec<NodeId>> {
    let w = tape.param(ps, w_x);
    let projected: Vec<NodeId> =
        node_feats.iter().map(|&x| tape.matmul(x, w)).collect::<Result<_>>()?;

    let mut out = Vec::with_capacity(adj.len());
    for (i, neighbors) in adj.iter().enumerate() {
        if neighbors.is_empty() {
            out.push(tape.constant(Tensor::zeros(&[channels])));
            continue;
        }
        let mut acc = None;
        for (slot, &(j, _)) in neighbors.iter().enumerate() {
            let term = tape.mul(att.per_node[i][slot], projected[j])?;
            acc = Some(match acc {
                None => term,
                Some(prev) => tape.add(prev, term)?,
            });
        }
        out.push(acc.unwrap());
    }
    Ok(out)
}

/// GRU update `x̂_i = g(a_i, x_i)` keeping the embedding dimension.
pub fn ews_update(
    tape: &mut Tape,
    ps: &ParamSet,
    cell: &GruIds,
    aggregated: &[NodeId],
    node_feats: &[NodeId],
) -> Result<Vec<NodeId>> {
    aggregated
        .iter()
        .zip(node_feats)
        .map(|(&a, &x)| gru_step(tape, ps, cell, a, x))
        .collect()
}

/// One full attention-aggregate-update application with precomputed
/// attention (it depends only on edge features, so a model reuses it across
/// its layer applications).
pub fn ews_layer(
    tape: &mut Tape,
    ps: &ParamSet,
    ids: &EwsGcnIds,
    att: &AttentionWeights,
    node_feats: &[NodeId],
    adj: &Adjacency,
    channels: usize,
) -> Result<Vec<NodeId>> {
    let agg = ews_aggregate(tape, ps, att, node_feats, ids.w_x, adj, channels)?;
    ews_update(tape, ps, &ids.cell, &agg, node_feats)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Elu,
}

pub fn apply_activation(tape: &mut Tape, act: Activation, x: NodeId) -> NodeId {
    match act {
        Activation::Identity => x,
        Activation::Tanh => tape.tanh(x),
        Activation::Relu => tape.relu(x),
        Activation::Elu => tape.elu(x),
    }
}

/// Mean-of-neighbors convolution `x̂_i = σ((1/|N_i|) Σ_j x_j W)`.
/// Isolated nodes map to `σ(0)`.
pub fn gcn_layer(
    tape: &mut Tape,
    ps: &ParamSet,
    node_feats: &[NodeId],
    adj: &Adjacency,
    w: ParamId,
    act: Activation,
) -> Result<Vec<NodeId>> {
    let wn = tape.param(ps, w);
    let out_dim = ps.value(w).shape()[1];
    let mut out = Vec::with_capacity(adj.len());
    for neighbors in adj {
        if neighbors.is_empty() {
            let zero = tape.constant(Tensor::zeros(&[out_dim]));
            out.push(apply_activation(tape, act, zero));
            continue;
        }
        let mut acc = node_feats[neighbors[0].0];
        for &(j, _) in &neighbors[1..] {
            acc = tape.add(acc, node_feats[j])?;
        }
        let mean = tape.scale(acc, 1.0 / neighbors.len() as f64);
        let proj = tape.matmul(mean, wn)?;
        out.push(apply_activation(tape, act, proj));
    }
    Ok(out)
}

/// One attention head of the GAT baseline.
#[derive(Debug, Clone, Copy)]
pub struct GatHeadIds {
    pub w: ParamId,
    pub a_self: ParamId,
    pub a_neigh: ParamId,
}

#[derive(Debug, Clone)]
pub struct GatLayerIds {
    pub heads: Vec<GatHeadIds>,
    /// Concatenate head outputs; otherwise sum them.
    pub concat: bool,
}

impl GatLayerIds {
    pub fn init<R: Rng>(
        ps: &mut ParamSet,
        prefix: &str,
        in_dim: usize,
        head_dim: usize,
        n_heads: usize,
        concat: bool,
        rng: &mut R,
    ) -> Self {
        let ws = 1.0 / (in_dim as f64).sqrt();
        let as_ = 1.0 / (head_dim as f64).sqrt();
        let heads = (0..n_heads)
            .map(|h| GatHeadIds {
                w: ps.add(format!("{prefix}.h{h}.w"), Tensor::randn(&[in_dim, head_dim], ws, rng)),
                a_self: ps.add(format!("{prefix}.h{h}.a_self"), Tensor::randn(&[head_dim], as_, rng)),
                a_neigh: ps
                    .add(format!("{prefix}.h{h}.a_neigh"), Tensor::randn(&[head_dim], as_, rng)),
            })
            .collect();
        GatLayerIds { heads, concat }
    }

    pub fn out_dim(&self, ps: &ParamSet) -> usize {
        let head_dim = ps.value(self.heads[0].w).shape()[1];
        if self.concat {
            head_dim * self.heads.len()
        } else {
            head_dim
        }
    }
}

const GAT_LEAKY_SLOPE: f64 = 0.2;

/// Node-feature attention baseline: per head, scores
/// `leaky_relu(a_self·Wx_i + a_neigh·Wx_j)` softmax-normalized over the
/// neighborhood, ELU on the combined output.
pub fn gat_layer(
    tape: &mut Tape,
    ps: &ParamSet,
    ids: &GatLayerIds,
    node_feats: &[NodeId],
    adj: &Adjacency,
) -> Result<Vec<NodeId>> {
    let n = adj.len();
    let head_dim = ps.value(ids.heads[0].w).shape()[1];
    let mut per_head: Vec<Vec<NodeId>> = Vec::with_capacity(ids.heads.len());
    for head in &ids.heads {
        let wn = tape.param(ps, head.w);
        let a_self = tape.param(ps, head.a_self);
        let a_neigh = tape.param(ps, head.a_neigh);
        let wx: Vec<NodeId> =
            node_feats.iter().map(|&x| tape.matmul(x, wn)).collect::<Result<_>>()?;
        let s_self: Vec<NodeId> = wx.iter().map(|&v| tape.matmul(v, a_self)).collect::<Result<_>>()?;
        let s_neigh: Vec<NodeId> =
            wx.iter().map(|&v| tape.matmul(v, a_neigh)).collect::<Result<_>>()?;

        let mut outs = Vec::with_capacity(n);
        for (i, neighbors) in adj.iter().enumerate() {
            if neighbors.is_empty() {
                outs.push(tape.constant(Tensor::zeros(&[head_dim])));
                continue;
            }
            let scores: Vec<NodeId> = neighbors
                .iter()
                .map(|&(j, _)| {
                    let s = tape.add(s_self[i], s_neigh[j])?;
                    Ok(tape.leaky_relu(s, GAT_LEAKY_SLOPE))
                })
                .collect::<Result<_>>()?;
            // shift by the running max; softmax is invariant to the shift
            let max_v = scores
                .iter()
                .map(|&s| tape.value(s).item())
                .fold(f64::NEG_INFINITY, f64::max);
            let neg_max = tape.constant(Tensor::scalar(-max_v));
            let exps: Vec<NodeId> = scores
                .iter()
                .map(|&s| {
                    let shifted = tape.add(s, neg_max)?;
                    Ok(tape.exp(shifted))
                })
                .collect::<Result<_>>()?;
            let mut z = exps[0];
            for &e in &exps[1..] {
                z = tape.add(z, e)?;
            }
            let mut acc = None;
            for (slot, &(j, _)) in neighbors.iter().enumerate() {
                let alpha = tape.div(exps[slot], z)?;
                let term = tape.mul(alpha, wx[j])?;
                acc = Some(match acc {
                    None => term,
                    Some(prev) => tape.add(prev, term)?,
                });
            }
            outs.push(acc.unwrap());
        }
        per_head.push(outs);
    }

    (0..n)
        .map(|i| {
            let combined = if ids.concat {
                let parts: Vec<NodeId> = per_head.iter().map(|h| h[i]).collect();
                tape.concat(&parts)?
            } else {
                let mut acc = per_head[0][i];
                for h in &per_head[1..] {
                    acc = tape.add(acc, h[i])?;
                }
                acc
            };
            Ok(tape.elu(combined))
        })
        .collect()
}

/// EGNN-style baseline: per-channel attention scored from
/// `(x_i, x_j, e_ij)`, one shared projection matrix across channels.
#[derive(Debug, Clone, Copy)]
pub struct EgnnLayerIds {
    pub w: ParamId,
    /// `[2·node_dim + edge_dim, channels]` scoring weights.
    pub score: ParamId,
    pub channels: usize,
}

impl EgnnLayerIds {
    pub fn init<R: Rng>(
        ps: &mut ParamSet,
        prefix: &str,
        node_dim: usize,
        edge_dim: usize,
        out_dim: usize,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        let cat = 2 * node_dim + edge_dim;
        let w = ps.add(
            format!("{prefix}.w"),
            Tensor::randn(&[node_dim, out_dim], 1.0 / (node_dim as f64).sqrt(), rng),
        );
        let score = ps.add(
            format!("{prefix}.score"),
            Tensor::randn(&[cat, channels], 1.0 / (cat as f64).sqrt(), rng),
        );
        EgnnLayerIds { w, score, channels }
    }

    pub fn out_dim(&self, ps: &ParamSet) -> usize {
        self.channels * ps.value(self.w).shape()[1]
    }
}

pub fn egnn_layer(
    tape: &mut Tape,
    ps: &ParamSet,
    ids: &EgnnLayerIds,
    node_feats: &[NodeId],
    edge_feats: &[NodeId],
    adj: &Adjacency,
) -> Result<Vec<NodeId>> {
    let wn = tape.param(ps, ids.w);
    let score_w = tape.param(ps, ids.score);
    let d_out = ps.value(ids.w).shape()[1];
    let wx: Vec<NodeId> = node_feats.iter().map(|&x| tape.matmul(x, wn)).collect::<Result<_>>()?;

    let mut out = Vec::with_capacity(adj.len());
    for (i, neighbors) in adj.iter().enumerate() {
        if neighbors.is_empty() {
            out.push(tape.constant(Tensor::zeros(&[ids.channels * d_out])));
            continue;
        }
        let logits: Vec<NodeId> = neighbors
            .iter()
            .map(|&(j, ei)| {
                let cat = tape.concat(&[node_feats[i], node_feats[j], edge_feats[ei]])?;
                tape.matmul(cat, score_w)
            })
            .collect::<Result<_>>()?;
        let max_v = logits
            .iter()
            .flat_map(|&l| tape.value(l).data().iter().copied())
            .fold(f64::NEG_INFINITY, f64::max);
        let neg_max = tape.constant(Tensor::scalar(-max_v));
        let exps: Vec<NodeId> = logits
            .iter()
            .map(|&l| {
                let shifted = tape.add(l, neg_max)?;
                Ok(tape.exp(shifted))
            })
            .collect::<Result<_>>()?;
        let mut z = exps[0];
        for &e in &exps[1..] {
            z = tape.add(z, e)?;
        }
        let alphas: Vec<NodeId> = exps.iter().map(|&e| tape.div(e, z)).collect::<Result<_>>()?;

        let mut channel_outs = Vec::with_capacity(ids.channels);
        for k in 0..ids.channels {
            let mut acc = None;
            for (slot, &(j, _)) in neighbors.iter().enumerate() {
                let ak = tape.index(alphas[slot], k)?;
                let term = tape.mul(ak, wx[j])?;
                acc = Some(match acc {
                    None => term,
                    Some(prev) => tape.add(prev, term)?,
                });
            }
            channel_outs.push(acc.unwrap());
        }
        let cat = tape.concat(&channel_outs)?;
        out.push(tape.elu(cat));
    }
    Ok(out)
}
