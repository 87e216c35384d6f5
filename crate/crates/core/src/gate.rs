//! Fuse attentive gate: moves global-graph knowledge into local node states.
//!
//! Four stages per transfer: sequence-aware fusion builds a `D x D` attention
//! map from the two sequence embeddings, self-attentive aggregation mixes each
//! node's local and global state, neighbour-attentive aggregation pools the
//! node's global neighbours, and a GRU unit fuses the two aggregates.

use crate::error::{Error, Result};
use crate::graph::NodeKey;
use crate::params::{ParamId, ParameterStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct FusionParams {
    /// `2D x D²`
    pub w_gen: ParamId,
    /// `1 x D²`
    pub b_gen: ParamId,
    pub w_self: ParamId,
    /// `D x 1`
    pub v: ParamId,
    pub w_nei: ParamId,
}

/// GRU weights, each `2D x D`.
#[derive(Clone, Copy, Debug)]
pub struct GruParams {
    pub w_gz: ParamId,
    pub w_gr: ParamId,
    pub w_gh: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub enum GateParams {
    /// The full fuse attentive gate.
    Attentive { fusion: FusionParams, gru: GruParams },
    /// Ablation: the GRU alone, fed the global state in place of the neighbour aggregate.
    PlainGru(GruParams),
}

impl GruParams {
    fn register(store: &mut ParameterStore, prefix: &str, dim: usize) -> Result<Self> {
        Ok(GruParams {
            w_gz: store.insert_uniform(&format!("{prefix}.w_gz"), 2 * dim, dim, dim)?,
            w_gr: store.insert_uniform(&format!("{prefix}.w_gr"), 2 * dim, dim, dim)?,
            w_gh: store.insert_uniform(&format!("{prefix}.w_gh"), 2 * dim, dim, dim)?,
        })
    }
}

impl GateParams {
    pub fn register(store: &mut ParameterStore, prefix: &str, dim: usize, plain: bool) -> Result<Self> {
        if plain {
            return Ok(GateParams::PlainGru(GruParams::register(store, prefix, dim)?));
        }
        let fusion = FusionParams {
            w_gen: store.insert_uniform(&format!("{prefix}.w_gen"), 2 * dim, dim * dim, dim)?,
            b_gen: store.insert_uniform(&format!("{prefix}.b_gen"), 1, dim * dim, dim)?,
            w_self: store.insert_uniform(&format!("{prefix}.w_self"), dim, dim, dim)?,
            v: store.insert_uniform(&format!("{prefix}.v"), dim, 1, dim)?,
            w_nei: store.insert_uniform(&format!("{prefix}.w_nei"), dim, dim, dim)?,
        };
        Ok(GateParams::Attentive {
            fusion,
            gru: GruParams::register(store, prefix, dim)?,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        match self {
            GateParams::Attentive { fusion, gru } => vec![
                fusion.w_gen,
                fusion.b_gen,
                fusion.w_self,
                fusion.v,
                fusion.w_nei,
                gru.w_gz,
                gru.w_gr,
                gru.w_gh,
            ],
            GateParams::PlainGru(gru) => vec![gru.w_gz, gru.w_gr, gru.w_gh],
        }
    }
}

/// `W_att = reshape(W_gen [SE_g, SE_l] + b_gen)` as a `D x D` matrix.
pub fn sequence_fusion(
    tape: &mut Tape,
    store: &ParameterStore,
    se_global: Var,
    se_local: Var,
    params: &FusionParams,
) -> Result<Var> {
    let (g, l) = (tape.value(se_global).shape().to_vec(), tape.value(se_local).shape().to_vec());
    if g != l || g[0] != 1 {
        return Err(Error::dim("sequence_fusion", &g, &l));
    }
    let dim = g[1];
    let w_gen = tape.param(store, params.w_gen);
    let b_gen = tape.param(store, params.b_gen);
    let cat = tape.concat_cols(&[se_global, se_local])?;
    let flat = tape.matmul(cat, w_gen)?;
    let flat = tape.add(flat, b_gen)?;
    tape.reshape(flat, &[dim, dim])
}

/// Self-attentive aggregation for `m` nodes at once (`m x D` inputs):
///
/// ```text
/// α_l = σ(h_l W_att + h_l W_self) · v
/// α_g = σ(h_g W_att + h_l W_self) · v
/// h̃   = α_l h_l + α_g h_g
/// ```
///
/// The two coefficients are not normalized against each other.
pub fn self_attentive(
    tape: &mut Tape,
    store: &ParameterStore,
    h_local: Var,
    h_global: Var,
    w_att: Var,
    params: &FusionParams,
) -> Result<Var> {
    let w_self = tape.param(store, params.w_self);
    let v = tape.param(store, params.v);
    let own = tape.matmul(h_local, w_self)?;
    let att_l = tape.matmul(h_local, w_att)?;
    let att_g = tape.matmul(h_global, w_att)?;
    let el = tape.add(att_l, own)?;
    let el = tape.sigmoid(el);
    let eg = tape.add(att_g, own)?;
    let eg = tape.sigmoid(eg);
    let alpha_l = tape.matmul(el, v)?;
    let alpha_g = tape.matmul(eg, v)?;
    let part_l = tape.mul_col(h_local, alpha_l)?;
    let part_g = tape.mul_col(h_global, alpha_g)?;
    tape.add(part_l, part_g)
}

/// Neighbour-attentive aggregation for one node.
///
/// `h_local` is the node's `1 x D` local state and `neighbours` the `k x D`
/// global states of its first-order neighbours. Returns `(ĥ, α)` with
/// `α_i = softmax_i(h_g,i W_nei · h_l)` and `ĥ = Σ α_i h_g,i W_att`.
pub fn neighbour_attentive(
    tape: &mut Tape,
    store: &ParameterStore,
    h_local: Var,
    neighbours: Var,
    w_att: Var,
    params: &FusionParams,
) -> Result<(Var, Var)> {
    let w_nei = tape.param(store, params.w_nei);
    let keys = tape.matmul(neighbours, w_nei)?;
    let scores = tape.matmul_nt(h_local, keys)?;
    let alpha = tape.softmax_rows(scores)?;
    let projected = tape.matmul(neighbours, w_att)?;
    let pooled = tape.matmul(alpha, projected)?;
    Ok((pooled, alpha))
}

/// GRU fusion of the aggregates, row-wise over `m x D` inputs:
///
/// ```text
/// z   = σ([ĥ, h̃] W_gz)
/// r   = σ([ĥ, h̃] W_gr)
/// h_x = tanh([ĥ, r ⊙ h̃] W_gh)
/// h̄   = (1 - z) ⊙ h̃ + z ⊙ h_x
/// ```
pub fn gru_fuse(tape: &mut Tape, store: &ParameterStore, h_hat: Var, h_tilde: Var, params: &GruParams) -> Result<Var> {
    let w_gz = tape.param(store, params.w_gz);
    let w_gr = tape.param(store, params.w_gr);
    let w_gh = tape.param(store, params.w_gh);
    let cat = tape.concat_cols(&[h_hat, h_tilde])?;
    let z = tape.matmul(cat, w_gz)?;
    let z = tape.sigmoid(z);
    let r = tape.matmul(cat, w_gr)?;
    let r = tape.sigmoid(r);
    let rh = tape.mul(r, h_tilde)?;
    let cat2 = tape.concat_cols(&[h_hat, rh])?;
    let hx = tape.matmul(cat2, w_gh)?;
    let hx = tape.tanh(hx);
    let keep = tape.one_minus(z);
    let kept = tape.mul(keep, h_tilde)?;
    let moved = tape.mul(z, hx)?;
    tape.add(kept, moved)
}

/// Everything one gate application needs.
#[derive(Clone, Debug)]
pub struct TransferContext {
    /// Nodes present in both the local and the global snapshot.
    pub nodes: Vec<NodeKey>,
    /// `m x D` local states, row-aligned with `nodes`.
    pub h_local: Var,
    /// `m x D` global states, row-aligned with `nodes`.
    pub h_global: Var,
    /// Per node, the `k x D` global states of its first-order global neighbours (`None` if it has none).
    pub neighbours: Vec<Option<Var>>,
    pub se_local: Var,
    pub se_global: Var,
}

#[derive(Clone, Debug)]
pub struct GateOutput {
    /// `m x D` updated local states, row-aligned with the context's nodes.
    pub states: Var,
    /// Nodes whose neighbour set was empty (their `ĥ` is zero).
    pub isolated: Vec<NodeKey>,
}

/// Runs the gate for every transferring node.
pub fn apply_gate(
    tape: &mut Tape,
    store: &ParameterStore,
    ctx: &TransferContext,
    params: &GateParams,
) -> Result<GateOutput> {
    let m = ctx.nodes.len();
    if ctx.neighbours.len() != m {
        return Err(Error::Contract("neighbour lists not aligned with transferring nodes".into()));
    }
    for v in [ctx.h_local, ctx.h_global] {
        if tape.value(v).rows() != m {
            return Err(Error::Contract("states not aligned with transferring nodes".into()));
        }
    }
    match params {
        GateParams::PlainGru(gru) => {
            let states = gru_fuse(tape, store, ctx.h_global, ctx.h_local, gru)?;
            Ok(GateOutput {
                states,
                isolated: Vec::new(),
            })
        }
        GateParams::Attentive { fusion, gru } => {
            let w_att = sequence_fusion(tape, store, ctx.se_global, ctx.se_local, fusion)?;
            let h_tilde = self_attentive(tape, store, ctx.h_local, ctx.h_global, w_att, fusion)?;
            let dim = tape.value(ctx.h_local).cols();
            let mut rows = Vec::with_capacity(m);
            let mut isolated = Vec::new();
            for (i, nb) in ctx.neighbours.iter().enumerate() {
                match nb {
                    Some(nb) => {
                        let h_l = tape.gather_rows(ctx.h_local, &[i])?;
                        let (pooled, _) = neighbour_attentive(tape, store, h_l, *nb, w_att, fusion)?;
                        rows.push(pooled);
                    }
                    None => {
                        isolated.push(ctx.nodes[i]);
                        rows.push(tape.constant(Tensor::zeros(&[1, dim])));
                    }
                }
            }
            let h_hat = tape.concat_rows(&rows)?;
            let states = gru_fuse(tape, store, h_hat, h_tilde, gru)?;
            Ok(GateOutput { states, isolated })
        }
    }
}
