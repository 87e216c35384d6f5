//! Dynamic item-transition graphs and their gated message passing.
//!
//! A [`GraphSnapshot`] is the graph after `t` routed events. Snapshots are
//! persistent: extending one returns a new snapshot and leaves the old one
//! queryable. Propagation and readout run on a [`Tape`] so gradients reach
//! the embedding tables and weights.
//!
//! Weight layout: every map written `W x` on column vectors is stored as an
//! `in x out` matrix and applied to row vectors as `x · W`.

use std::collections::BTreeMap;
use std::fmt;

use crate::data::Domain;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// An item slot inside one domain: a catalog item or that domain's MASK token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Token {
    Item(usize),
    Mask,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeKey {
    pub domain: Domain,
    pub token: Token,
}

impl NodeKey {
    pub fn item(domain: Domain, item: usize) -> Self {
        NodeKey {
            domain,
            token: Token::Item(item),
        }
    }
}

impl fmt::Display for NodeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.token {
            Token::Item(i) => write!(f, "{}{}", self.domain, i),
            Token::Mask => write!(f, "{}#mask", self.domain),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GraphSnapshot {
    nodes: Vec<NodeKey>,
    position: BTreeMap<NodeKey, usize>,
    /// `(from, to)` node positions -> multiplicity.
    edges: BTreeMap<(usize, usize), u32>,
    timestamp: usize,
}

impl GraphSnapshot {
    pub fn new() -> Self {
        GraphSnapshot::default()
    }

    /// Replays a sequence from the empty graph.
    pub fn from_sequence(keys: &[NodeKey]) -> Self {
        let mut g = GraphSnapshot::new();
        let mut prev = None;
        for &k in keys {
            g = g.extend(prev, k);
            prev = Some(k);
        }
        g
    }

    /// The snapshot after one more event: `to` is inserted if unseen and, when a
    /// predecessor exists, the edge `from -> to` gains one unit of weight.
    pub fn extend(&self, from: Option<NodeKey>, to: NodeKey) -> GraphSnapshot {
        let mut next = self.clone();
        let to_pos = next.insert(to);
        if let Some(from) = from {
            let from_pos = next.insert(from);
            *next.edges.entry((from_pos, to_pos)).or_default() += 1;
        }
        next.timestamp += 1;
        next
    }

    fn insert(&mut self, key: NodeKey) -> usize {
        if let Some(&p) = self.position.get(&key) {
            return p;
        }
        self.nodes.push(key);
        self.position.insert(key, self.nodes.len() - 1);
        self.nodes.len() - 1
    }

    pub fn nodes(&self) -> &[NodeKey] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn position(&self, key: &NodeKey) -> Option<usize> {
        self.position.get(key).copied()
    }

    pub fn contains(&self, key: &NodeKey) -> bool {
        self.position.contains_key(key)
    }

    /// Number of events routed into this graph.
    pub fn timestamp(&self) -> usize {
        self.timestamp
    }

    /// Distinct directed edges with their multiplicities.
    pub fn edges(&self) -> impl Iterator<Item = (NodeKey, NodeKey, u32)> + '_ {
        self.edges
            .iter()
            .map(|(&(f, t), &c)| (self.nodes[f], self.nodes[t], c))
    }

    /// Total edge weight (edges counted with multiplicity).
    pub fn edge_weight(&self) -> u32 {
        self.edges.values().sum()
    }

    /// Row-normalized outgoing adjacency: row `i` spreads over `i`'s successors.
    pub fn a_out(&self) -> Tensor {
        self.normalized(|f, t| (f, t))
    }

    /// Row-normalized incoming adjacency: row `i` spreads over `i`'s predecessors.
    pub fn a_in(&self) -> Tensor {
        self.normalized(|f, t| (t, f))
    }

    fn normalized(&self, orient: impl Fn(usize, usize) -> (usize, usize)) -> Tensor {
        let n = self.nodes.len();
        assert!(n > 0, "adjacency of an empty graph");
        let mut m = Tensor::zeros(&[n, n]);
        let mut totals = vec![0.0; n];
        for (&(f, t), &c) in &self.edges {
            let (r, col) = orient(f, t);
            m.set(r, col, m.get(r, col) + c as f64);
            totals[r] += c as f64;
        }
        for (r, &total) in totals.iter().enumerate() {
            if total > 0.0 {
                for col in 0..n {
                    m.set(r, col, m.get(r, col) / total);
                }
            }
        }
        m
    }

    /// First-order neighbours of `key` through edges in either direction, self excluded.
    pub fn neighbours(&self, key: &NodeKey) -> Vec<NodeKey> {
        let Some(p) = self.position(key) else {
            return Vec::new();
        };
        let mut found: Vec<usize> = self
            .edges
            .keys()
            .filter_map(|&(f, t)| match (f == p, t == p) {
                (true, false) => Some(t),
                (false, true) => Some(f),
                _ => None,
            })
            .collect();
        found.sort_unstable();
        found.dedup();
        found.into_iter().map(|i| self.nodes[i]).collect()
    }

    /// Debug dump, one `from<TAB>to<TAB>count` line per distinct edge.
    pub fn edge_list(&self) -> String {
        self.edges()
            .map(|(f, t, c)| format!("{f}\t{t}\t{c}\n"))
            .collect()
    }
}

/// Weights of the gated propagation (one set per graph).
#[derive(Clone, Copy, Debug)]
pub struct PropagationParams {
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub w_o: ParamId,
    pub u_o: ParamId,
}

impl PropagationParams {
    pub fn register(store: &mut ParameterStore, prefix: &str, dim: usize) -> Result<Self> {
        let mut m = |name: &str, rows: usize, cols: usize| {
            store.insert_uniform(&format!("{prefix}.{name}"), rows, cols, dim)
        };
        Ok(PropagationParams {
            w_in: m("w_in", dim, dim)?,
            b_in: m("b_in", 1, dim)?,
            w_out: m("w_out", dim, dim)?,
            b_out: m("b_out", 1, dim)?,
            w_z: m("w_z", 2 * dim, dim)?,
            u_z: m("u_z", dim, dim)?,
            w_r: m("w_r", 2 * dim, dim)?,
            u_r: m("u_r", dim, dim)?,
            w_o: m("w_o", 2 * dim, dim)?,
            u_o: m("u_o", dim, dim)?,
        })
    }

    pub fn ids(&self) -> [ParamId; 10] {
        [
            self.w_in, self.b_in, self.w_out, self.b_out, self.w_z, self.u_z, self.w_r, self.u_r, self.w_o,
            self.u_o,
        ]
    }
}

/// `K` synchronous gated updates of every node:
///
/// ```text
/// a   = [A_in H W_in + b_in , A_out H W_out + b_out]
/// z   = σ(a W_z + H U_z)
/// r   = σ(a W_r + H U_r)
/// h̃   = tanh(a W_o + (r ⊙ H) U_o)
/// H' = (1 - z) ⊙ H + z ⊙ h̃
/// ```
///
/// `K = 0` returns `states` unchanged.
pub fn propagate(
    tape: &mut Tape,
    store: &ParameterStore,
    snapshot: &GraphSnapshot,
    states: Var,
    params: &PropagationParams,
    steps: usize,
) -> Result<Var> {
    let shape = tape.value(states).shape().to_vec();
    if snapshot.is_empty() || shape[0] != snapshot.node_count() {
        return Err(Error::Contract(format!(
            "node states {:?} not aligned with a {}-node snapshot",
            shape,
            snapshot.node_count()
        )));
    }
    if steps == 0 {
        return Ok(states);
    }
    let a_in = tape.constant(snapshot.a_in());
    let a_out = tape.constant(snapshot.a_out());
    let p = |tape: &mut Tape, id| tape.param(store, id);
    let (w_in, b_in, w_out, b_out) = (p(tape, params.w_in), p(tape, params.b_in), p(tape, params.w_out), p(tape, params.b_out));
    let (w_z, u_z, w_r, u_r, w_o, u_o) = (
        p(tape, params.w_z),
        p(tape, params.u_z),
        p(tape, params.w_r),
        p(tape, params.u_r),
        p(tape, params.w_o),
        p(tape, params.u_o),
    );

    let mut h = states;
    for _ in 0..steps {
        let msg_in = tape.matmul(a_in, h)?;
        let msg_in = tape.matmul(msg_in, w_in)?;
        let msg_in = tape.add(msg_in, b_in)?;
        let msg_out = tape.matmul(a_out, h)?;
        let msg_out = tape.matmul(msg_out, w_out)?;
        let msg_out = tape.add(msg_out, b_out)?;
        let a = tape.concat_cols(&[msg_in, msg_out])?;

        let z = gate(tape, a, w_z, h, u_z)?;
        let r = gate(tape, a, w_r, h, u_r)?;
        let rh = tape.mul(r, h)?;
        let cand_a = tape.matmul(a, w_o)?;
        let cand_h = tape.matmul(rh, u_o)?;
        let cand = tape.add(cand_a, cand_h)?;
        let cand = tape.tanh(cand);

        let keep = tape.one_minus(z);
        let kept = tape.mul(keep, h)?;
        let moved = tape.mul(z, cand)?;
        h = tape.add(kept, moved)?;
    }
    Ok(h)
}

fn gate(tape: &mut Tape, a: Var, w: Var, h: Var, u: Var) -> Result<Var> {
    let x = tape.matmul(a, w)?;
    let y = tape.matmul(h, u)?;
    let s = tape.add(x, y)?;
    Ok(tape.sigmoid(s))
}

/// Soft-attention readout weights.
#[derive(Clone, Copy, Debug)]
pub struct ReadoutParams {
    pub w1: ParamId,
    pub w2: ParamId,
    pub c: ParamId,
    /// `D x 1`
    pub p: ParamId,
    /// `2D x D`
    pub w3: ParamId,
}

impl ReadoutParams {
    pub fn register(store: &mut ParameterStore, prefix: &str, dim: usize) -> Result<Self> {
        let mut m = |name: &str, rows: usize, cols: usize| {
            store.insert_uniform(&format!("{prefix}.{name}"), rows, cols, dim)
        };
        Ok(ReadoutParams {
            w1: m("w1", dim, dim)?,
            w2: m("w2", dim, dim)?,
            c: m("c", 1, dim)?,
            p: m("p", dim, 1)?,
            w3: m("w3", 2 * dim, dim)?,
        })
    }

    pub fn ids(&self) -> [ParamId; 5] {
        [self.w1, self.w2, self.c, self.p, self.w3]
    }
}

/// Which graph view a sequence embedding was read from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Local(Domain),
    GlobalPart(Domain),
}

#[derive(Clone, Copy, Debug)]
pub struct SequenceEmbedding {
    /// `1 x D`
    pub value: Var,
    pub provenance: Provenance,
}

/// Sequence embedding from node states.
///
/// `positions` lists, per sequence position, the row of `states` holding that
/// item (repeats allowed; attention runs per position). The last position is
/// the current item:
///
/// ```text
/// α_k  = σ(h_last W1 + h_k W2 + c) · p
/// SE_c = Σ_k α_k h_k
/// SE   = [SE_c , h_last] W3
/// ```
pub fn readout(
    tape: &mut Tape,
    store: &ParameterStore,
    states: Var,
    positions: &[usize],
    params: &ReadoutParams,
) -> Result<Var> {
    let &last = positions
        .last()
        .ok_or_else(|| Error::Contract("readout of an empty sequence".into()))?;
    let seq = tape.gather_rows(states, positions)?;
    let h_last = tape.gather_rows(states, &[last])?;
    let (w1, w2, c, p, w3) = (
        tape.param(store, params.w1),
        tape.param(store, params.w2),
        tape.param(store, params.c),
        tape.param(store, params.p),
        tape.param(store, params.w3),
    );
    let q = tape.matmul(h_last, w1)?;
    let k = tape.matmul(seq, w2)?;
    let e = tape.add(k, q)?;
    let e = tape.add(e, c)?;
    let e = tape.sigmoid(e);
    let alpha = tape.matmul(e, p)?;
    let weighted = tape.mul_col(seq, alpha)?;
    let ones = tape.constant(Tensor::full(&[1, positions.len()], 1.0));
    let se_c = tape.matmul(ones, weighted)?;
    let cat = tape.concat_cols(&[se_c, h_last])?;
    tape.matmul(cat, w3)
}

/// Splits global node states by source domain.
///
/// Returns, per domain, the global row indices of its nodes (in node order)
/// and the gathered states, or `None` when the domain has no node.
pub fn global_parts(
    tape: &mut Tape,
    snapshot: &GraphSnapshot,
    states: Var,
) -> Result<[Option<(Vec<usize>, Var)>; 2]> {
    let mut out = [None, None];
    for d in Domain::BOTH {
        let rows: Vec<usize> = snapshot
            .nodes()
            .iter()
            .enumerate()
            .filter(|(_, k)| k.domain == d)
            .map(|(i, _)| i)
            .collect();
        if !rows.is_empty() {
            let v = tape.gather_rows(states, &rows)?;
            out[d.index()] = Some((rows, v));
        }
    }
    Ok(out)
}
