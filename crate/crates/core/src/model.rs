//! The dual dynamic graph model: per-event orchestration of the local graphs,
//! the global graph, and the fuse attentive gate between them.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Catalog, Domain, SequenceTriple};
use crate::error::{Error, Result};
use crate::gate::{apply_gate, GateParams, TransferContext};
use crate::graph::{propagate, readout, GraphSnapshot, NodeKey, PropagationParams, ReadoutParams, Token};
use crate::params::{ParamId, ParameterStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Structural variants of the model and its objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Local graphs only; no global graph, no gate.
    pub local_only: bool,
    /// Global graph only; sequence embeddings come from its per-domain parts.
    pub global_only: bool,
    /// Replace the fuse attentive gate by a bare GRU over (global, local) states.
    pub plain_gru_gate: bool,
    /// Drop the collaborative metric term.
    pub no_col: bool,
    /// Drop the contrastive metric term (and the MASK embeddings it needs).
    pub no_con: bool,
}

impl Ablation {
    pub fn has_local(&self) -> bool {
        !self.global_only
    }

    pub fn has_global(&self) -> bool {
        !self.local_only
    }

    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.local_only && self.global_only {
            problems.push("local_only/global_only: at most one graph family may be disabled".to_string());
        }
        if self.plain_gru_gate && (self.local_only || self.global_only) {
            problems.push("plain_gru_gate: needs both graph families".to_string());
        }
        problems
    }
}

#[derive(Clone, Copy, Debug)]
struct LocalParams {
    prop: PropagationParams,
    readout: ReadoutParams,
    gate: Option<GateParams>,
}

#[derive(Clone, Copy, Debug)]
struct GlobalParams {
    prop: PropagationParams,
    readout: [ReadoutParams; 2],
}

/// Parameter layout of one model instance; the values live in a [`ParameterStore`].
#[derive(Clone, Debug)]
pub struct DualModel {
    pub dim: usize,
    pub steps: usize,
    pub catalog_sizes: [usize; 2],
    pub ablation: Ablation,
    embeddings: [ParamId; 2],
    masks: Option<[ParamId; 2]>,
    biases: [ParamId; 2],
    local: Option<[LocalParams; 2]>,
    global: Option<GlobalParams>,
}

fn domain_tag(d: Domain) -> &'static str {
    match d {
        Domain::A => "a",
        Domain::B => "b",
    }
}

impl DualModel {
    /// Registers every parameter of the configured variant into `store`.
    pub fn build(store: &mut ParameterStore, dim: usize, steps: usize, catalog: &Catalog, ablation: Ablation) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config(vec!["dim: must be positive".into()]));
        }
        if let Some(p) = ablation.validate().into_iter().next() {
            return Err(Error::Config(vec![p]));
        }
        let sizes = [catalog.size_a, catalog.size_b];
        if sizes.contains(&0) {
            return Err(Error::Data("empty item catalog".into()));
        }
        let mut emb = Vec::new();
        for d in Domain::BOTH {
            emb.push(store.insert_uniform(&format!("emb.{}", domain_tag(d)), sizes[d.index()], dim, dim)?);
        }
        let masks = if ablation.no_con {
            None
        } else {
            Some([
                store.insert_uniform("mask.a", 1, dim, dim)?,
                store.insert_uniform("mask.b", 1, dim, dim)?,
            ])
        };
        let biases = [
            store.insert("bias.a", Tensor::zeros(&[1, sizes[0]]))?,
            store.insert("bias.b", Tensor::zeros(&[1, sizes[1]]))?,
        ];
        let with_gate = ablation.has_local() && ablation.has_global();
        let local = if ablation.has_local() {
            let mut make = |d: Domain| -> Result<LocalParams> {
                let tag = domain_tag(d);
                Ok(LocalParams {
                    prop: PropagationParams::register(store, &format!("local_{tag}.prop"), dim)?,
                    readout: ReadoutParams::register(store, &format!("local_{tag}.readout"), dim)?,
                    gate: if with_gate {
                        Some(GateParams::register(store, &format!("gate_{tag}"), dim, ablation.plain_gru_gate)?)
                    } else {
                        None
                    },
                })
            };
            Some([make(Domain::A)?, make(Domain::B)?])
        } else {
            None
        };
        let global = if ablation.has_global() {
            Some(GlobalParams {
                prop: PropagationParams::register(store, "global.prop", dim)?,
                readout: [
                    ReadoutParams::register(store, "global.readout_a", dim)?,
                    ReadoutParams::register(store, "global.readout_b", dim)?,
                ],
            })
        } else {
            None
        };
        Ok(DualModel {
            dim,
            steps,
            catalog_sizes: sizes,
            ablation,
            embeddings: [emb[0], emb[1]],
            masks,
            biases,
            local,
            global,
        })
    }

    pub fn has_mask(&self) -> bool {
        self.masks.is_some()
    }

    pub fn embedding_table(&self, d: Domain) -> ParamId {
        self.embeddings[d.index()]
    }

    pub fn bias(&self, d: Domain) -> ParamId {
        self.biases[d.index()]
    }

    /// Ids of all gate parameters (empty when the variant has no gate).
    pub fn gate_param_ids(&self) -> Vec<ParamId> {
        self.local
            .iter()
            .flatten()
            .filter_map(|l| l.gate)
            .flat_map(|g| g.ids())
            .collect()
    }

    pub fn local_propagation(&self, d: Domain) -> Option<PropagationParams> {
        self.local.map(|l| l[d.index()].prop)
    }

    pub fn local_readout(&self, d: Domain) -> Option<ReadoutParams> {
        self.local.map(|l| l[d.index()].readout)
    }

    pub fn global_propagation(&self) -> Option<PropagationParams> {
        self.global.map(|g| g.prop)
    }

    pub fn global_readout(&self, d: Domain) -> Option<ReadoutParams> {
        self.global.map(|g| g.readout[d.index()])
    }

    /// Initial state of a node: its embedding-table row or its domain's MASK vector.
    fn initial_state(&self, tape: &mut Tape, store: &ParameterStore, key: NodeKey) -> Result<Var> {
        match key.token {
            Token::Item(i) => {
                if i >= self.catalog_sizes[key.domain.index()] {
                    return Err(Error::Contract(format!("item {key} outside the catalog")));
                }
                let table = tape.param(store, self.embeddings[key.domain.index()]);
                tape.gather_rows(table, &[i])
            }
            Token::Mask => {
                let masks = self
                    .masks
                    .ok_or_else(|| Error::Contract("MASK token used by a model without mask embeddings".into()))?;
                Ok(tape.param(store, masks[key.domain.index()]))
            }
        }
    }

    /// `SE · E_dᵀ + b_d`: one score per catalog item of domain `d`.
    pub fn logits(&self, tape: &mut Tape, store: &ParameterStore, se: Var, d: Domain) -> Result<Var> {
        let table = tape.param(store, self.embeddings[d.index()]);
        let bias = tape.param(store, self.biases[d.index()]);
        let scores = tape.matmul_nt(se, table)?;
        tape.add(scores, bias)
    }
}

/// The merged event stream fed to the model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelInput {
    pub events: Vec<(Domain, Token)>,
}

impl ModelInput {
    /// Validates the triple and keeps its most recent `max_len` merged events.
    pub fn from_triple(triple: &SequenceTriple, max_len: usize) -> Result<Self> {
        triple.validate()?;
        let items = &triple.merged.items;
        let start = items.len().saturating_sub(max_len.max(1));
        Ok(ModelInput {
            events: items[start..]
                .iter()
                .map(|it| (it.source, Token::Item(it.item)))
                .collect(),
        })
    }

    pub fn count(&self, d: Domain) -> usize {
        self.events.iter().filter(|(e, _)| *e == d).count()
    }

    /// Items of domain `d` in order.
    pub fn domain_tokens(&self, d: Domain) -> Vec<Token> {
        self.events.iter().filter(|(e, _)| *e == d).map(|&(_, t)| t).collect()
    }

    /// The input minus its last domain-`d` event, and that event's item.
    pub fn hold_out_last(&self, d: Domain) -> Option<(ModelInput, usize)> {
        let pos = self.events.iter().rposition(|(e, _)| *e == d)?;
        let Token::Item(target) = self.events[pos].1 else {
            return None;
        };
        let mut events = self.events.clone();
        events.remove(pos);
        Some((ModelInput { events }, target))
    }

    /// Replaces `⌈ratio · n_d⌉` randomly chosen domain-`d` items with MASK.
    pub fn masked<R: Rng>(&self, d: Domain, ratio: f64, rng: &mut R) -> ModelInput {
        let positions: Vec<usize> = self
            .events
            .iter()
            .enumerate()
            .filter(|(_, (e, _))| *e == d)
            .map(|(i, _)| i)
            .collect();
        let n_mask = ((ratio * positions.len() as f64).ceil() as usize).min(positions.len());
        let mut events = self.events.clone();
        for k in sample(rng, positions.len(), n_mask) {
            events[positions[k]].1 = Token::Mask;
        }
        ModelInput { events }
    }
}

/// The next-item prediction made before routing an event.
#[derive(Clone, Copy, Debug)]
pub struct StepPrediction {
    pub step: usize,
    pub domain: Domain,
    /// `1 x D` sequence embedding of the history before this event.
    pub se: Var,
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateValues {
    pub local: [Option<Tensor>; 2],
    pub global: Option<Tensor>,
}

/// What happened at one event.
#[derive(Clone, Debug)]
pub struct StepTrace {
    pub step: usize,
    pub domain: Domain,
    pub item: NodeKey,
    /// Transferring nodes that received a gate update.
    pub transferring: Vec<NodeKey>,
    /// Global first-order neighbours, aligned with `transferring`.
    pub neighbours: Vec<Vec<NodeKey>>,
    /// Node states after the event, when requested.
    pub states: Option<StateValues>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    pub record_states: bool,
}

#[derive(Clone, Debug, Default)]
struct GraphState {
    snapshot: GraphSnapshot,
    states: Option<Var>,
    last: Option<NodeKey>,
}

#[derive(Clone, Debug)]
pub struct SequenceOutput {
    /// Final sequence embeddings `SE_A`, `SE_B` (`None` for a domain with no events).
    pub se: [Option<Var>; 2],
    /// Final local node states `H_al`, `H_bl`.
    pub local_states: [Option<Var>; 2],
    pub local_graphs: [GraphSnapshot; 2],
    pub global_states: Option<Var>,
    pub global_graph: GraphSnapshot,
    pub predictions: Vec<StepPrediction>,
    pub trace: Vec<StepTrace>,
}

impl SequenceOutput {
    pub fn se(&self, d: Domain) -> Option<Var> {
        self.se[d.index()]
    }
}

fn rows_of(snapshot: &GraphSnapshot, keys: &[NodeKey]) -> Vec<usize> {
    keys.iter()
        .map(|k| snapshot.position(k).expect("node present"))
        .collect()
}

/// Per-domain sequence positions (as node rows) within a graph.
fn domain_rows(snapshot: &GraphSnapshot, history: &[NodeKey], d: Domain) -> Vec<usize> {
    let keys: Vec<NodeKey> = history.iter().copied().filter(|k| k.domain == d).collect();
    rows_of(snapshot, &keys)
}

fn route(
    tape: &mut Tape,
    store: &ParameterStore,
    model: &DualModel,
    graph: &mut GraphState,
    key: NodeKey,
    prop: &PropagationParams,
) -> Result<()> {
    let next = graph.snapshot.extend(graph.last, key);
    let states = match graph.states {
        Some(s) if next.node_count() == graph.snapshot.node_count() => s,
        Some(s) => {
            let init = model.initial_state(tape, store, key)?;
            tape.concat_rows(&[s, init])?
        }
        None => model.initial_state(tape, store, key)?,
    };
    graph.states = Some(propagate(tape, store, &next, states, prop, model.steps)?);
    graph.snapshot = next;
    graph.last = Some(key);
    Ok(())
}

/// Runs the model over one merged event stream.
///
/// For each event of domain `X`: read `SE_xl` (local) and `SE_xg` (global part)
/// from the graphs at `t-1`, record the prediction of this event, gate every
/// node of the local graph with its global state and global neighbours, then
/// add the local edge from the previous `X` item and the global edge from the
/// previous merged item, propagating both graphs.
pub fn run_sequence(
    tape: &mut Tape,
    store: &ParameterStore,
    model: &DualModel,
    input: &ModelInput,
    options: RunOptions,
) -> Result<SequenceOutput> {
    let mut local = [GraphState::default(), GraphState::default()];
    let mut global = GraphState::default();
    let mut local_history: [Vec<NodeKey>; 2] = [Vec::new(), Vec::new()];
    let mut global_history: Vec<NodeKey> = Vec::new();
    let mut predictions = Vec::new();
    let mut trace = Vec::with_capacity(input.events.len());

    let local_read = |tape: &mut Tape, g: &GraphState, hist: &[NodeKey], d: Domain| -> Result<Option<Var>> {
        let (Some(states), Some(params)) = (g.states, model.local_readout(d)) else {
            return Ok(None);
        };
        let rows = rows_of(&g.snapshot, hist);
        readout(tape, store, states, &rows, &params).map(Some)
    };
    let global_read = |tape: &mut Tape, g: &GraphState, hist: &[NodeKey], d: Domain| -> Result<Option<Var>> {
        let (Some(states), Some(params)) = (g.states, model.global_readout(d)) else {
            return Ok(None);
        };
        let rows = domain_rows(&g.snapshot, hist, d);
        if rows.is_empty() {
            return Ok(None);
        }
        readout(tape, store, states, &rows, &params).map(Some)
    };

    for (step, &(d, token)) in input.events.iter().enumerate() {
        let key = NodeKey { domain: d, token };
        let x = d.index();
        let se_local = local_read(tape, &local[x], &local_history[x], d)?;
        let se_global = global_read(tape, &global, &global_history, d)?;

        let predictor = if model.ablation.has_local() { se_local } else { se_global };
        if let (Some(se), Token::Item(target)) = (predictor, token) {
            predictions.push(StepPrediction {
                step,
                domain: d,
                se,
                target,
            });
        }

        let mut step_trace = StepTrace {
            step,
            domain: d,
            item: key,
            transferring: Vec::new(),
            neighbours: Vec::new(),
            states: None,
        };

        let gate = model.local.and_then(|l| l[x].gate);
        if let (Some(gate), Some(local_states), Some(global_states), Some(se_l), Some(se_g)) =
            (gate, local[x].states, global.states, se_local, se_global)
        {
            let nodes: Vec<NodeKey> = local[x]
                .snapshot
                .nodes()
                .iter()
                .copied()
                .filter(|k| global.snapshot.contains(k))
                .collect();
            if !nodes.is_empty() {
                let local_rows = rows_of(&local[x].snapshot, &nodes);
                let global_rows = rows_of(&global.snapshot, &nodes);
                let h_local = tape.gather_rows(local_states, &local_rows)?;
                let h_global = tape.gather_rows(global_states, &global_rows)?;
                let mut neighbour_keys = Vec::with_capacity(nodes.len());
                let mut neighbours = Vec::with_capacity(nodes.len());
                for k in &nodes {
                    let nb = global.snapshot.neighbours(k);
                    neighbours.push(if nb.is_empty() {
                        None
                    } else {
                        Some(tape.gather_rows(global_states, &rows_of(&global.snapshot, &nb))?)
                    });
                    neighbour_keys.push(nb);
                }
                let ctx = TransferContext {
                    nodes: nodes.clone(),
                    h_local,
                    h_global,
                    neighbours,
                    se_local: se_l,
                    se_global: se_g,
                };
                let out = apply_gate(tape, store, &ctx, &gate)?;
                local[x].states = Some(tape.scatter_rows(local_states, &local_rows, out.states)?);
                step_trace.transferring = nodes;
                step_trace.neighbours = neighbour_keys;
            }
        }

        if let Some(prop) = model.local_propagation(d) {
            route(tape, store, model, &mut local[x], key, &prop)?;
        }
        local_history[x].push(key);
        if let Some(prop) = model.global_propagation() {
            route(tape, store, model, &mut global, key, &prop)?;
        }
        global_history.push(key);

        if options.record_states {
            step_trace.states = Some(StateValues {
                local: [
                    local[0].states.map(|v| tape.value(v).clone()),
                    local[1].states.map(|v| tape.value(v).clone()),
                ],
                global: global.states.map(|v| tape.value(v).clone()),
            });
        }
        trace.push(step_trace);
    }

    let mut se = [None, None];
    for d in Domain::BOTH {
        let x = d.index();
        se[x] = if model.ablation.has_local() {
            local_read(tape, &local[x], &local_history[x], d)?
        } else {
            global_read(tape, &global, &global_history, d)?
        };
    }
    let [la, lb] = local;
    Ok(SequenceOutput {
        se,
        local_states: [la.states, lb.states],
        local_graphs: [la.snapshot, lb.snapshot],
        global_states: global.states,
        global_graph: global.snapshot,
        predictions,
        trace,
    })
}

/// `run_sequence` over every input on one shared tape.
pub fn forward_batch(
    tape: &mut Tape,
    store: &ParameterStore,
    model: &DualModel,
    inputs: &[ModelInput],
) -> Result<Vec<SequenceOutput>> {
    inputs
        .iter()
        .map(|input| run_sequence(tape, store, model, input, RunOptions::default()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn input(events: &[(Domain, usize)]) -> ModelInput {
        ModelInput {
            events: events.iter().map(|&(d, i)| (d, Token::Item(i))).collect(),
        }
    }

    fn small_model(ablation: Ablation) -> (ParameterStore, DualModel) {
        let mut store = ParameterStore::new(3);
        let model = DualModel::build(&mut store, 4, 1, &Catalog::synthetic(5, 5), ablation).unwrap();
        (store, model)
    }

    #[test]
    fn first_event_inserts_node_without_edge() {
        let (store, model) = small_model(Ablation::default());
        let mut tape = Tape::new();
        let out = run_sequence(&mut tape, &store, &model, &input(&[(Domain::A, 2)]), RunOptions::default()).unwrap();
        assert_eq!(out.local_graphs[0].node_count(), 1);
        assert_eq!(out.local_graphs[0].edge_weight(), 0);
        assert_eq!(out.global_graph.edge_weight(), 0);
        assert!(out.se(Domain::A).is_some());
        assert!(out.se(Domain::B).is_none());
        assert!(out.predictions.is_empty());
    }

    #[test]
    fn snapshot_timestamps_count_routed_events() {
        let (store, model) = small_model(Ablation::default());
        let mut tape = Tape::new();
        let evs = input(&[(Domain::B, 1), (Domain::A, 1), (Domain::B, 2), (Domain::A, 2), (Domain::B, 3)]);
        let out = run_sequence(&mut tape, &store, &model, &evs, RunOptions::default()).unwrap();
        assert_eq!(out.local_graphs[0].timestamp(), 2);
        assert_eq!(out.local_graphs[1].timestamp(), 3);
        assert_eq!(out.global_graph.timestamp(), 5);
        assert_eq!(out.predictions.len(), 3);
    }

    #[test]
    fn ablation_parameter_counts_differ() {
        let variants = [
            Ablation::default(),
            Ablation { local_only: true, ..Default::default() },
            Ablation { global_only: true, ..Default::default() },
            Ablation { plain_gru_gate: true, ..Default::default() },
            Ablation { no_con: true, ..Default::default() },
        ];
        let counts: Vec<usize> = variants.iter().map(|a| small_model(*a).0.num_scalars()).collect();
        for i in 0..counts.len() {
            for j in i + 1..counts.len() {
                assert_ne!(counts[i], counts[j], "{:?} vs {:?}", variants[i], variants[j]);
            }
        }
    }

    #[test]
    fn conflicting_ablations_rejected() {
        let mut store = ParameterStore::new(0);
        let bad = Ablation { local_only: true, global_only: true, ..Default::default() };
        assert!(DualModel::build(&mut store, 4, 1, &Catalog::synthetic(3, 3), bad).is_err());
    }

    #[test]
    fn masking_and_hold_out() {
        let evs = input(&[(Domain::A, 0), (Domain::B, 0), (Domain::A, 1), (Domain::A, 2), (Domain::B, 1)]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let masked = evs.masked(Domain::A, 0.5, &mut rng);
        assert_eq!(masked.domain_tokens(Domain::A).iter().filter(|t| **t == Token::Mask).count(), 2);
        assert_eq!(masked.domain_tokens(Domain::B), evs.domain_tokens(Domain::B));
        let (rest, target) = evs.hold_out_last(Domain::A).unwrap();
        assert_eq!(target, 2);
        assert_eq!(rest.events.len(), 4);
        assert_eq!(rest.events.last(), Some(&(Domain::B, Token::Item(1))));
    }

    #[test]
    fn out_of_catalog_item_is_rejected() {
        let (store, model) = small_model(Ablation::default());
        let mut tape = Tape::new();
        let r = run_sequence(&mut tape, &store, &model, &input(&[(Domain::A, 9)]), RunOptions::default());
        assert!(r.is_err());
    }
}
