//! Hybrid metric training: next-item NLL per domain, a WARP-weighted
//! collaborative margin term, and an item-mask contrastive term, optimized
//! jointly with Adam.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Catalog, Domain, SequenceTriple, DEFAULT_SPLIT};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Metric, MetricTable, DEFAULT_CUTOFFS};
use crate::graph::Token;
use crate::model::{run_sequence, Ablation, DualModel, ModelInput, RunOptions, SequenceOutput};
use crate::optim::{AdamConfig, AdamState};
use crate::params::ParameterStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Stream offset so sampling draws never coincide with parameter initialization.
const SAMPLING_STREAM: u64 = 0x5eed_cafe;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Hidden dimension `D`.
    pub dim: usize,
    /// Propagation steps `K` per graph update.
    pub steps: usize,
    pub lambda_col: f64,
    pub lambda_con: f64,
    pub margin: f64,
    pub mask_ratio: f64,
    pub batch_size: usize,
    /// Negatives sampled per positive item.
    pub n_neg: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Merged events kept per sequence (the most recent ones).
    pub max_seq_len: usize,
    /// Train / validation / test proportions.
    pub split: (f64, f64, f64),
    pub cutoffs: Vec<usize>,
    #[serde(flatten)]
    pub ablation: Ablation,
    /// Parameter-name prefixes excluded from updates.
    pub freeze: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            dim: 32,
            steps: 1,
            lambda_col: 1.0,
            lambda_con: 0.7,
            margin: 1.5,
            mask_ratio: 0.5,
            batch_size: 16,
            n_neg: 1,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_epsilon: adam.epsilon,
            epochs: 20,
            seed: 42,
            max_seq_len: 50,
            split: DEFAULT_SPLIT,
            cutoffs: DEFAULT_CUTOFFS.to_vec(),
            ablation: Ablation::default(),
            freeze: Vec::new(),
        }
    }
}

impl TrainConfig {
    /// Every violated constraint, one message per field.
    pub fn validate(&self) -> Vec<String> {
        let mut p = Vec::new();
        let mut need = |ok: bool, msg: &str| {
            if !ok {
                p.push(msg.to_string());
            }
        };
        need(self.dim > 0, "dim: must be positive");
        need(self.lambda_col >= 0.0 && self.lambda_col.is_finite(), "lambda_col: must be finite and >= 0");
        need(self.lambda_con >= 0.0 && self.lambda_con.is_finite(), "lambda_con: must be finite and >= 0");
        need(self.margin > 0.0 && self.margin.is_finite(), "margin: must be finite and > 0");
        need(self.mask_ratio > 0.0 && self.mask_ratio < 1.0, "mask_ratio: must lie in (0, 1)");
        need(self.batch_size > 0, "batch_size: must be positive");
        need(self.n_neg > 0, "n_neg: must be positive");
        need(self.learning_rate > 0.0 && self.learning_rate.is_finite(), "learning_rate: must be finite and > 0");
        need((0.0..1.0).contains(&self.beta1), "beta1: must lie in [0, 1)");
        need((0.0..1.0).contains(&self.beta2), "beta2: must lie in [0, 1)");
        need(self.adam_epsilon > 0.0, "adam_epsilon: must be > 0");
        need(self.max_seq_len >= 2, "max_seq_len: must be at least 2");
        let (a, b, c) = self.split;
        need(
            a > 0.0 && b >= 0.0 && c >= 0.0 && ((a + b + c) - 1.0).abs() < 1e-9,
            "split: proportions must be non-negative, train > 0, and sum to 1",
        );
        need(!self.cutoffs.is_empty() && self.cutoffs.iter().all(|&k| k > 0), "cutoffs: need at least one cut-off, each >= 1");
        p.extend(self.ablation.validate());
        p
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.adam_epsilon,
        }
    }

    /// Registers a freshly initialized model for `catalog`.
    pub fn build_model(&self, catalog: &Catalog) -> Result<(ParameterStore, DualModel)> {
        let mut store = ParameterStore::new(self.seed);
        let model = DualModel::build(&mut store, self.dim, self.steps, catalog, self.ablation)?;
        Ok((store, model))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_a: f64,
    pub l_b: f64,
    pub l_col: f64,
    pub l_con: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(l_a: f64, l_b: f64, l_col: f64, l_con: f64, lambda_col: f64, lambda_con: f64) -> Self {
        LossBreakdown {
            l_a,
            l_b,
            l_col,
            l_con,
            total: l_a + l_b + lambda_col * l_col + lambda_con * l_con,
        }
    }

    /// `|total - (L_A + L_B + λ_col L_col + λ_con L_con)|`
    pub fn identity_gap(&self, lambda_col: f64, lambda_con: f64) -> f64 {
        (self.total - (self.l_a + self.l_b + lambda_col * self.l_col + lambda_con * self.l_con)).abs()
    }
}

/// `softmax(SE · Hᵀ + b)` over the domain catalog.
pub fn predict(tape: &mut Tape, store: &ParameterStore, model: &DualModel, se: Var, d: Domain) -> Result<Var> {
    let logits = model.logits(tape, store, se, d)?;
    tape.softmax_rows(logits)
}

/// `-log softmax(logits)[target]` for a `1 x n` logit row.
pub fn step_nll(tape: &mut Tape, logits: Var, target: usize) -> Result<Var> {
    let lsm = tape.log_softmax_rows(logits)?;
    let picked = tape.pick(lsm, target)?;
    Ok(tape.scale(picked, -1.0))
}

/// Mean over sequences of each sequence's summed step losses. Sequences with no
/// steps still count in the denominator.
pub fn mean_of_sums(tape: &mut Tape, per_sequence: &[Vec<Var>]) -> Result<Var> {
    let terms: Vec<Var> = per_sequence.iter().flatten().copied().collect();
    if terms.is_empty() || per_sequence.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let total = tape.add_n(&terms)?;
    Ok(tape.scale(total, 1.0 / per_sequence.len() as f64))
}

/// Next-item NLL of domain `d` over a batch of runs.
pub fn nll_loss(tape: &mut Tape, store: &ParameterStore, model: &DualModel, outputs: &[SequenceOutput], d: Domain) -> Result<Var> {
    let mut per_sequence = Vec::with_capacity(outputs.len());
    for out in outputs {
        let mut steps = Vec::new();
        for p in out.predictions.iter().filter(|p| p.domain == d) {
            let logits = model.logits(tape, store, p.se, d)?;
            steps.push(step_nll(tape, logits, p.target)?);
        }
        per_sequence.push(steps);
    }
    mean_of_sums(tape, &per_sequence)
}

fn squared_distance(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let diff = tape.sub(a, b)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.sum(sq))
}

/// `weight · max(m + ‖se - pos‖² - ‖se - neg‖², 0)`
pub fn warp_hinge(tape: &mut Tape, se: Var, positive: Var, negative: Var, weight: f64, margin: f64) -> Result<Var> {
    let dp = squared_distance(tape, se, positive)?;
    let dn = squared_distance(tape, se, negative)?;
    let gap = tape.sub(dp, dn)?;
    let m = tape.constant(Tensor::scalar(margin));
    let shifted = tape.add(gap, m)?;
    let hinge = tape.relu(shifted);
    Ok(tape.scale(hinge, weight))
}

/// WARP weight `ln(rank + 1)`, where rank is one plus the number of catalog
/// rows strictly closer to `se` than row `positive`.
pub fn rank_weight(se: &[f64], table: &Tensor, positive: usize) -> f64 {
    let dist = |r: usize| -> f64 { table.row_slice(r).iter().zip(se).map(|(x, y)| (x - y) * (x - y)).sum() };
    let dp = dist(positive);
    let closer = (0..table.rows()).filter(|&r| dist(r) < dp).count();
    ((1 + closer) as f64 + 1.0).ln()
}

/// In-batch contrastive loss for one domain.
///
/// Anchor `i` is an original view, its positive the masked view of the same
/// sequence, and the candidates every other view in the batch (`2N - 1` of them).
/// Similarity is the dot product. Averaged over the `N` anchors; zero for `N = 1`.
pub fn contrastive_loss(tape: &mut Tape, originals: &[Var], masked: &[Var]) -> Result<Var> {
    if originals.len() != masked.len() {
        return Err(Error::Contract("every original view needs a masked view".into()));
    }
    let n = originals.len();
    if n < 2 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let mut views = originals.to_vec();
    views.extend_from_slice(masked);
    let all = tape.concat_rows(&views)?;
    let mut terms = Vec::with_capacity(n);
    for i in 0..n {
        let others: Vec<usize> = (0..2 * n).filter(|&j| j != i).collect();
        let positive = others.iter().position(|&j| j == n + i).expect("masked view present");
        let candidates = tape.gather_rows(all, &others)?;
        let sims = tape.matmul_nt(originals[i], candidates)?;
        terms.push(step_nll(tape, sims, positive)?);
    }
    let sum = tape.add_n(&terms)?;
    Ok(tape.scale(sum, 1.0 / n as f64))
}

/// Random choices for one sequence of a batch.
#[derive(Clone, Debug)]
pub struct SequencePlan {
    /// Distinct observed items per domain.
    pub positives: [Vec<usize>; 2],
    /// Per positive, the sampled unobserved items.
    pub negatives: [Vec<Vec<usize>>; 2],
    /// Item-masked view per domain (absent for a domain without items).
    pub masked: [Option<ModelInput>; 2],
}

/// One minibatch with all of its sampling decisions drawn up front, so the loss
/// is a deterministic function of the parameters.
#[derive(Clone, Debug)]
pub struct BatchPlan {
    pub inputs: Vec<ModelInput>,
    pub sequences: Vec<SequencePlan>,
    /// Frozen WARP weights, per sequence and domain, aligned with `positives`.
    pub rank_weights: Option<Vec<[Vec<f64>; 2]>>,
}

impl BatchPlan {
    pub fn sample<R: Rng>(inputs: Vec<ModelInput>, model: &DualModel, cfg: &TrainConfig, rng: &mut R) -> Self {
        let sequences = inputs
            .iter()
            .map(|input| {
                let mut positives = [Vec::new(), Vec::new()];
                let mut negatives = [Vec::new(), Vec::new()];
                let mut masked = [None, None];
                for d in Domain::BOTH {
                    let x = d.index();
                    let seen: BTreeSet<usize> = input
                        .domain_tokens(d)
                        .into_iter()
                        .filter_map(|t| match t {
                            Token::Item(i) => Some(i),
                            Token::Mask => None,
                        })
                        .collect();
                    if !cfg.ablation.no_col {
                        let pool: Vec<usize> = (0..model.catalog_sizes[x]).filter(|i| !seen.contains(i)).collect();
                        if pool.is_empty() && !seen.is_empty() {
                            log::warn!("sequence covers the whole domain-{d} catalog; no negatives to sample");
                        }
                        for _ in &seen {
                            negatives[x].push(if pool.is_empty() {
                                Vec::new()
                            } else {
                                (0..cfg.n_neg).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
                            });
                        }
                    }
                    positives[x] = seen.into_iter().collect();
                    if !cfg.ablation.no_con && input.count(d) > 0 {
                        masked[x] = Some(input.masked(d, cfg.mask_ratio, rng));
                    }
                }
                SequencePlan {
                    positives,
                    negatives,
                    masked,
                }
            })
            .collect();
        BatchPlan {
            inputs,
            sequences,
            rank_weights: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub loss: Var,
    pub breakdown: LossBreakdown,
    /// WARP weights used, for freezing in a later evaluation of the same plan.
    pub rank_weights: Vec<[Vec<f64>; 2]>,
    /// Whether each term is part of the computation graph.
    pub has_col: bool,
    pub has_con: bool,
}

/// Builds the full objective for one planned batch on `tape`.
pub fn batch_loss(
    tape: &mut Tape,
    store: &ParameterStore,
    model: &DualModel,
    plan: &BatchPlan,
    cfg: &TrainConfig,
) -> Result<BatchLoss> {
    let outputs = plan
        .inputs
        .iter()
        .map(|input| run_sequence(tape, store, model, input, RunOptions::default()))
        .collect::<Result<Vec<_>>>()?;
    let l_a = nll_loss(tape, store, model, &outputs, Domain::A)?;
    let l_b = nll_loss(tape, store, model, &outputs, Domain::B)?;
    let n = plan.inputs.len().max(1) as f64;

    let mut rank_weights = Vec::with_capacity(outputs.len());
    let l_col = if cfg.ablation.no_col {
        None
    } else {
        let mut terms = Vec::new();
        for (s, (out, sp)) in outputs.iter().zip(&plan.sequences).enumerate() {
            let mut weights = [Vec::new(), Vec::new()];
            for d in Domain::BOTH {
                let x = d.index();
                let Some(se) = out.se(d) else { continue };
                let table_id = model.embedding_table(d);
                let table = tape.param(store, table_id);
                for (p, &j) in sp.positives[x].iter().enumerate() {
                    let w = match &plan.rank_weights {
                        Some(frozen) => frozen[s][x][p],
                        None => rank_weight(tape.value(se).data(), store.value(table_id), j),
                    };
                    weights[x].push(w);
                    let pos = tape.gather_rows(table, &[j])?;
                    for &k in &sp.negatives[x][p] {
                        let neg = tape.gather_rows(table, &[k])?;
                        terms.push(warp_hinge(tape, se, pos, neg, w, cfg.margin)?);
                    }
                }
            }
            rank_weights.push(weights);
        }
        Some(if terms.is_empty() {
            tape.constant(Tensor::scalar(0.0))
        } else {
            let sum = tape.add_n(&terms)?;
            tape.scale(sum, 1.0 / n)
        })
    };

    let l_con = if cfg.ablation.no_con {
        None
    } else {
        let mut per_domain = Vec::new();
        for d in Domain::BOTH {
            let x = d.index();
            let mut originals = Vec::new();
            let mut masked = Vec::new();
            for (out, sp) in outputs.iter().zip(&plan.sequences) {
                let (Some(se), Some(view)) = (out.se(d), &sp.masked[x]) else { continue };
                let masked_run = run_sequence(tape, store, model, view, RunOptions::default())?;
                originals.push(se);
                masked.push(masked_run.se(d).expect("masked view keeps the domain"));
            }
            per_domain.push(contrastive_loss(tape, &originals, &masked)?);
        }
        Some(tape.add_n(&per_domain)?)
    };

    let mut parts = vec![l_a, l_b];
    if let Some(c) = l_col {
        parts.push(tape.scale(c, cfg.lambda_col));
    }
    if let Some(c) = l_con {
        parts.push(tape.scale(c, cfg.lambda_con));
    }
    let loss = tape.add_n(&parts)?;
    let val = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
    let breakdown = LossBreakdown {
        l_a: val(Some(l_a)),
        l_b: val(Some(l_b)),
        l_col: val(l_col),
        l_con: val(l_con),
        total: val(Some(loss)),
    };
    Ok(BatchLoss {
        loss,
        breakdown,
        rank_weights,
        has_col: l_col.is_some(),
        has_con: l_con.is_some(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Batch means.
    pub losses: LossBreakdown,
    pub validation: Option<MetricTable>,
    pub wall_seconds: f64,
}

impl EpochRecord {
    pub fn tsv_header(cutoffs: &[usize]) -> String {
        let mut h = String::from("epoch\tL_A\tL_B\tL_col\tL_con\ttotal");
        for d in Domain::BOTH {
            for &k in cutoffs {
                for m in Metric::ALL {
                    let _ = write!(h, "\tval_{d}_{}", m.label(k));
                }
            }
        }
        h
    }

    /// One log row without wall-clock time, so identical runs give identical rows.
    pub fn tsv_row(&self, cutoffs: &[usize]) -> String {
        let l = &self.losses;
        let mut row = format!(
            "{}\t{:.10e}\t{:.10e}\t{:.10e}\t{:.10e}\t{:.10e}",
            self.epoch, l.l_a, l.l_b, l.l_col, l.l_con, l.total
        );
        for d in Domain::BOTH {
            for &k in cutoffs {
                for m in Metric::ALL {
                    match self.validation.as_ref().and_then(|v| v.get(d, m, k)) {
                        Some(x) => {
                            let _ = write!(row, "\t{x:.6}");
                        }
                        None => row.push_str("\tNA"),
                    }
                }
            }
        }
        row
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: DualModel,
    /// Parameters of the best validation epoch (the last epoch without validation data).
    pub store: ParameterStore,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
    pub batches: Vec<LossBreakdown>,
}

fn divergence_report(store: &ParameterStore, what: &str) -> Error {
    let mut msg = format!("{what}; parameter norms (value, grad):");
    for (name, v, g) in store.norms() {
        let _ = write!(msg, "\n  {name}\t{v:.6e}\t{g:.6e}");
    }
    Error::Divergence(msg)
}

/// Checkpoint-selection score: mean NDCG over both domains at the largest cut-off.
///
/// HR would saturate at 1 once the cut-off reaches the catalog size.
pub fn selection_score(table: &MetricTable) -> Option<f64> {
    let k = *table.cutoffs.iter().max()?;
    table.mean(Metric::NDCG, k)
}

/// Trains a fresh model. `on_epoch` sees each record as soon as it is complete.
pub fn train(
    train_set: &[SequenceTriple],
    validation: &[SequenceTriple],
    catalog: &Catalog,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    if train_set.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let (mut store, model) = cfg.build_model(catalog)?;
    let mut unmatched = Vec::new();
    for prefix in &cfg.freeze {
        if store.freeze_prefix(prefix) == 0 {
            unmatched.push(format!("freeze: no parameter starts with `{prefix}`"));
        }
    }
    if !unmatched.is_empty() {
        return Err(Error::Config(unmatched));
    }
    let inputs = train_set
        .iter()
        .map(|t| ModelInput::from_triple(t, cfg.max_seq_len))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SAMPLING_STREAM);
    let mut adam = AdamState::new(&store, cfg.adam());
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut batches = Vec::new();
    let mut best: Option<(f64, usize, ParameterStore)> = None;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        let mut count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<ModelInput> = chunk.iter().map(|&i| inputs[i].clone()).collect();
            let plan = BatchPlan::sample(batch, &model, cfg, &mut rng);
            let mut tape = Tape::new();
            let out = batch_loss(&mut tape, &store, &model, &plan, cfg)?;
            if !out.breakdown.total.is_finite() {
                return Err(divergence_report(&store, &format!("non-finite loss at epoch {epoch}")));
            }
            tape.backward(out.loss, &mut store)?;
            if store.iter().any(|(_, p)| !p.grad.is_finite()) {
                return Err(divergence_report(&store, &format!("non-finite gradient at epoch {epoch}")));
            }
            adam.step(&mut store)?;
            if !store.all_finite() {
                return Err(divergence_report(&store, &format!("non-finite parameters at epoch {epoch}")));
            }
            let b = out.breakdown;
            sums.l_a += b.l_a;
            sums.l_b += b.l_b;
            sums.l_col += b.l_col;
            sums.l_con += b.l_con;
            count += 1;
            batches.push(b);
        }
        let c = count as f64;
        let losses = LossBreakdown::combine(sums.l_a / c, sums.l_b / c, sums.l_col / c, sums.l_con / c, cfg.lambda_col, cfg.lambda_con);
        let validation_table = if validation.is_empty() {
            None
        } else {
            Some(evaluate(&store, &model, validation, cfg.max_seq_len, &cfg.cutoffs)?)
        };
        let record = EpochRecord {
            epoch,
            losses,
            validation: validation_table,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        log::info!("epoch {epoch}: total {:.6}", losses.total);
        let score = record.validation.as_ref().and_then(selection_score);
        let improved = match (&best, score) {
            (_, None) => true,
            (None, Some(_)) => true,
            (Some((b, _, _)), Some(s)) => s > *b,
        };
        if improved {
            best = Some((score.unwrap_or(f64::NEG_INFINITY), epoch, store.clone()));
        }
        on_epoch(&record);
        log.push(record);
    }
    let (best_epoch, store) = match best {
        Some((_, e, s)) => (e, s),
        None => (0, store),
    };
    Ok(TrainOutcome {
        model,
        store,
        best_epoch,
        log,
        batches,
    })
}
