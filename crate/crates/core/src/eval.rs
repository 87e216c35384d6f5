//! Held-out ranking evaluation: HR, NDCG and MRR at list cut-offs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Domain, SequenceTriple};
use crate::error::{Error, Result};
use crate::model::{run_sequence, DualModel, ModelInput, RunOptions};
use crate::params::ParameterStore;
use crate::tape::Tape;

pub const DEFAULT_CUTOFFS: [usize; 3] = [5, 10, 20];

/// 1-based rank of `target`: one plus the number of items scored strictly
/// higher, plus the number of equally scored items with a smaller index.
pub fn rank_ground_truth(scores: &[f64], target: usize) -> Result<usize> {
    let Some(&t) = scores.get(target) else {
        return Err(Error::Contract(format!("target {target} outside a catalog of {}", scores.len())));
    };
    if !t.is_finite() {
        return Err(Error::Divergence(format!("non-finite score for target {target}")));
    }
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > t || (s == t && i < target))
        .count();
    Ok(1 + ahead)
}

fn mean_at(ranks: &[usize], k: usize, gain: impl Fn(usize) -> f64) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Contract("metric over an empty rank list".into()));
    }
    if k == 0 {
        return Err(Error::Contract("cut-off must be at least 1".into()));
    }
    let total: f64 = ranks.iter().map(|&r| if r <= k { gain(r) } else { 0.0 }).sum();
    Ok(total / ranks.len() as f64)
}

pub fn hr_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    mean_at(ranks, k, |_| 1.0)
}

pub fn ndcg_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    mean_at(ranks, k, |r| 1.0 / ((r + 1) as f64).log2())
}

pub fn mrr_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    mean_at(ranks, k, |r| 1.0 / r as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    HR,
    NDCG,
    MRR,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::HR, Metric::NDCG, Metric::MRR];

    pub fn compute(self, ranks: &[usize], k: usize) -> Result<f64> {
        match self {
            Metric::HR => hr_at_k(ranks, k),
            Metric::NDCG => ndcg_at_k(ranks, k),
            Metric::MRR => mrr_at_k(ranks, k),
        }
    }

    pub fn label(self, k: usize) -> String {
        format!("{self:?}@{k}")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub evaluated: usize,
    /// Sequences with fewer than two items in this domain.
    pub skipped: usize,
    /// Keyed `HR@5`, `NDCG@10`, ...
    pub values: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub cutoffs: Vec<usize>,
    /// Keyed by domain label (`A`, `B`).
    pub domains: BTreeMap<String, DomainMetrics>,
}

impl MetricTable {
    pub fn from_ranks(ranks: &[Vec<usize>; 2], skipped: [usize; 2], cutoffs: &[usize]) -> Result<Self> {
        let mut domains = BTreeMap::new();
        for d in Domain::BOTH {
            let r = &ranks[d.index()];
            if r.is_empty() {
                return Err(Error::Data(format!("no sequence has two or more domain-{d} items to evaluate")));
            }
            let mut values = BTreeMap::new();
            for &k in cutoffs {
                for m in Metric::ALL {
                    values.insert(m.label(k), m.compute(r, k)?);
                }
            }
            domains.insert(
                d.to_string(),
                DomainMetrics {
                    evaluated: r.len(),
                    skipped: skipped[d.index()],
                    values,
                },
            );
        }
        Ok(MetricTable {
            cutoffs: cutoffs.to_vec(),
            domains,
        })
    }

    pub fn get(&self, d: Domain, metric: Metric, k: usize) -> Option<f64> {
        self.domains.get(&d.to_string())?.values.get(&metric.label(k)).copied()
    }

    /// Mean of a metric over both domains.
    pub fn mean(&self, metric: Metric, k: usize) -> Option<f64> {
        let a = self.get(Domain::A, metric, k)?;
        let b = self.get(Domain::B, metric, k)?;
        Some(0.5 * (a + b))
    }

    /// Metric labels in output order: by cut-off, then HR, NDCG, MRR.
    pub fn labels(&self) -> Vec<String> {
        self.cutoffs
            .iter()
            .flat_map(|&k| Metric::ALL.map(|m| m.label(k)))
            .collect()
    }

    pub fn to_tsv(&self) -> String {
        let labels = self.labels();
        let mut out = format!("domain\tevaluated\tskipped\t{}\n", labels.join("\t"));
        for (name, dm) in &self.domains {
            let _ = write!(out, "{name}\t{}\t{}", dm.evaluated, dm.skipped);
            for l in &labels {
                let _ = write!(out, "\t{:.6}", dm.values[l]);
            }
            out.push('\n');
        }
        out
    }

    /// `{"A": {"HR@5": .., ...}, "B": {...}}`
    pub fn to_json(&self) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> = self
            .domains
            .iter()
            .map(|(name, dm)| (name.clone(), serde_json::to_value(&dm.values).expect("finite metrics")))
            .collect();
        serde_json::Value::Object(map)
    }
}

/// Scores the whole domain-`d` catalog for the input with its last `d` item held
/// out. `None` when the input has fewer than two `d` items.
pub fn score_held_out(
    store: &ParameterStore,
    model: &DualModel,
    input: &ModelInput,
    d: Domain,
) -> Result<Option<(Vec<f64>, usize)>> {
    if input.count(d) < 2 {
        return Ok(None);
    }
    let (history, target) = input.hold_out_last(d).expect("domain has items");
    let mut tape = Tape::new();
    let out = run_sequence(&mut tape, store, model, &history, RunOptions::default())?;
    let se = out.se(d).expect("history keeps a domain item");
    let logits = model.logits(&mut tape, store, se, d)?;
    Ok(Some((tape.value(logits).data().to_vec(), target)))
}

/// Ranks of the held-out items, per domain, in input order.
pub fn held_out_ranks(store: &ParameterStore, model: &DualModel, inputs: &[ModelInput]) -> Result<([Vec<usize>; 2], [usize; 2])> {
    let per_input: Vec<Result<[Option<usize>; 2]>> = inputs
        .par_iter()
        .map(|input| {
            let mut ranks = [None, None];
            for d in Domain::BOTH {
                if let Some((scores, target)) = score_held_out(store, model, input, d)? {
                    ranks[d.index()] = Some(rank_ground_truth(&scores, target)?);
                }
            }
            Ok(ranks)
        })
        .collect();
    let mut ranks = [Vec::new(), Vec::new()];
    let mut skipped = [0, 0];
    for r in per_input {
        for (x, rank) in r?.into_iter().enumerate() {
            match rank {
                Some(rank) => ranks[x].push(rank),
                None => skipped[x] += 1,
            }
        }
    }
    Ok((ranks, skipped))
}

/// Evaluates every triple (truncated to `max_len` merged events) per domain.
pub fn evaluate(
    store: &ParameterStore,
    model: &DualModel,
    triples: &[SequenceTriple],
    max_len: usize,
    cutoffs: &[usize],
) -> Result<MetricTable> {
    if triples.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let inputs = triples
        .iter()
        .map(|t| ModelInput::from_triple(t, max_len))
        .collect::<Result<Vec<_>>>()?;
    let (ranks, skipped) = held_out_ranks(store, model, &inputs)?;
    for d in Domain::BOTH {
        if skipped[d.index()] > 0 {
            log::warn!("skipped {} sequences with fewer than two domain-{d} items", skipped[d.index()]);
        }
    }
    MetricTable::from_ranks(&ranks, skipped, cutoffs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_examples() {
        assert_eq!(rank_ground_truth(&[0.1, 0.9, 0.3], 1).unwrap(), 1);
        assert_eq!(rank_ground_truth(&[0.5; 4], 0).unwrap(), 1);
        assert_eq!(rank_ground_truth(&[0.5; 4], 3).unwrap(), 4);
        assert!(rank_ground_truth(&[0.5; 4], 4).is_err());
    }

    #[test]
    fn metric_examples() {
        for k in [1, 5, 20] {
            assert_eq!(hr_at_k(&[1], k).unwrap(), 1.0);
            assert_eq!(ndcg_at_k(&[1], k).unwrap(), 1.0);
            assert_eq!(mrr_at_k(&[1], k).unwrap(), 1.0);
        }
        assert_eq!(hr_at_k(&[3], 5).unwrap(), 1.0);
        assert!((ndcg_at_k(&[3], 5).unwrap() - 0.5).abs() < 1e-15);
        assert!((mrr_at_k(&[3], 5).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        for m in Metric::ALL {
            assert_eq!(m.compute(&[3], 2).unwrap(), 0.0);
        }
        assert!(hr_at_k(&[], 5).is_err());
    }

    #[test]
    fn table_layout() {
        let t = MetricTable::from_ranks(&[vec![1, 3], vec![30]], [0, 1], &[5]).unwrap();
        assert_eq!(t.get(Domain::A, Metric::HR, 5), Some(1.0));
        assert_eq!(t.get(Domain::B, Metric::HR, 5), Some(0.0));
        assert_eq!(t.mean(Metric::HR, 5), Some(0.5));
        let tsv = t.to_tsv();
        assert!(tsv.starts_with("domain\tevaluated\tskipped\tHR@5\tNDCG@5\tMRR@5\n"));
        assert!(tsv.contains("B\t1\t1\t0.000000"));
        assert_eq!(t.to_json()["A"]["HR@5"], 1.0);
        assert!(MetricTable::from_ranks(&[vec![1], vec![]], [0, 0], &[5]).is_err());
    }
}
