//! Full-catalog ranking evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::interest::InterestIndex;
use crate::matching::{alpha, score_bank, Mode};
use crate::model::{Forward, Model};
use crate::param::ParamStore;
use crate::store::{Example, FeatureTable, InteractionDataset, Modality};
use crate::tensor::{dot, Tensor};
use crate::tokenizer::{item_bank, FeatureView, ItemBank};

pub const DEFAULT_KS: [usize; 2] = [10, 50];

/// 1-based rank of `target`. Items with equal score are ordered by index.
pub fn rank_of(scores: &[f64], target: usize) -> Result<usize> {
    let Some(&t) = scores.get(target) else {
        return Err(Error::Invalid(format!("target {target} outside a catalog of {}", scores.len())));
    };
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("ranking scores".into()));
    }
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(k, &s)| s > t || (s == t && k < target))
        .count();
    Ok(ahead + 1)
}

pub fn recall_at(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((1 + rank) as f64).log2()
    } else {
        0.0
    }
}

/// Rank plus `(R@K, N@K)` for each cutoff.
pub fn rank_metrics(scores: &[f64], target: usize, ks: &[usize]) -> Result<(usize, Vec<(f64, f64)>)> {
    let r = rank_of(scores, target)?;
    Ok((r, ks.iter().map(|&k| (recall_at(r, k), ndcg_at(r, k))).collect()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserRank {
    pub user: usize,
    pub target: usize,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankResult {
    pub ranks: Vec<UserRank>,
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
}

impl RankResult {
    pub fn from_ranks(ranks: Vec<UserRank>, ks: &[usize]) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::Invalid("cannot evaluate an empty split".into()));
        }
        let n = ranks.len() as f64;
        let recall = ks
            .iter()
            .map(|&k| ranks.iter().map(|r| recall_at(r.rank, k)).sum::<f64>() / n)
            .collect();
        let ndcg = ks
            .iter()
            .map(|&k| ranks.iter().map(|r| ndcg_at(r.rank, k)).sum::<f64>() / n)
            .collect();
        Ok(RankResult {
            ranks,
            ks: ks.to_vec(),
            recall,
            ndcg,
        })
    }

    /// R@K. Cutoffs that were not requested are computed from the ranks.
    pub fn recall(&self, k: usize) -> f64 {
        match self.ks.iter().position(|&x| x == k) {
            Some(i) => self.recall[i],
            None => self.ranks.iter().map(|r| recall_at(r.rank, k)).sum::<f64>() / self.ranks.len() as f64,
        }
    }

    pub fn ndcg(&self, k: usize) -> f64 {
        match self.ks.iter().position(|&x| x == k) {
            Some(i) => self.ndcg[i],
            None => self.ranks.iter().map(|r| ndcg_at(r.rank, k)).sum::<f64>() / self.ranks.len() as f64,
        }
    }
}

/// Frozen-parameter scoring for a trained model.
pub struct Predictor<'a> {
    pub model: &'a Model,
    pub store: &'a ParamStore,
    pub features: FeatureView<'a>,
    pub index: Option<&'a InterestIndex>,
}

/// Values shared by every user in one evaluation pass.
pub struct Prepared {
    pub bank: ItemBank,
    pub prototypes: Option<Tensor>,
    pub alpha: f64,
    pub ids: Option<Tensor>,
}

impl Prepared {
    pub fn mode(&self) -> Mode {
        if self.ids.is_some() {
            Mode::Transductive
        } else {
            Mode::Inductive
        }
    }
}

const CHUNK: usize = 32;

impl Predictor<'_> {
    pub fn prepare(&self) -> Result<Prepared> {
        let mut g = Graph::new(self.store.precision());
        let b = self.model.bind(&mut g, self.store);
        let bank = item_bank(&mut g, self.features, &b.adapters)?;
        let prototypes = match (self.model.config.architecture.uses_interests(), self.index) {
            (false, _) => None,
            (true, None) => return Err(Error::Invalid("model needs an interest index".into())),
            (true, Some(idx)) => {
                let p = self.model.prototype_tokens(&mut g, &b, idx, self.features)?;
                Some(g.value(p).clone())
            }
        };
        Ok(Prepared {
            bank,
            prototypes,
            alpha: alpha(self.store.get(self.model.fusion_a).value.item()),
            ids: self.model.ids.map(|id| self.store.get(id).value.clone()),
        })
    }

    /// Sequence representations, one row per history.
    pub fn user_vectors(&self, prep: &Prepared, histories: &[&[usize]]) -> Result<Tensor> {
        let d = self.model.config.d;
        let chunks: Vec<Vec<f64>> = histories
            .par_chunks(CHUNK)
            .map(|chunk| -> Result<Vec<f64>> {
                let mut g = Graph::new(self.store.precision());
                let b = self.model.bind(&mut g, self.store);
                let protos = match &prep.prototypes {
                    Some(p) => Some(g.constant(p.clone())?),
                    None => None,
                };
                let interests = match (self.index, protos) {
                    (Some(i), Some(p)) => Some((i, p)),
                    _ => None,
                };
                let mut out = Vec::with_capacity(chunk.len() * d);
                for h in chunk {
                    let st = self
                        .model
                        .represent(&mut g, &b, h, self.features, interests, None, Forward::EVAL)?;
                    out.extend_from_slice(g.value(st.u).data());
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        Tensor::new(histories.len(), d, chunks.concat())
    }

    pub fn scores(&self, prep: &Prepared, u: &[f64]) -> Result<Vec<f64>> {
        score_bank(u, &prep.bank, prep.alpha, prep.mode(), prep.ids.as_ref())
    }
}

/// Ranks every example's target among all catalog items.
pub fn evaluate(pred: &Predictor<'_>, examples: &[Example], ks: &[usize]) -> Result<RankResult> {
    if examples.is_empty() {
        return Err(Error::Invalid("cannot evaluate an empty split".into()));
    }
    let prep = pred.prepare()?;
    let histories: Vec<&[usize]> = examples.iter().map(|e| e.history.as_slice()).collect();
    let users = pred.user_vectors(&prep, &histories)?;
    let ranks = examples
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let s = pred.scores(&prep, users.row(i))?;
            Ok(UserRank {
                user: e.user,
                target: e.target,
                rank: rank_of(&s, e.target)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    RankResult::from_ranks(ranks, ks)
}

/// The final prediction case of every training sequence.
pub fn last_train_examples(train: &InteractionDataset) -> Vec<Example> {
    train
        .sequences
        .iter()
        .filter(|s| s.items.len() >= 2)
        .map(|s| {
            let n = s.items.len();
            Example {
                user: s.user,
                history: s.items[..n - 1].to_vec(),
                target: s.items[n - 1],
            }
        })
        .collect()
}

/// One popularity bucket `[lo, hi)`; `hi = None` is unbounded.
#[derive(Debug, Clone, PartialEq)]
pub struct Bucket {
    pub lo: u64,
    pub hi: Option<u64>,
    pub samples: usize,
    pub recall10: f64,
}

/// Groups results by the training count of their target item. `edges` are
/// bucket lower bounds: they must start at 0 and increase strictly.
pub fn popularity_report(result: &RankResult, counts: &[u64], edges: &[u64]) -> Result<Vec<Bucket>> {
    if edges.first() != Some(&0) || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Invalid(format!(
            "bucket edges {edges:?} must start at 0 and increase strictly"
        )));
    }
    let mut buckets: Vec<Bucket> = edges
        .iter()
        .enumerate()
        .map(|(i, &lo)| Bucket {
            lo,
            hi: edges.get(i + 1).copied(),
            samples: 0,
            recall10: 0.0,
        })
        .collect();
    for r in &result.ranks {
        let c = *counts
            .get(r.target)
            .ok_or_else(|| Error::Invalid(format!("no count for item {}", r.target)))?;
        let b = edges.partition_point(|&e| e <= c) - 1;
        buckets[b].samples += 1;
        buckets[b].recall10 += recall_at(r.rank, 10);
    }
    for b in &mut buckets {
        if b.samples > 0 {
            b.recall10 /= b.samples as f64;
        }
    }
    Ok(buckets)
}

/// Results CSV: a `metric,K,value` block, a blank line, then a
/// `bucket_lo,bucket_hi,samples,R@10` block.
pub fn results_csv(result: &RankResult, buckets: &[Bucket]) -> String {
    let mut s = String::from("metric,K,value\n");
    for (i, k) in result.ks.iter().enumerate() {
        let _ = writeln!(s, "R,{k},{:.6}", result.recall[i]);
        let _ = writeln!(s, "N,{k},{:.6}", result.ndcg[i]);
    }
    s.push_str("\nbucket_lo,bucket_hi,samples,R@10\n");
    for b in buckets {
        let hi = b.hi.map_or_else(|| "inf".to_string(), |h| h.to_string());
        let _ = writeln!(s, "{},{hi},{},{:.6}", b.lo, b.samples, b.recall10);
    }
    s
}

pub fn write_results(path: &Path, result: &RankResult, buckets: &[Bucket]) -> Result<()> {
    fs::write(path, results_csv(result, buckets)).map_err(|e| Error::io(path, e))
}

/// Per-modality score matrices (`examples × items`) in the feature-file
/// format, one row per example keyed by its position.
pub fn modality_score_tables(pred: &Predictor<'_>, examples: &[Example]) -> Result<(FeatureTable, FeatureTable)> {
    let prep = pred.prepare()?;
    let histories: Vec<&[usize]> = examples.iter().map(|e| e.history.as_slice()).collect();
    let users = pred.user_vectors(&prep, &histories)?;
    let n = prep.bank.len();
    let mut text = FeatureTable::new(Modality::Text, n);
    let mut visual = FeatureTable::new(Modality::Visual, n);
    for i in 0..examples.len() {
        let u = users.row(i);
        text.rows
            .push((i as u64, (0..n).map(|k| dot(u, prep.bank.text.row(k)) as f32).collect()));
        visual
            .rows
            .push((i as u64, (0..n).map(|k| dot(u, prep.bank.visual.row(k)) as f32).collect()));
    }
    Ok((text, visual))
}
