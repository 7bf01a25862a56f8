//! Interest discovery by k-nearest-neighbour density peaks.
//!
//! Before each epoch the clean tokens of every item and modality are
//! clustered: each token gets a local density from its `k` nearest
//! neighbours and a separation from the nearest denser token; the `K_c`
//! tokens with the largest density × separation become interest prototypes,
//! and every token is indexed by its nearest prototype. A user's token
//! sequence is then translated into the deduplicated list of its prototypes.
//!
//! Ties are resolved by index everywhere: a token with equal density and a
//! smaller index counts as denser, equal scores prefer the smaller token index,
//! and equidistant prototypes prefer the smaller prototype id.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::store::Modality;
use crate::tensor::Tensor;
use crate::tokenizer::TokenMeta;

/// Identity of one item token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenKey {
    pub item: usize,
    pub modality: Modality,
}

/// How many prototypes to keep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PrototypeCount {
    Absolute(usize),
    /// Fraction of the item count, rounded half-up.
    Ratio(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusteringConfig {
    /// Neighbour count; `None` picks `max(2, round(√N))`.
    pub k: Option<usize>,
    pub prototypes: PrototypeCount,
}

/// Prototype count for `n_items` items and `n_tokens` tokens, clamped to
/// `[1, n_tokens]`.
pub fn prototype_count(count: PrototypeCount, n_items: usize, n_tokens: usize) -> usize {
    let raw = match count {
        PrototypeCount::Absolute(k) => k,
        PrototypeCount::Ratio(r) => (r * n_items as f64 + 0.5).floor().max(0.0) as usize,
    };
    raw.clamp(1, n_tokens.max(1))
}

/// Default neighbour count for `n` tokens, kept below `n`.
pub fn default_k(n: usize) -> usize {
    let k = ((n as f64).sqrt().round() as usize).max(2);
    k.min(n.saturating_sub(1)).max(1)
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Local density `ρ` and separation `δ` of every token (rows of `tokens`).
pub fn dpc_scores(tokens: &Tensor, k: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = tokens.rows();
    if n < 2 {
        return Err(Error::Invalid(format!("density peaks need at least 2 tokens, got {n}")));
    }
    if k == 0 || k >= n {
        return Err(Error::Invalid(format!("neighbour count k={k} must be in [1, {n})")));
    }
    let rho: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = tokens.row(i);
            let mut d: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| sq_dist(xi, tokens.row(j)))
                .collect();
            d.select_nth_unstable_by(k - 1, f64::total_cmp);
            let nearest = &mut d[..k];
            nearest.sort_by(f64::total_cmp);
            (-nearest.iter().sum::<f64>() / k as f64).exp()
        })
        .collect();
    let delta: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = tokens.row(i);
            let mut best = f64::INFINITY;
            let mut far: f64 = 0.0;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let d = sq_dist(xi, tokens.row(j));
                far = far.max(d);
                let denser = rho[j] > rho[i] || (rho[j] == rho[i] && j < i);
                if denser && d < best {
                    best = d;
                }
            }
            if best.is_finite() {
                best.sqrt()
            } else {
                far.sqrt()
            }
        })
        .collect();
    Ok((rho, delta))
}

/// Indices of the `kc` tokens with the largest `ρ·δ`, best first. Equal
/// scores keep the smaller index first.
pub fn select_prototypes(rho: &[f64], delta: &[f64], kc: usize) -> Result<Vec<usize>> {
    let n = rho.len();
    if delta.len() != n {
        return Err(Error::shape("select_prototypes", "rho and delta lengths differ"));
    }
    if kc == 0 || kc > n {
        return Err(Error::Invalid(format!("cannot select {kc} prototypes from {n} tokens")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let score = |i: usize| rho[i] * delta[i];
    order.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
    order.truncate(kc);
    Ok(order)
}

/// Index of the nearest prototype for every token.
pub fn assign_nearest(tokens: &Tensor, prototypes: &[usize]) -> Result<Vec<usize>> {
    if prototypes.is_empty() {
        return Err(Error::Invalid("no prototypes".into()));
    }
    Ok((0..tokens.rows())
        .into_par_iter()
        .map(|i| {
            let xi = tokens.row(i);
            let mut best = (f64::INFINITY, 0);
            for (p, &t) in prototypes.iter().enumerate() {
                let d = sq_dist(xi, tokens.row(t));
                if d < best.0 {
                    best = (d, p);
                }
            }
            best.1
        })
        .collect())
}

/// Prototype vectors plus a token → prototype lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct InterestIndex {
    /// Token keys of the prototypes, in prototype-id order.
    pub prototypes: Vec<TokenKey>,
    /// Prototype token vectors at build time, one row per prototype.
    pub vectors: Tensor,
    text: Vec<Option<u32>>,
    visual: Vec<Option<u32>>,
}

impl InterestIndex {
    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn lookup(&self, key: TokenKey) -> Option<usize> {
        let table = match key.modality {
            Modality::Text => &self.text,
            Modality::Visual => &self.visual,
        };
        table.get(key.item).copied().flatten().map(|p| p as usize)
    }

    /// All `(token, prototype)` pairs, items ascending, text before visual.
    pub fn assignments(&self) -> Vec<(TokenKey, usize)> {
        let mut out = Vec::new();
        for item in 0..self.text.len() {
            for (m, table) in [(Modality::Text, &self.text), (Modality::Visual, &self.visual)] {
                if let Some(p) = table[item] {
                    out.push((TokenKey { item, modality: m }, p as usize));
                }
            }
        }
        out
    }
}

/// Assigns every token to its nearest prototype and records the lookup.
pub fn build_interest_index(
    tokens: &Tensor,
    keys: &[TokenKey],
    prototypes: &[usize],
    n_items: usize,
) -> Result<InterestIndex> {
    if keys.len() != tokens.rows() {
        return Err(Error::shape("build_interest_index", "one key per token row"));
    }
    let assignment = assign_nearest(tokens, prototypes)?;
    let mut text = vec![None; n_items];
    let mut visual = vec![None; n_items];
    for (key, &p) in keys.iter().zip(&assignment) {
        let slot = match key.modality {
            Modality::Text => &mut text,
            Modality::Visual => &mut visual,
        };
        if key.item >= n_items {
            return Err(Error::Invalid(format!("token item {} out of range", key.item)));
        }
        slot[key.item] = Some(p as u32);
    }
    Ok(InterestIndex {
        prototypes: prototypes.iter().map(|&i| keys[i]).collect(),
        vectors: tokens.select_rows(prototypes),
        text,
        visual,
    })
}

/// Full clustering pass over a token set.
pub fn refresh(tokens: &Tensor, keys: &[TokenKey], n_items: usize, config: &ClusteringConfig) -> Result<InterestIndex> {
    let n = tokens.rows();
    let k = match config.k {
        Some(k) => k,
        None => default_k(n),
    };
    let (rho, delta) = dpc_scores(tokens, k)?;
    let kc = prototype_count(config.prototypes, n_items, n);
    let protos = select_prototypes(&rho, &delta, kc)?;
    build_interest_index(tokens, keys, &protos, n_items)
}

/// Prototype ids of a token sequence, deduplicated in first-occurrence order.
pub fn translate_ids(meta: &[TokenMeta], index: &InterestIndex) -> Result<Vec<usize>> {
    let mut seen = vec![false; index.len()];
    let mut out = Vec::new();
    for m in meta {
        let key = TokenKey {
            item: m.item,
            modality: m.modality,
        };
        let p = index.lookup(key).ok_or(Error::StaleIndex {
            item: m.item,
            modality: m.modality.as_str(),
        })?;
        if !std::mem::replace(&mut seen[p], true) {
            out.push(p);
        }
    }
    Ok(out)
}

/// Deduplicates a prototype-id list, keeping first occurrences.
pub fn dedup_first(ids: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(ids.len());
    for &i in ids {
        if !out.contains(&i) {
            out.push(i);
        }
    }
    out
}

/// Interest tokens of one user.
#[derive(Debug, Clone, PartialEq)]
pub struct InterestSequence {
    pub ids: Vec<usize>,
    pub vectors: Tensor,
}

/// Translates a token sequence into its interest tokens using the prototype
/// vectors stored in the index.
pub fn translate(meta: &[TokenMeta], index: &InterestIndex) -> Result<InterestSequence> {
    let ids = translate_ids(meta, index)?;
    let vectors = index.vectors.select_rows(&ids);
    Ok(InterestSequence { ids, vectors })
}
