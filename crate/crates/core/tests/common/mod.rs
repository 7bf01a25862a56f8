#![allow(dead_code)]

use mmrec::config::RunConfig;
use mmrec::interest::PrototypeCount;
use mmrec::model::ModelConfig;
use mmrec::store::{CatalogItem, Dataset, FeatureTable, InteractionDataset, ItemCatalog, Modality, UserSequence};
use mmrec::synth::SynthConfig;
use mmrec::tensor::Precision;
use mmrec::trainer::TrainConfig;

// ---- brute-force oracles -------------------------------------------------

fn sqd(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        s += d * d;
    }
    s
}

/// Density and separation straight from their definitions.
pub fn oracle_dpc(points: &[Vec<f64>], k: usize) -> (Vec<f64>, Vec<f64>) {
    let n = points.len();
    let dist: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| sqd(&points[i], &points[j])).collect()).collect();
    let mut rho = vec![0.0; n];
    for i in 0..n {
        let mut others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[i][j]).collect();
        others.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut s = 0.0;
        for d in &others[..k] {
            s += d;
        }
        rho[i] = (-s / k as f64).exp();
    }
    let mut delta = vec![0.0; n];
    for i in 0..n {
        let higher: Vec<usize> = (0..n)
            .filter(|&j| j != i && (rho[j] > rho[i] || (rho[j] == rho[i] && j < i)))
            .collect();
        delta[i] = if higher.is_empty() {
            (0..n).filter(|&j| j != i).map(|j| dist[i][j]).fold(0.0, f64::max).sqrt()
        } else {
            higher.iter().map(|&j| dist[i][j]).fold(f64::INFINITY, f64::min).sqrt()
        };
    }
    (rho, delta)
}

/// Top-`kc` indices by `ρ·δ`, ties to the smaller index, found by repeated
/// linear scans.
pub fn oracle_select(rho: &[f64], delta: &[f64], kc: usize) -> Vec<usize> {
    let mut taken = vec![false; rho.len()];
    let mut out = Vec::new();
    for _ in 0..kc {
        let mut best: Option<usize> = None;
        for i in 0..rho.len() {
            if taken[i] {
                continue;
            }
            let gi = rho[i] * delta[i];
            match best {
                None => best = Some(i),
                Some(b) if gi > rho[b] * delta[b] => best = Some(i),
                _ => {}
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push(b);
    }
    out
}

pub fn oracle_assign(points: &[Vec<f64>], protos: &[usize]) -> Vec<usize> {
    points
        .iter()
        .map(|p| {
            let mut best = 0;
            for (c, &t) in protos.iter().enumerate() {
                if sqd(p, &points[t]) < sqd(p, &points[protos[best]]) {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Fused score by direct evaluation of the weighted average.
pub fn oracle_match(st: f64, sv: f64, alpha: f64) -> f64 {
    let (et, ev) = ((alpha * st).exp(), (alpha * sv).exp());
    (st * et + sv * ev) / (et + ev)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sequence-item contrast from a score matrix.
pub fn oracle_seq_item(scores: &[Vec<f64>], tau: f64) -> f64 {
    let b = scores.len();
    let mut total = 0.0;
    for i in 0..b {
        let denom: f64 = scores[i].iter().map(|s| (s / tau).exp()).sum();
        total += -((scores[i][i] / tau).exp() / denom).ln();
    }
    total / b as f64
}

/// Sequence-sequence contrast including the self term.
pub fn oracle_seq_seq(u: &[Vec<f64>], u2: &[Vec<f64>], tau: f64) -> f64 {
    let b = u.len();
    let mut total = 0.0;
    for i in 0..b {
        let mut denom = 0.0;
        for j in 0..b {
            denom += (dot(&u[i], &u[j]) / tau).exp() + (dot(&u[i], &u2[j]) / tau).exp();
        }
        total += -((dot(&u[i], &u2[i]) / tau).exp() / denom).ln();
    }
    total / b as f64
}

/// Mean of all pairwise inner products, diagonal included.
pub fn oracle_ortho(xi: &[Vec<f64>]) -> f64 {
    let m = xi.len();
    let mut s = 0.0;
    for a in xi {
        for b in xi {
            s += dot(a, b);
        }
    }
    s / (m * m) as f64
}

// ---- fixtures --------------------------------------------------------------

pub fn lcg(seed: &mut u64) -> f64 {
    *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    ((*seed >> 11) as f64) / ((1u64 << 53) as f64)
}

/// Small hand-built domain: features are deterministic sinusoids.
pub fn toy_dataset(n_items: usize, text_dim: usize, visual_dim: usize, images: &[bool], seqs: &[Vec<usize>]) -> Dataset {
    let catalog = ItemCatalog::new(
        (0..n_items)
            .map(|i| CatalogItem { id: 100 + i as u64, has_text: true, has_image: images[i] })
            .collect(),
    )
    .unwrap();
    let mut text = FeatureTable::new(Modality::Text, text_dim);
    let mut visual = FeatureTable::new(Modality::Visual, visual_dim);
    for i in 0..n_items {
        text.rows.push((
            100 + i as u64,
            (0..text_dim).map(|j| ((i * 7 + j * 3) as f32 * 0.41).sin()).collect(),
        ));
        if images[i] {
            visual.rows.push((
                100 + i as u64,
                (0..visual_dim).map(|j| ((i * 5 + j * 2) as f32 * 0.67).cos()).collect(),
            ));
        }
    }
    let sequences = seqs
        .iter()
        .enumerate()
        .map(|(u, s)| UserSequence { user: u, items: s.clone() })
        .collect();
    let users = (0..seqs.len()).map(|u| format!("user{u}")).collect();
    Dataset::from_parts(catalog, &text, &visual, InteractionDataset::new(sequences), users).unwrap()
}

/// Desk-scale run configuration for synthetic data of width `dim`.
pub fn small_run(dim: usize) -> RunConfig {
    RunConfig {
        precision: Precision::Single,
        model: ModelConfig {
            d: 16,
            heads: 2,
            ffn: 32,
            max_seq_len: 20,
            adapter_hidden: Some(16),
            ..ModelConfig::default()
        },
        train: TrainConfig {
            batch_size: 16,
            epochs: 3,
            patience: 10,
            lr: 3e-3,
            clustering: mmrec::interest::ClusteringConfig { k: None, prototypes: PrototypeCount::Absolute(4) },
            ..TrainConfig::default()
        },
        synth: SynthConfig { dim, n_users: 40, n_items: 24, ..SynthConfig::default() },
        ..RunConfig::default()
    }
}
