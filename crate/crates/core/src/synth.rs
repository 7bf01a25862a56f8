//! Deterministic synthetic domains with planted structure.
//!
//! Items belong to clusters; both modality vectors of an item are its cluster
//! center plus independent noise, so text and image tokens of one cluster lie
//! together. Interactions follow a random successor permutation: every user
//! starts at a random item and repeatedly moves to that item's successor.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{mix, seeded};
use crate::store::{
    write_interactions, CatalogItem, DataPaths, Dataset, FeatureTable, InteractionDataset, ItemCatalog, Modality,
    UserSequence, MIN_SEQUENCE_LEN,
};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_users: usize,
    pub n_items: usize,
    pub dim: usize,
    pub n_clusters: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Fraction of items without an image.
    pub image_less: f64,
    /// Standard deviation of cluster centers.
    pub center_scale: f64,
    /// Standard deviation of per-item noise around the center.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            n_users: 200,
            n_items: 60,
            dim: 16,
            n_clusters: 4,
            min_len: 5,
            max_len: 12,
            image_less: 0.2,
            center_scale: 3.0,
            noise: 0.3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_items < 2 || self.dim == 0 || self.n_users == 0 {
            return Err(Error::Config("synthetic data needs at least 2 items, 1 user and dim > 0".into()));
        }
        if self.n_clusters == 0 || self.n_clusters > self.n_items {
            return Err(Error::Config(format!(
                "n_clusters={} must be in [1, n_items={}]",
                self.n_clusters, self.n_items
            )));
        }
        if self.min_len < MIN_SEQUENCE_LEN || self.max_len < self.min_len {
            return Err(Error::Config(format!(
                "sequence lengths must satisfy {MIN_SEQUENCE_LEN} <= min_len <= max_len"
            )));
        }
        if !(0.0..=1.0).contains(&self.image_less) || !(self.noise >= 0.0) || !(self.center_scale >= 0.0) {
            return Err(Error::Config("image_less must be in [0, 1] and scales non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub catalog: ItemCatalog,
    pub text: FeatureTable,
    pub visual: FeatureTable,
    pub interactions: InteractionDataset,
    pub user_ids: Vec<String>,
    /// Planted cluster of each item, by dense index.
    pub cluster_of: Vec<usize>,
    /// Successor of each item, by dense index.
    pub successor: Vec<usize>,
}

/// Item ids are `1..=n_items`, so dense index `i` is id `i + 1`.
pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let n = cfg.n_items;
    let mut rng = seeded(mix(&[cfg.seed, 1]));
    let center_dist = Normal::new(0.0, cfg.center_scale).map_err(|e| Error::Config(e.to_string()))?;
    let noise_dist = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
    let centers: Vec<Vec<f64>> = (0..cfg.n_clusters)
        .map(|_| (0..cfg.dim).map(|_| center_dist.sample(&mut rng)).collect())
        .collect();
    let cluster_of: Vec<usize> = (0..n).map(|i| i % cfg.n_clusters).collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_without = (cfg.image_less * n as f64).round() as usize;
    let mut has_image = vec![true; n];
    for &i in &order[..n_without] {
        has_image[i] = false;
    }

    let mut sample = |c: usize| -> Vec<f32> {
        centers[c]
            .iter()
            .map(|&m| (m + noise_dist.sample(&mut rng)) as f32)
            .collect()
    };
    let mut text = FeatureTable::new(Modality::Text, cfg.dim);
    let mut visual = FeatureTable::new(Modality::Visual, cfg.dim);
    for i in 0..n {
        text.rows.push((i as u64 + 1, sample(cluster_of[i])));
        if has_image[i] {
            visual.rows.push((i as u64 + 1, sample(cluster_of[i])));
        }
    }
    let catalog = ItemCatalog::new(
        (0..n)
            .map(|i| CatalogItem {
                id: i as u64 + 1,
                has_text: true,
                has_image: has_image[i],
            })
            .collect(),
    )?;

    let mut cycle: Vec<usize> = (0..n).collect();
    cycle.shuffle(&mut rng);
    let mut successor = vec![0; n];
    for w in 0..n {
        successor[cycle[w]] = cycle[(w + 1) % n];
    }

    let mut urng = seeded(mix(&[cfg.seed, 2]));
    let mut sequences = Vec::with_capacity(cfg.n_users);
    let mut user_ids = Vec::with_capacity(cfg.n_users);
    for u in 0..cfg.n_users {
        let len = urng.random_range(cfg.min_len..=cfg.max_len);
        let mut cur = urng.random_range(0..n);
        let mut items = Vec::with_capacity(len);
        for _ in 0..len {
            items.push(cur);
            cur = successor[cur];
        }
        sequences.push(UserSequence { user: u, items });
        user_ids.push(format!("u{u}"));
    }
    Ok(SynthData {
        catalog,
        text,
        visual,
        interactions: InteractionDataset::new(sequences),
        user_ids,
        cluster_of,
        successor,
    })
}

impl SynthData {
    /// Writes `catalog.tsv`, `text.mmf`, `visual.mmf` and `interactions.tsv`.
    pub fn write(&self, dir: &Path) -> Result<DataPaths> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let paths = DataPaths::in_dir(dir);
        self.catalog.write(&paths.catalog)?;
        self.text.write(&paths.text_features)?;
        self.visual.write(&paths.visual_features)?;
        write_interactions(&paths.interactions, &self.catalog, &self.interactions, &self.user_ids)?;
        Ok(paths)
    }

    pub fn dataset(&self) -> Result<Dataset> {
        Dataset::from_parts(
            self.catalog.clone(),
            &self.text,
            &self.visual,
            self.interactions.clone(),
            self.user_ids.clone(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bytes() {
        let cfg = SynthConfig { n_items: 12, n_users: 9, ..SynthConfig::default() };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.text.to_bytes(), b.text.to_bytes());
        assert_eq!(a.visual.to_bytes(), b.visual.to_bytes());
        assert_eq!(a.interactions.sequences, b.interactions.sequences);
        let c = generate(&SynthConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.text.to_bytes(), c.text.to_bytes());
    }

    #[test]
    fn structure() {
        let cfg = SynthConfig { n_items: 10, image_less: 0.5, ..SynthConfig::default() };
        let d = generate(&cfg).unwrap();
        assert_eq!(d.visual.rows.len(), 5);
        assert_eq!(d.text.rows.len(), 10);
        let mut seen = d.successor.clone();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        for s in &d.interactions.sequences {
            assert!((cfg.min_len..=cfg.max_len).contains(&s.items.len()));
            for w in s.items.windows(2) {
                assert_eq!(d.successor[w[0]], w[1]);
            }
        }
        let ds = d.dataset().unwrap();
        assert_eq!(ds.image_count(), 5);
    }

    #[test]
    fn all_image_less() {
        let d = generate(&SynthConfig { image_less: 1.0, ..SynthConfig::default() }).unwrap();
        assert!(d.visual.rows.is_empty());
        assert_eq!(&d.visual.to_bytes()[..4], b"MMF1");
        assert!(d.dataset().is_ok());
    }

    #[test]
    fn invalid_sizes() {
        assert!(generate(&SynthConfig { n_clusters: 0, ..SynthConfig::default() }).is_err());
        assert!(generate(&SynthConfig { n_clusters: 100, n_items: 10, ..SynthConfig::default() }).is_err());
        assert!(generate(&SynthConfig { min_len: 2, ..SynthConfig::default() }).is_err());
    }
}
