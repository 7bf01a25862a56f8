//! Item catalog, per-modality feature tables and interaction sequences.
//!
//! File formats:
//!
//! * feature file, little-endian: `"MMF1"`, `u32 dim`, `u64 row_count`, then
//!   `row_count × (u64 item_id, dim × f32)`;
//! * catalog: one `item_id<TAB>has_image(0|1)` line per item;
//! * interactions: one `user_id<TAB>item_id,item_id,...` line per user, items
//!   in timestamp order.
//!
//! Item ids are remapped to dense indices in ascending id order, so ordering
//! by dense index is ordering by item id. User ids are remapped in file order.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"MMF1";

/// Shortest sequence that still leaves a training prefix after holding out the
/// validation and test targets.
pub const MIN_SEQUENCE_LEN: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Text,
    Visual,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Visual => "visual",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CatalogItem {
    pub id: u64,
    pub has_text: bool,
    pub has_image: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ItemCatalog {
    items: Vec<CatalogItem>,
    index: HashMap<u64, usize>,
}

impl ItemCatalog {
    /// Builds a catalog; items are sorted by id and must be unique.
    pub fn new(mut items: Vec<CatalogItem>) -> Result<Self> {
        items.sort_by_key(|it| it.id);
        let mut index = HashMap::with_capacity(items.len());
        for (i, it) in items.iter().enumerate() {
            if !it.has_text {
                return Err(Error::Invalid(format!("item {} has no text", it.id)));
            }
            if index.insert(it.id, i).is_some() {
                return Err(Error::Invalid(format!("duplicate item id {}", it.id)));
            }
        }
        Ok(ItemCatalog { items, index })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut items = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let (id, flag) = line
                .split_once('\t')
                .ok_or_else(|| Error::format(path, format!("line {}: expected item_id<TAB>has_image", ln + 1)))?;
            let id: u64 = id
                .trim()
                .parse()
                .map_err(|_| Error::format(path, format!("line {}: bad item id {id:?}", ln + 1)))?;
            let has_image = match flag.trim() {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::format(
                        path,
                        format!("line {}: has_image must be 0 or 1, got {other:?}", ln + 1),
                    ))
                }
            };
            items.push(CatalogItem {
                id,
                has_text: true,
                has_image,
            });
        }
        Self::new(items).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for it in &self.items {
            out.push_str(&format!("{}\t{}\n", it.id, u8::from(it.has_image)));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[CatalogItem] {
        &self.items
    }

    pub fn item(&self, dense: usize) -> &CatalogItem {
        &self.items[dense]
    }

    pub fn dense(&self, id: u64) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn id_of(&self, dense: usize) -> u64 {
        self.items[dense].id
    }

    /// Writes the dense-index → item-id mapping, one `index<TAB>item_id` line each.
    pub fn write_id_map(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (i, it) in self.items.iter().enumerate() {
            out.push_str(&format!("{i}\t{}\n", it.id));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Raw per-modality feature vectors keyed by item id, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub modality: Modality,
    pub dim: usize,
    pub rows: Vec<(u64, Vec<f32>)>,
}

impl FeatureTable {
    pub fn new(modality: Modality, dim: usize) -> Self {
        FeatureTable {
            modality,
            dim,
            rows: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.rows.len() * (8 + 4 * self.dim));
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.rows.len() as u64).to_le_bytes());
        for (id, v) in &self.rows {
            out.extend_from_slice(&id.to_le_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Parses a feature file without reference to a catalog.
    pub fn from_bytes(bytes: &[u8], modality: Modality, path: &Path) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != FEATURE_MAGIC {
            return Err(Error::format(path, "malformed header"));
        }
        let dim = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        if dim == 0 {
            return Err(Error::format(path, "malformed header: dim is 0"));
        }
        let rec = 8 + 4 * dim;
        let payload = &bytes[16..];
        if payload.len() != count.saturating_mul(rec) {
            let reason = if payload.len() < count.saturating_mul(rec) {
                "truncated row"
            } else {
                "trailing bytes after last row"
            };
            return Err(Error::format(path, reason));
        }
        let mut rows = Vec::with_capacity(count);
        for chunk in payload.chunks_exact(rec) {
            let id = u64::from_le_bytes(chunk[..8].try_into().expect("8 bytes"));
            let v: Vec<f32> = chunk[8..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::format(path, format!("non-finite value in row for item {id}")));
            }
            rows.push((id, v));
        }
        Ok(FeatureTable { modality, dim, rows })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Dense `n_items × dim` matrix in catalog order plus a presence mask.
    pub fn dense(&self, catalog: &ItemCatalog) -> Result<ModalityMatrix> {
        let mut values = Tensor::zeros(catalog.len(), self.dim);
        let mut present = vec![false; catalog.len()];
        for (id, v) in &self.rows {
            let i = catalog.dense(*id).ok_or(Error::UnknownItem(*id))?;
            for (o, x) in values.row_mut(i).iter_mut().zip(v) {
                *o = *x as f64;
            }
            present[i] = true;
        }
        Ok(ModalityMatrix { values, present })
    }
}

/// Reads and validates a feature file against `catalog`.
///
/// Text tables must cover every catalog item; visual tables may cover any
/// subset. Rows for unknown or repeated items are rejected.
pub fn load_features(path: &Path, modality: Modality, catalog: &ItemCatalog) -> Result<FeatureTable> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let table = FeatureTable::from_bytes(&bytes, modality, path)?;
    let mut seen = vec![false; catalog.len()];
    for (id, _) in &table.rows {
        let i = catalog
            .dense(*id)
            .ok_or_else(|| Error::format(path, format!("row for item {id} not in catalog")))?;
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::format(path, format!("duplicate row for item {id}")));
        }
    }
    if modality == Modality::Text {
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::format(
                path,
                format!("text row missing for catalog item {}", catalog.id_of(i)),
            ));
        }
    }
    Ok(table)
}

/// Features of one modality laid out by dense item index.
#[derive(Debug, Clone)]
pub struct ModalityMatrix {
    pub values: Tensor,
    pub present: Vec<bool>,
}

impl ModalityMatrix {
    pub fn dim(&self) -> usize {
        self.values.cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Full,
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSequence {
    pub user: usize,
    pub items: Vec<usize>,
}

/// One next-item prediction case.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub user: usize,
    pub history: Vec<usize>,
    pub target: usize,
}

#[derive(Debug, Clone)]
pub struct InteractionDataset {
    pub split: SplitKind,
    pub sequences: Vec<UserSequence>,
}

impl InteractionDataset {
    pub fn new(sequences: Vec<UserSequence>) -> Self {
        InteractionDataset {
            split: SplitKind::Full,
            sequences,
        }
    }

    pub fn interactions(&self) -> usize {
        self.sequences.iter().map(|s| s.items.len()).sum()
    }

    /// Prediction cases. For a train split every proper prefix predicts the
    /// item that follows it; for the other splits the last item is the target
    /// and everything before it is history.
    pub fn examples(&self) -> Vec<Example> {
        let mut out = Vec::new();
        for s in &self.sequences {
            match self.split {
                SplitKind::Train => {
                    for j in 1..s.items.len() {
                        out.push(Example {
                            user: s.user,
                            history: s.items[..j].to_vec(),
                            target: s.items[j],
                        });
                    }
                }
                _ => {
                    if s.items.len() >= 2 {
                        let n = s.items.len();
                        out.push(Example {
                            user: s.user,
                            history: s.items[..n - 1].to_vec(),
                            target: s.items[n - 1],
                        });
                    }
                }
            }
        }
        out
    }
}

/// Parsed interactions file.
#[derive(Debug, Clone)]
pub struct Interactions {
    pub dataset: InteractionDataset,
    pub user_ids: Vec<String>,
    /// Sequences dropped for being shorter than the minimum length.
    pub dropped: usize,
}

pub fn read_interactions(path: &Path, catalog: &ItemCatalog, min_len: usize) -> Result<Interactions> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut sequences = Vec::new();
    let mut user_ids = Vec::new();
    let mut seen_users = HashMap::new();
    let mut dropped = 0;
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (user, list) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(path, format!("line {}: expected user_id<TAB>items", ln + 1)))?;
        let mut items = Vec::new();
        for tok in list.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let id: u64 = tok
                .parse()
                .map_err(|_| Error::format(path, format!("line {}: bad item id {tok:?}", ln + 1)))?;
            items.push(catalog.dense(id).ok_or(Error::UnknownItem(id))?);
        }
        if seen_users.insert(user.to_string(), ()).is_some() {
            return Err(Error::format(path, format!("duplicate user {user}")));
        }
        if items.len() < min_len {
            dropped += 1;
            continue;
        }
        sequences.push(UserSequence {
            user: user_ids.len(),
            items,
        });
        user_ids.push(user.to_string());
    }
    if dropped > 0 {
        log::warn!("{}: dropped {dropped} sequences shorter than {min_len}", path.display());
    }
    Ok(Interactions {
        dataset: InteractionDataset::new(sequences),
        user_ids,
        dropped,
    })
}

pub fn write_interactions(path: &Path, catalog: &ItemCatalog, ds: &InteractionDataset, user_ids: &[String]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for s in &ds.sequences {
        let items: Vec<String> = s.items.iter().map(|&i| catalog.id_of(i).to_string()).collect();
        writeln!(f, "{}\t{}", user_ids[s.user], items.join(",")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Leave-one-out split: per user the last item is the test target, the one
/// before it the validation target, and the rest is training history.
pub fn split_leave_one_out(
    ds: &InteractionDataset,
) -> Result<(InteractionDataset, InteractionDataset, InteractionDataset)> {
    let mut train = Vec::with_capacity(ds.sequences.len());
    let mut valid = Vec::with_capacity(ds.sequences.len());
    let mut test = Vec::with_capacity(ds.sequences.len());
    for s in &ds.sequences {
        let n = s.items.len();
        if n < MIN_SEQUENCE_LEN {
            return Err(Error::ShortSequence {
                user: s.user.to_string(),
                len: n,
                min: MIN_SEQUENCE_LEN,
            });
        }
        train.push(UserSequence {
            user: s.user,
            items: s.items[..n - 2].to_vec(),
        });
        valid.push(UserSequence {
            user: s.user,
            items: s.items[..n - 1].to_vec(),
        });
        test.push(s.clone());
    }
    let mk = |split, sequences| InteractionDataset { split, sequences };
    Ok((
        mk(SplitKind::Train, train),
        mk(SplitKind::Valid, valid),
        mk(SplitKind::Test, test),
    ))
}

/// Occurrences of each item in the training sequences.
pub fn popularity_counts(train: &InteractionDataset, n_items: usize) -> Vec<u64> {
    let mut counts = vec![0u64; n_items];
    for s in &train.sequences {
        for &i in &s.items {
            counts[i] += 1;
        }
    }
    counts
}

/// Paths of the four input files of one domain.
#[derive(Debug, Clone)]
pub struct DataPaths {
    pub catalog: PathBuf,
    pub text_features: PathBuf,
    pub visual_features: PathBuf,
    pub interactions: PathBuf,
}

impl DataPaths {
    pub fn in_dir(dir: &Path) -> Self {
        DataPaths {
            catalog: dir.join("catalog.tsv"),
            text_features: dir.join("text.mmf"),
            visual_features: dir.join("visual.mmf"),
            interactions: dir.join("interactions.tsv"),
        }
    }
}

/// A loaded, split domain. Immutable once built.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub catalog: ItemCatalog,
    pub text: ModalityMatrix,
    pub visual: ModalityMatrix,
    pub user_ids: Vec<String>,
    pub train: InteractionDataset,
    pub valid: InteractionDataset,
    pub test: InteractionDataset,
}

impl Dataset {
    pub fn load(paths: &DataPaths, min_len: usize) -> Result<Self> {
        let catalog = ItemCatalog::read(&paths.catalog)?;
        let text = load_features(&paths.text_features, Modality::Text, &catalog)?;
        let visual = load_features(&paths.visual_features, Modality::Visual, &catalog)?;
        let inter = read_interactions(&paths.interactions, &catalog, min_len.max(MIN_SEQUENCE_LEN))?;
        Self::from_parts(catalog, &text, &visual, inter.dataset, inter.user_ids)
    }

    pub fn from_parts(
        catalog: ItemCatalog,
        text: &FeatureTable,
        visual: &FeatureTable,
        all: InteractionDataset,
        user_ids: Vec<String>,
    ) -> Result<Self> {
        let text = text.dense(&catalog)?;
        if text.present.iter().any(|p| !p) {
            return Err(Error::Invalid("text features must cover the catalog".into()));
        }
        let mut visual = visual.dense(&catalog)?;
        let mut mismatched = 0;
        for (i, p) in visual.present.iter_mut().enumerate() {
            if *p != catalog.item(i).has_image {
                mismatched += 1;
            }
            *p = *p && catalog.item(i).has_image;
        }
        if mismatched > 0 {
            log::warn!("{mismatched} items disagree between catalog image flags and visual rows; treating them as image-less");
        }
        let (train, valid, test) = split_leave_one_out(&all)?;
        Ok(Dataset {
            catalog,
            text,
            visual,
            user_ids,
            train,
            valid,
            test,
        })
    }

    pub fn n_items(&self) -> usize {
        self.catalog.len()
    }

    pub fn has_image(&self, item: usize) -> bool {
        self.visual.present[item]
    }

    pub fn image_count(&self) -> usize {
        self.visual.present.iter().filter(|p| **p).count()
    }

    pub fn features(&self) -> crate::tokenizer::FeatureView<'_> {
        crate::tokenizer::FeatureView {
            text: &self.text,
            visual: &self.visual,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn catalog2() -> ItemCatalog {
        ItemCatalog::new(vec![
            CatalogItem { id: 10, has_text: true, has_image: true },
            CatalogItem { id: 20, has_text: true, has_image: false },
        ])
        .unwrap()
    }

    #[test]
    fn feature_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.mmf");
        let mut t = FeatureTable::new(Modality::Text, 4);
        t.rows.push((10, vec![1.0, -2.5, 3.25, 0.0]));
        t.rows.push((20, vec![0.1, 0.2, 0.3, 0.4]));
        t.write(&p).unwrap();
        let back = load_features(&p, Modality::Text, &catalog2()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.rows.len(), 2);
        assert!(back.rows.iter().all(|(_, v)| v.len() == 4));
    }

    #[test]
    fn truncated_row_rejected() {
        let mut t = FeatureTable::new(Modality::Text, 4);
        t.rows.push((10, vec![1.0, 2.0, 3.0, 4.0]));
        let mut bytes = t.to_bytes();
        bytes.truncate(bytes.len() - 4);
        let err = FeatureTable::from_bytes(&bytes, Modality::Text, Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("truncated row"), "{err}");
    }

    #[test]
    fn malformed_header_and_non_finite_rejected() {
        assert!(FeatureTable::from_bytes(b"MMF0\x04\0\0\0", Modality::Text, Path::new("x")).is_err());
        let mut t = FeatureTable::new(Modality::Visual, 1);
        t.rows.push((10, vec![f32::NAN]));
        assert!(FeatureTable::from_bytes(&t.to_bytes(), Modality::Visual, Path::new("x")).is_err());
    }

    #[test]
    fn partial_visual_coverage_allowed_text_not() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.mmf");
        let mut t = FeatureTable::new(Modality::Visual, 2);
        t.rows.push((10, vec![1.0, 2.0]));
        t.write(&p).unwrap();
        let v = load_features(&p, Modality::Visual, &catalog2()).unwrap();
        assert_eq!(v.rows.len(), 1);
        let err = load_features(&p, Modality::Text, &catalog2()).unwrap_err();
        assert!(err.to_string().contains("text row missing"));
    }

    #[test]
    fn catalog_rejects_duplicates() {
        let it = CatalogItem { id: 1, has_text: true, has_image: false };
        assert!(ItemCatalog::new(vec![it, it]).is_err());
    }

    fn seq(user: usize, items: &[usize]) -> UserSequence {
        UserSequence { user, items: items.to_vec() }
    }

    #[test]
    fn leave_one_out_four() {
        let ds = InteractionDataset::new(vec![seq(0, &[0, 1, 2, 3])]);
        let (tr, va, te) = split_leave_one_out(&ds).unwrap();
        assert_eq!(tr.sequences[0].items, vec![0, 1]);
        assert_eq!(
            va.examples(),
            vec![Example { user: 0, history: vec![0, 1], target: 2 }]
        );
        assert_eq!(
            te.examples(),
            vec![Example { user: 0, history: vec![0, 1, 2], target: 3 }]
        );
        assert_eq!(
            tr.examples(),
            vec![Example { user: 0, history: vec![0], target: 1 }]
        );
    }

    #[test]
    fn leave_one_out_three_and_two() {
        let ds = InteractionDataset::new(vec![seq(0, &[5, 6, 7])]);
        let (tr, va, te) = split_leave_one_out(&ds).unwrap();
        assert!(tr.examples().is_empty());
        assert_eq!(va.examples()[0].history, vec![5]);
        assert_eq!(va.examples()[0].target, 6);
        assert_eq!(te.examples()[0].history, vec![5, 6]);
        assert_eq!(te.examples()[0].target, 7);

        let short = InteractionDataset::new(vec![seq(0, &[5, 6])]);
        assert!(matches!(split_leave_one_out(&short), Err(Error::ShortSequence { .. })));
    }

    #[test]
    fn popularity() {
        let ds = InteractionDataset {
            split: SplitKind::Train,
            sequences: vec![seq(0, &[0, 1]), seq(1, &[0])],
        };
        let c = popularity_counts(&ds, 3);
        assert_eq!(c, vec![2, 1, 0]);
        assert_eq!(c.iter().sum::<u64>() as usize, ds.interactions());
        let empty = InteractionDataset::new(vec![]);
        assert_eq!(popularity_counts(&empty, 3), vec![0, 0, 0]);
    }

    #[test]
    fn interactions_drop_short_and_reject_unknown() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.tsv");
        fs::write(&p, "u1\t10,20,10\nu2\t10,20\n").unwrap();
        let r = read_interactions(&p, &catalog2(), 3).unwrap();
        assert_eq!(r.dropped, 1);
        assert_eq!(r.dataset.sequences.len(), 1);
        assert_eq!(r.dataset.sequences[0].items, vec![0, 1, 0]);
        fs::write(&p, "u1\t10,99,10\n").unwrap();
        assert!(matches!(read_interactions(&p, &catalog2(), 3), Err(Error::UnknownItem(99))));
    }

    #[test]
    fn catalog_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.tsv");
        fs::write(&p, "20\t0\n10\t1\n").unwrap();
        let c = ItemCatalog::read(&p).unwrap();
        assert_eq!(c.id_of(0), 10);
        assert!(c.item(0).has_image);
        assert!(!c.item(1).has_image);
        fs::write(&p, "20\t2\n").unwrap();
        assert!(ItemCatalog::read(&p).is_err());
    }
}
