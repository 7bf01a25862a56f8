//! Item tokens: feature augmentation, modality adapters and sequence assembly.

use crate::error::{Error, Result};
use crate::graph::{dropout_mask, Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::rng::mix;
use crate::store::{ModalityMatrix, Modality};
use crate::tensor::Tensor;

/// Borrowed per-modality raw features laid out by dense item index.
#[derive(Clone, Copy)]
pub struct FeatureView<'a> {
    pub text: &'a ModalityMatrix,
    pub visual: &'a ModalityMatrix,
}

impl FeatureView<'_> {
    pub fn n_items(&self) -> usize {
        self.text.values.rows()
    }

    pub fn has_image(&self, item: usize) -> bool {
        self.visual.present[item]
    }

    pub fn matrix(&self, m: Modality) -> &ModalityMatrix {
        match m {
            Modality::Text => self.text,
            Modality::Visual => self.visual,
        }
    }
}

/// Inverted dropout on raw features. `rate = 0` is the identity.
pub fn augment(features: &Tensor, rate: f64, seed: u64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Invalid(format!("augmentation rate {rate} outside [0, 1)")));
    }
    if rate == 0.0 {
        return Ok(features.clone());
    }
    let mask = dropout_mask(features.len(), rate, seed);
    let data = features.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
    Tensor::new(features.rows(), features.cols(), data)
}

/// Two-layer bottleneck adapter `W2·GELU(W1·f + b1) + b2` for one modality.
#[derive(Debug, Clone, Copy)]
pub struct AdapterParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundAdapter {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl BoundAdapter {
    pub fn from_vars(w1: Var, b1: Var, w2: Var, b2: Var) -> Self {
        BoundAdapter { w1, b1, w2, b2 }
    }
}

impl AdapterParams {
    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> BoundAdapter {
        BoundAdapter {
            w1: g.param(store, self.w1),
            b1: g.param(store, self.b1),
            w2: g.param(store, self.w2),
            b2: g.param(store, self.b2),
        }
    }

    pub fn input_dim(&self, store: &ParamStore) -> usize {
        store.get(self.w1).value.rows()
    }
}

/// Adapters for both modalities. `None` means the raw features are used as
/// tokens directly, which requires raw width equal to the latent width.
#[derive(Debug, Clone, Copy)]
pub struct BoundAdapters {
    pub text: Option<BoundAdapter>,
    pub visual: Option<BoundAdapter>,
    pub width: usize,
}

impl BoundAdapters {
    fn get(&self, m: Modality) -> Option<&BoundAdapter> {
        match m {
            Modality::Text => self.text.as_ref(),
            Modality::Visual => self.visual.as_ref(),
        }
    }
}

/// Maps a batch of raw feature rows of one modality into latent tokens.
pub fn adapt(g: &mut Graph, features: Var, adapters: &BoundAdapters, modality: Modality) -> Result<Var> {
    let Some(a) = adapters.get(modality) else {
        if g.shape(features)[1] != adapters.width {
            return Err(Error::shape(
                "adapt",
                format!(
                    "identity adapter needs {} raw dims, got {}",
                    adapters.width,
                    g.shape(features)[1]
                ),
            ));
        }
        return Ok(features);
    };
    if g.shape(features)[1] != g.shape(a.w1)[0] {
        return Err(Error::shape(
            "adapt",
            format!(
                "{modality} features have {} dims, adapter expects {}",
                g.shape(features)[1],
                g.shape(a.w1)[0]
            ),
        ));
    }
    let h = g.matmul(features, a.w1)?;
    let h = g.add_row(h, a.b1)?;
    let h = g.gelu(h)?;
    let h = g.matmul(h, a.w2)?;
    g.add_row(h, a.b2)
}

/// Where each row of a token matrix came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenMeta {
    pub item: usize,
    pub modality: Modality,
    /// 1-based position of the item in the (possibly truncated) history.
    pub position: usize,
}

/// Adapted item tokens of one history, text then visual per item.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub tokens: Var,
    pub meta: Vec<TokenMeta>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }
}

/// Per-view augmentation settings.
#[derive(Debug, Clone, Copy)]
pub struct Augmentation {
    pub rate: f64,
    pub seed: u64,
}

/// Builds the token sequence of `history`. For every item in order the text
/// token is emitted, followed by the visual token when the item has an image;
/// both carry the item's position.
pub fn build_token_sequence(
    g: &mut Graph,
    history: &[usize],
    features: FeatureView<'_>,
    adapters: &BoundAdapters,
    augmentation: Option<Augmentation>,
) -> Result<TokenSequence> {
    if history.is_empty() {
        return Err(Error::Invalid("empty history".into()));
    }
    let raw_text = features.text.values.select_rows(history);
    let with_image: Vec<usize> = history.iter().copied().filter(|&i| features.has_image(i)).collect();
    let raw_visual = features.visual.values.select_rows(&with_image);
    let (raw_text, raw_visual) = match augmentation {
        Some(a) => (
            augment(&raw_text, a.rate, mix(&[a.seed, 0]))?,
            augment(&raw_visual, a.rate, mix(&[a.seed, 1]))?,
        ),
        None => (raw_text, raw_visual),
    };
    let ft = g.constant(raw_text)?;
    let xt = adapt(g, ft, adapters, Modality::Text)?;
    let stacked = if with_image.is_empty() {
        xt
    } else {
        let fv = g.constant(raw_visual)?;
        let xv = adapt(g, fv, adapters, Modality::Visual)?;
        g.concat_rows(&[xt, xv])?
    };

    let t_count = history.len();
    let mut order = Vec::with_capacity(t_count + with_image.len());
    let mut meta = Vec::with_capacity(order.capacity());
    let mut v_next = 0;
    for (t, &item) in history.iter().enumerate() {
        order.push(t);
        meta.push(TokenMeta {
            item,
            modality: Modality::Text,
            position: t + 1,
        });
        if features.has_image(item) {
            order.push(t_count + v_next);
            v_next += 1;
            meta.push(TokenMeta {
                item,
                modality: Modality::Visual,
                position: t + 1,
            });
        }
    }
    let tokens = g.gather_rows(stacked, &order)?;
    Ok(TokenSequence { tokens, meta })
}

/// Clean candidate embeddings of every catalog item.
#[derive(Debug, Clone)]
pub struct ItemBank {
    pub text: Tensor,
    /// Visual embeddings; rows of image-less items are zero and unused.
    pub visual: Tensor,
    pub has_visual: Vec<bool>,
}

impl ItemBank {
    pub fn len(&self) -> usize {
        self.text.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.text.rows() == 0
    }

    /// `(x^t, x^v)` of one item; `x^v` is absent for image-less items.
    pub fn candidate(&self, item: usize) -> Result<(&[f64], Option<&[f64]>)> {
        if item >= self.len() {
            return Err(Error::Invalid(format!("unknown item index {item}")));
        }
        let v = self.has_visual[item].then(|| self.visual.row(item));
        Ok((self.text.row(item), v))
    }
}

/// Candidate embeddings of `items` on a graph, without augmentation.
///
/// Returns `(x^t, x^v, has_visual)`, each matrix `items.len() × d`. Rows of
/// `x^v` for image-less items are constant zeros.
pub fn candidate_embeddings(
    g: &mut Graph,
    items: &[usize],
    features: FeatureView<'_>,
    adapters: &BoundAdapters,
) -> Result<(Var, Var, Vec<bool>)> {
    if let Some(&bad) = items.iter().find(|&&i| i >= features.n_items()) {
        return Err(Error::Invalid(format!("unknown item index {bad}")));
    }
    let ft = g.constant(features.text.values.select_rows(items))?;
    let xt = adapt(g, ft, adapters, Modality::Text)?;
    let has_v: Vec<bool> = items.iter().map(|&i| features.has_image(i)).collect();
    let with_image: Vec<usize> = items.iter().copied().filter(|&i| features.has_image(i)).collect();
    let zero = g.constant(Tensor::zeros(1, adapters.width))?;
    let xv = if with_image.is_empty() {
        g.gather_rows(zero, &vec![0; items.len()])?
    } else {
        let fv = g.constant(features.visual.values.select_rows(&with_image))?;
        let adapted = adapt(g, fv, adapters, Modality::Visual)?;
        let table = g.concat_rows(&[adapted, zero])?;
        let mut next = 0;
        let idx: Vec<usize> = has_v
            .iter()
            .map(|&h| {
                if h {
                    next += 1;
                    next - 1
                } else {
                    with_image.len()
                }
            })
            .collect();
        g.gather_rows(table, &idx)?
    };
    Ok((xt, xv, has_v))
}

/// Builds the clean [`ItemBank`] for every catalog item.
pub fn item_bank(g: &mut Graph, features: FeatureView<'_>, adapters: &BoundAdapters) -> Result<ItemBank> {
    let all: Vec<usize> = (0..features.n_items()).collect();
    let (xt, xv, has_visual) = candidate_embeddings(g, &all, features, adapters)?;
    Ok(ItemBank {
        text: g.value(xt).clone(),
        visual: g.value(xv).clone(),
        has_visual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::gelu;
    use crate::tensor::Precision;

    fn features(n: usize, dim: usize, images: &[bool]) -> (ModalityMatrix, ModalityMatrix) {
        let text = ModalityMatrix {
            values: Tensor::new(n, dim, (0..n * dim).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap(),
            present: vec![true; n],
        };
        let visual = ModalityMatrix {
            values: Tensor::new(n, dim, (0..n * dim).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap(),
            present: images.to_vec(),
        };
        (text, visual)
    }

    fn identity(width: usize) -> BoundAdapters {
        BoundAdapters { text: None, visual: None, width }
    }

    #[test]
    fn augment_rate_zero_and_determinism() {
        let x = Tensor::new(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(augment(&x, 0.0, 9).unwrap(), x);
        assert_eq!(augment(&x, 0.4, 9).unwrap(), augment(&x, 0.4, 9).unwrap());
        assert!(augment(&x, 1.0, 9).is_err());
    }

    #[test]
    fn augment_is_unbiased() {
        let x = Tensor::new(1, 100_000, vec![2.0; 100_000]).unwrap();
        let y = augment(&x, 0.5, 1234).unwrap();
        let mean = y.data().iter().sum::<f64>() / 100_000.0;
        assert!((mean - 2.0).abs() / 2.0 < 0.01, "{mean}");
    }

    fn scalar_adapter(store: &mut ParamStore, w1: f64, b1: f64, w2: f64, b2: f64) -> AdapterParams {
        AdapterParams {
            w1: store.add("w1", Tensor::scalar(w1)).unwrap(),
            b1: store.add("b1", Tensor::scalar(b1)).unwrap(),
            w2: store.add("w2", Tensor::scalar(w2)).unwrap(),
            b2: store.add("b2", Tensor::scalar(b2)).unwrap(),
        }
    }

    #[test]
    fn hand_set_adapter() {
        let mut s = ParamStore::new(Precision::Double);
        let p = scalar_adapter(&mut s, 2.0, 0.0, 3.0, 1.0);
        let mut g = Graph::new(Precision::Double);
        let b = p.bind(&mut g, &s);
        let ad = BoundAdapters { text: Some(b), visual: None, width: 1 };
        let f = g.constant(Tensor::scalar(0.5)).unwrap();
        let y = adapt(&mut g, f, &ad, Modality::Text).unwrap();
        // Φ(1) = (1 + erf(1/√2)) / 2 = 0.841344746068543.
        let gelu1 = 0.5 * (1.0 + 0.682_689_492_137_085_9);
        assert!((gelu(1.0) - gelu1).abs() < 1e-12);
        assert!((g.value(y).item() - (3.0 * gelu1 + 1.0)).abs() < 1e-12);
        assert!((g.value(y).item() - 3.524_034_238).abs() < 1e-8);
    }

    #[test]
    fn zero_adapter_gives_zero_tokens_of_width_d() {
        let mut s = ParamStore::new(Precision::Double);
        let p = AdapterParams {
            w1: s.add("w1", Tensor::zeros(3, 5)).unwrap(),
            b1: s.add("b1", Tensor::zeros(1, 5)).unwrap(),
            w2: s.add("w2", Tensor::zeros(5, 4)).unwrap(),
            b2: s.add("b2", Tensor::zeros(1, 4)).unwrap(),
        };
        let mut g = Graph::new(Precision::Double);
        let b = p.bind(&mut g, &s);
        let ad = BoundAdapters { text: Some(b), visual: Some(b), width: 4 };
        for n in [1, 7] {
            let f = g.constant(Tensor::filled(n, 3, 1.5)).unwrap();
            let y = adapt(&mut g, f, &ad, Modality::Visual).unwrap();
            assert_eq!(g.shape(y), [n, 4]);
            assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        }
        let bad = g.constant(Tensor::zeros(1, 2)).unwrap();
        assert!(adapt(&mut g, bad, &ad, Modality::Text).is_err());
    }

    #[test]
    fn interleaved_order_and_positions() {
        let (t, v) = features(3, 2, &[true, true, false]);
        let fv = FeatureView { text: &t, visual: &v };
        let mut g = Graph::new(Precision::Double);
        let seq = build_token_sequence(&mut g, &[0, 1], fv, &identity(2), None).unwrap();
        let mods: Vec<_> = seq.meta.iter().map(|m| (m.item, m.modality, m.position)).collect();
        assert_eq!(
            mods,
            vec![
                (0, Modality::Text, 1),
                (0, Modality::Visual, 1),
                (1, Modality::Text, 2),
                (1, Modality::Visual, 2)
            ]
        );
        let x = g.value(seq.tokens);
        assert_eq!(x.row(0), t.values.row(0));
        assert_eq!(x.row(1), v.values.row(0));
        assert_eq!(x.row(3), v.values.row(1));

        let seq = build_token_sequence(&mut g, &[0, 2], fv, &identity(2), None).unwrap();
        assert_eq!(seq.len(), 3);
        assert_eq!(seq.meta[2].modality, Modality::Text);
        assert_eq!(seq.meta[2].position, 2);
        assert!(build_token_sequence(&mut g, &[], fv, &identity(2), None).is_err());
    }

    #[test]
    fn candidates_fall_back_without_image() {
        let (t, v) = features(3, 2, &[true, false, true]);
        let fv = FeatureView { text: &t, visual: &v };
        let mut g = Graph::new(Precision::Double);
        let bank = item_bank(&mut g, fv, &identity(2)).unwrap();
        let (xt, xv) = bank.candidate(0).unwrap();
        assert_eq!(xt, t.values.row(0));
        assert_eq!(xv.unwrap(), v.values.row(0));
        assert!(bank.candidate(1).unwrap().1.is_none());
        assert!(bank.candidate(3).is_err());
        let again = item_bank(&mut g, fv, &identity(2)).unwrap();
        assert_eq!(again.text, bank.text);
        assert_eq!(again.visual, bank.visual);
    }
}
