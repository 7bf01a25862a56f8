//! Interest-aware encoder-decoder producing the sequence representation.
//!
//! The encoder runs pre-norm Transformer blocks over a user's interest tokens
//! (no positions). The decoder's queries are the user's item tokens plus
//! learned item-position embeddings (plus item ID embeddings when enabled);
//! each decoder block applies causal self-attention, cross-attention over the
//! encoded interests and a feed-forward layer. The representation is the last
//! decoder output.

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::interest::{translate_ids, InterestIndex};
use crate::param::{ParamId, ParamStore};
use crate::rng::{mix, seeded};
use crate::store::Modality;
use crate::tensor::Tensor;
use crate::tokenizer::{adapt, build_token_sequence, AdapterParams, Augmentation, BoundAdapters, FeatureView, TokenSequence};

/// Structural variant of the sequence model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Architecture {
    #[default]
    EncoderDecoder,
    /// Two encoder blocks over interest tokens, mean-pooled.
    EncoderOnly2,
    /// Two decoder blocks over item tokens without cross-attention; no
    /// clustering is needed.
    DecoderOnly2,
}

impl Architecture {
    pub fn uses_interests(self) -> bool {
        self != Architecture::DecoderOnly2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub ffn: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub max_seq_len: usize,
    pub use_ids: bool,
    pub architecture: Architecture,
    /// Hidden width of the modality adapters; `None` uses raw features as
    /// tokens, which needs raw dims equal to `d`.
    pub adapter_hidden: Option<usize>,
    pub embed_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 300,
            heads: 2,
            ffn: 600,
            enc_layers: 1,
            dec_layers: 1,
            max_seq_len: 50,
            use_ids: false,
            architecture: Architecture::EncoderDecoder,
            adapter_hidden: Some(256),
            embed_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d={} must be a positive multiple of heads={}", self.d, self.heads)));
        }
        if self.ffn == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("ffn and max_seq_len must be positive".into()));
        }
        if self.architecture == Architecture::EncoderDecoder && (self.enc_layers == 0 || self.dec_layers == 0) {
            return Err(Error::Config("encoder and decoder need at least one block each".into()));
        }
        if self.adapter_hidden == Some(0) {
            return Err(Error::Config("adapter hidden width must be positive".into()));
        }
        Ok(())
    }

    fn layer_counts(&self) -> (usize, usize) {
        match self.architecture {
            Architecture::EncoderDecoder => (self.enc_layers, self.dec_layers),
            Architecture::EncoderOnly2 => (2, 0),
            Architecture::DecoderOnly2 => (0, 2),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct AttentionParams {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone, Copy)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

#[derive(Debug, Clone, Copy)]
struct EncoderBlock {
    ln1: Norm,
    attn: AttentionParams,
    ln2: Norm,
    ffn: FeedForward,
}

#[derive(Debug, Clone, Copy)]
struct DecoderBlock {
    ln1: Norm,
    self_attn: AttentionParams,
    cross: Option<(Norm, AttentionParams)>,
    ln3: Norm,
    ffn: FeedForward,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: crate::rng::Rng,
}

impl Init<'_> {
    fn normal(&mut self, name: String, rows: usize, cols: usize, std: f64) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let data = (0..rows * cols).map(|_| dist.sample(&mut self.rng)).collect();
        self.store.add(name, Tensor::new(rows, cols, data)?)
    }

    fn fill(&mut self, name: String, rows: usize, cols: usize, v: f64) -> Result<ParamId> {
        self.store.add(name, Tensor::filled(rows, cols, v))
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        Ok(Linear {
            w: self.normal(format!("{name}.w"), fan_in, fan_out, (1.0 / fan_in as f64).sqrt())?,
            b: self.fill(format!("{name}.b"), 1, fan_out, 0.0)?,
        })
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<Norm> {
        Ok(Norm {
            gamma: self.fill(format!("{name}.gamma"), 1, d, 1.0)?,
            beta: self.fill(format!("{name}.beta"), 1, d, 0.0)?,
        })
    }

    fn attention(&mut self, name: &str, d: usize) -> Result<AttentionParams> {
        Ok(AttentionParams {
            q: self.linear(&format!("{name}.q"), d, d)?,
            k: self.linear(&format!("{name}.k"), d, d)?,
            v: self.linear(&format!("{name}.v"), d, d)?,
            o: self.linear(&format!("{name}.o"), d, d)?,
        })
    }

    fn ffn(&mut self, name: &str, d: usize, hidden: usize) -> Result<FeedForward> {
        Ok(FeedForward {
            up: self.linear(&format!("{name}.up"), d, hidden)?,
            down: self.linear(&format!("{name}.down"), hidden, d)?,
        })
    }

    fn adapter(&mut self, name: &str, raw: usize, hidden: usize, d: usize) -> Result<AdapterParams> {
        let up = self.linear(&format!("{name}.1"), raw, hidden)?;
        let down = self.linear(&format!("{name}.2"), hidden, d)?;
        Ok(AdapterParams {
            w1: up.w,
            b1: up.b,
            w2: down.w,
            b2: down.b,
        })
    }
}

/// Initial value of the free fusion scalar, giving a concentration of 1.
pub fn initial_fusion_a() -> f64 {
    (std::f64::consts::E - 1.0).ln()
}

/// Parameter handles of the full model. Values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub text_adapter: Option<AdapterParams>,
    pub visual_adapter: Option<AdapterParams>,
    pub positions: ParamId,
    pub fusion_a: ParamId,
    pub ids: Option<ParamId>,
    enc: Vec<EncoderBlock>,
    enc_norm: Option<Norm>,
    dec: Vec<DecoderBlock>,
    dec_norm: Option<Norm>,
}

/// True for parameter names that belong to a modality adapter.
pub fn is_adapter_param(name: &str) -> bool {
    name.starts_with("adapter.")
}

pub const ID_TABLE: &str = "id.emb";
pub const FUSION_SCALAR: &str = "fusion.a";

impl Model {
    /// Registers freshly initialized parameters in `store`.
    pub fn new(
        config: ModelConfig,
        text_dim: usize,
        visual_dim: usize,
        n_items: usize,
        store: &mut ParamStore,
        seed: u64,
    ) -> Result<Model> {
        config.validate()?;
        let d = config.d;
        let mut init = Init {
            store,
            rng: seeded(seed),
        };
        let (text_adapter, visual_adapter) = match config.adapter_hidden {
            Some(h) => (
                Some(init.adapter("adapter.text", text_dim, h, d)?),
                Some(init.adapter("adapter.visual", visual_dim, h, d)?),
            ),
            None => {
                if text_dim != d || visual_dim != d {
                    return Err(Error::Config(format!(
                        "without adapters raw feature dims ({text_dim}, {visual_dim}) must equal d={d}"
                    )));
                }
                (None, None)
            }
        };
        let (n_enc, n_dec) = config.layer_counts();
        let mut enc = Vec::with_capacity(n_enc);
        for l in 0..n_enc {
            enc.push(EncoderBlock {
                ln1: init.norm(&format!("enc.{l}.ln1"), d)?,
                attn: init.attention(&format!("enc.{l}.attn"), d)?,
                ln2: init.norm(&format!("enc.{l}.ln2"), d)?,
                ffn: init.ffn(&format!("enc.{l}.ffn"), d, config.ffn)?,
            });
        }
        let enc_norm = if n_enc > 0 { Some(init.norm("enc.ln_f", d)?) } else { None };
        let cross = config.architecture == Architecture::EncoderDecoder;
        let mut dec = Vec::with_capacity(n_dec);
        for l in 0..n_dec {
            let ln1 = init.norm(&format!("dec.{l}.ln1"), d)?;
            let self_attn = init.attention(&format!("dec.{l}.self"), d)?;
            let cross = if cross {
                Some((
                    init.norm(&format!("dec.{l}.ln2"), d)?,
                    init.attention(&format!("dec.{l}.cross"), d)?,
                ))
            } else {
                None
            };
            dec.push(DecoderBlock {
                ln1,
                self_attn,
                cross,
                ln3: init.norm(&format!("dec.{l}.ln3"), d)?,
                ffn: init.ffn(&format!("dec.{l}.ffn"), d, config.ffn)?,
            });
        }
        let dec_norm = if n_dec > 0 { Some(init.norm("dec.ln_f", d)?) } else { None };
        let std = config.embed_std;
        let positions = init.normal("pos.emb".into(), config.max_seq_len, d, std)?;
        let fusion_a = init.fill(FUSION_SCALAR.into(), 1, 1, initial_fusion_a())?;
        let ids = if config.use_ids {
            Some(init.normal(ID_TABLE.into(), n_items, d, std)?)
        } else {
            None
        };
        Ok(Model {
            config,
            text_adapter,
            visual_adapter,
            positions,
            fusion_a,
            ids,
            enc,
            enc_norm,
            dec,
            dec_norm,
        })
    }

    /// Adds an item ID table to a model built without one.
    pub fn attach_ids(&mut self, store: &mut ParamStore, n_items: usize, seed: u64) -> Result<ParamId> {
        if let Some(id) = self.ids {
            return Ok(id);
        }
        let mut init = Init {
            store,
            rng: seeded(mix(&[seed, 0x1d])),
        };
        let id = init.normal(ID_TABLE.into(), n_items, self.config.d, self.config.embed_std)?;
        self.ids = Some(id);
        self.config.use_ids = true;
        Ok(id)
    }

    /// Binds every parameter on `g`.
    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> BoundModel {
        let vars = store.ids().map(|id| g.param(store, id)).collect::<Vec<_>>();
        let adapter = |a: &Option<AdapterParams>| {
            a.map(|a| crate::tokenizer::BoundAdapter::from_vars(
                vars[a.w1.0],
                vars[a.b1.0],
                vars[a.w2.0],
                vars[a.b2.0],
            ))
        };
        BoundModel {
            adapters: BoundAdapters {
                text: adapter(&self.text_adapter),
                visual: adapter(&self.visual_adapter),
                width: self.config.d,
            },
            vars,
        }
    }

    /// Adapted clean tokens of every prototype in `index`, one row each.
    pub fn prototype_tokens(
        &self,
        g: &mut Graph,
        b: &BoundModel,
        index: &InterestIndex,
        features: FeatureView<'_>,
    ) -> Result<Var> {
        if index.is_empty() {
            return Err(Error::Invalid("interest index has no prototypes".into()));
        }
        let mut parts = Vec::new();
        let mut order = vec![0; index.len()];
        let mut offset = 0;
        for m in [Modality::Text, Modality::Visual] {
            let members: Vec<usize> = (0..index.len()).filter(|&p| index.prototypes[p].modality == m).collect();
            if members.is_empty() {
                continue;
            }
            let items: Vec<usize> = members.iter().map(|&p| index.prototypes[p].item).collect();
            let raw = g.constant(features.matrix(m).values.select_rows(&items))?;
            parts.push(adapt(g, raw, &b.adapters, m)?);
            for (k, &p) in members.iter().enumerate() {
                order[p] = offset + k;
            }
            offset += members.len();
        }
        let stacked = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
        g.gather_rows(stacked, &order)
    }

    /// Encoder over interest tokens (`M × d`).
    pub fn encode_context(&self, g: &mut Graph, b: &BoundModel, interests: Var, fwd: Forward) -> Result<Var> {
        if g.shape(interests)[0] == 0 {
            return Err(Error::Invalid("empty interest sequence".into()));
        }
        let norm = self
            .enc_norm
            .ok_or_else(|| Error::Invalid("model has no encoder".into()))?;
        let mut h = interests;
        for (l, blk) in self.enc.iter().enumerate() {
            let n = b.norm(g, blk.ln1, h)?;
            let (a, _) = b.mha(g, &blk.attn, n, n, self.config.heads, false)?;
            let a = fwd.drop(g, a, &[0, l as u64, 0])?;
            h = g.add(h, a)?;
            let n = b.norm(g, blk.ln2, h)?;
            let f = b.ffn(g, &blk.ffn, n)?;
            let f = fwd.drop(g, f, &[0, l as u64, 1])?;
            h = g.add(h, f)?;
        }
        b.norm(g, norm, h)
    }

    /// Decoder over a token sequence, optionally cross-attending to `xi`.
    /// Returns all outputs (`L × d`) and the cross-attention weights of every
    /// block and head.
    pub fn decode_sequence(
        &self,
        g: &mut Graph,
        b: &BoundModel,
        tokens: &TokenSequence,
        xi: Option<Var>,
        fwd: Forward,
    ) -> Result<(Var, Vec<Var>)> {
        if tokens.is_empty() {
            return Err(Error::Invalid("empty token sequence".into()));
        }
        let norm = self
            .dec_norm
            .ok_or_else(|| Error::Invalid("model has no decoder".into()))?;
        let positions: Vec<usize> = tokens.meta.iter().map(|m| m.position - 1).collect();
        if let Some(&p) = positions.iter().find(|&&p| p >= self.config.max_seq_len) {
            return Err(Error::Invalid(format!(
                "item position {} exceeds max_seq_len {}",
                p + 1,
                self.config.max_seq_len
            )));
        }
        let pos = g.gather_rows(b.var(self.positions), &positions)?;
        let mut h = g.add(tokens.tokens, pos)?;
        if let Some(ids) = self.ids {
            let items: Vec<usize> = tokens.meta.iter().map(|m| m.item).collect();
            let z = g.gather_rows(b.var(ids), &items)?;
            h = g.add(h, z)?;
        }
        h = fwd.drop(g, h, &[1, 0, 9])?;
        let mut weights = Vec::new();
        for (l, blk) in self.dec.iter().enumerate() {
            let n = b.norm(g, blk.ln1, h)?;
            let (a, _) = b.mha(g, &blk.self_attn, n, n, self.config.heads, true)?;
            let a = fwd.drop(g, a, &[1, l as u64, 0])?;
            h = g.add(h, a)?;
            if let Some((ln2, cross)) = &blk.cross {
                let xi = xi.ok_or_else(|| Error::Invalid("cross-attention needs encoded interests".into()))?;
                let n = b.norm(g, *ln2, h)?;
                let (c, w) = b.mha(g, cross, n, xi, self.config.heads, false)?;
                weights.extend(w);
                let c = fwd.drop(g, c, &[1, l as u64, 1])?;
                h = g.add(h, c)?;
            }
            let n = b.norm(g, blk.ln3, h)?;
            let f = b.ffn(g, &blk.ffn, n)?;
            let f = fwd.drop(g, f, &[1, l as u64, 2])?;
            h = g.add(h, f)?;
        }
        Ok((b.norm(g, norm, h)?, weights))
    }

    /// Full pipeline for one history: tokens, interest translation, encoder
    /// and decoder. `prototypes` is the output of [`Model::prototype_tokens`]
    /// for the same `index`.
    #[allow(clippy::too_many_arguments)]
    pub fn represent(
        &self,
        g: &mut Graph,
        b: &BoundModel,
        history: &[usize],
        features: FeatureView<'_>,
        interests: Option<(&InterestIndex, Var)>,
        augmentation: Option<Augmentation>,
        fwd: Forward,
    ) -> Result<SequenceState> {
        let start = history.len().saturating_sub(self.config.max_seq_len);
        let history = &history[start..];
        let tokens = build_token_sequence(g, history, features, &b.adapters, augmentation)?;
        let (xi, interest_ids) = if self.config.architecture.uses_interests() {
            let (index, protos) =
                interests.ok_or_else(|| Error::Invalid("this architecture needs an interest index".into()))?;
            let ids = translate_ids(&tokens.meta, index)?;
            let rows = g.gather_rows(protos, &ids)?;
            (Some(self.encode_context(g, b, rows, fwd)?), ids)
        } else {
            (None, Vec::new())
        };
        let (outputs, cross_weights, u) = match self.config.architecture {
            Architecture::EncoderOnly2 => {
                let xi = xi.expect("encoder output");
                let u = g.mean_rows(xi)?;
                (xi, Vec::new(), u)
            }
            _ => {
                let (out, w) = self.decode_sequence(g, b, &tokens, xi, fwd)?;
                let last = g.shape(out)[0] - 1;
                let u = g.gather_rows(out, &[last])?;
                (out, w, u)
            }
        };
        Ok(SequenceState {
            tokens,
            interest_ids,
            xi,
            outputs,
            cross_weights,
            u,
        })
    }
}

/// Dropout settings for one forward pass. `rate = 0` disables dropout.
#[derive(Debug, Clone, Copy, Default)]
pub struct Forward {
    pub rate: f64,
    pub seed: u64,
}

impl Forward {
    pub const EVAL: Forward = Forward { rate: 0.0, seed: 0 };

    fn drop(&self, g: &mut Graph, x: Var, site: &[u64]) -> Result<Var> {
        if self.rate == 0.0 {
            return Ok(x);
        }
        let mut parts = vec![self.seed];
        parts.extend_from_slice(site);
        g.dropout(x, self.rate, mix(&parts))
    }
}

/// Result of [`Model::represent`].
#[derive(Debug, Clone)]
pub struct SequenceState {
    pub tokens: TokenSequence,
    pub interest_ids: Vec<usize>,
    /// Encoded interests (`M × d`), absent for the decoder-only variant.
    pub xi: Option<Var>,
    /// Decoder outputs (`L × d`), or encoder outputs for the encoder-only variant.
    pub outputs: Var,
    pub cross_weights: Vec<Var>,
    /// Sequence representation (`1 × d`).
    pub u: Var,
}

/// Model parameters bound as leaves of one graph.
pub struct BoundModel {
    vars: Vec<Var>,
    pub adapters: BoundAdapters,
}

impl BoundModel {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    fn linear(&self, g: &mut Graph, l: Linear, x: Var) -> Result<Var> {
        let h = g.matmul(x, self.var(l.w))?;
        g.add_row(h, self.var(l.b))
    }

    fn norm(&self, g: &mut Graph, n: Norm, x: Var) -> Result<Var> {
        g.layer_norm(x, self.var(n.gamma), self.var(n.beta))
    }

    fn ffn(&self, g: &mut Graph, f: &FeedForward, x: Var) -> Result<Var> {
        let h = self.linear(g, f.up, x)?;
        let h = g.gelu(h)?;
        self.linear(g, f.down, h)
    }

    fn mha(
        &self,
        g: &mut Graph,
        p: &AttentionParams,
        xq: Var,
        xkv: Var,
        heads: usize,
        causal: bool,
    ) -> Result<(Var, Vec<Var>)> {
        let q = self.linear(g, p.q, xq)?;
        let k = self.linear(g, p.k, xkv)?;
        let v = self.linear(g, p.v, xkv)?;
        let d = g.shape(q)[1];
        let hd = d / heads;
        let mut outs = Vec::with_capacity(heads);
        let mut weights = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * hd, hd)?,
                    g.slice_cols(k, h * hd, hd)?,
                    g.slice_cols(v, h * hd, hd)?,
                )
            };
            let (o, w) = g.attention(qh, kh, vh, causal)?;
            outs.push(o);
            weights.push(w);
        }
        let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
        Ok((self.linear(g, p.o, cat)?, weights))
    }
}
