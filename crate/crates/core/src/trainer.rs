//! Contrastive pre-training and adapter fine-tuning.
//!
//! Pre-training minimizes, per batch,
//! `mean ℓ^{S-I} + λ·mean ℓ^{S-S} + γ·mean ortho` over two augmented views of
//! every history. Fine-tuning drops augmentation and the sequence-sequence
//! term, trains only the adapters (plus the ID table in transductive mode) and
//! stops early on validation Recall@10.

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::eval::{evaluate, Predictor};
use crate::graph::{Graph, Var};
use crate::interest::{refresh, ClusteringConfig, InterestIndex, PrototypeCount, TokenKey};
use crate::matching::{fused_scores, Mode};
use crate::model::{is_adapter_param, BoundModel, Forward, Model, ID_TABLE};
use crate::param::{adam_step, AdamConfig, AdamState, ParamStore};
use crate::rng::{mix, seeded, view_seed};
use crate::store::{Dataset, Example, Modality};
use crate::tensor::Tensor;
use crate::tokenizer::{candidate_embeddings, item_bank, Augmentation, FeatureView};

/// Which view's representations enter the sequence-item loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SiView {
    #[default]
    First,
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub batch_size: usize,
    pub tau: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub lr: f64,
    /// Learning rates tried by [`finetune_search`].
    pub lr_grid: Vec<f64>,
    pub epochs: usize,
    pub patience: usize,
    /// Dropout inside the Transformer blocks.
    pub dropout: f64,
    /// Feature dropout used to build augmented views.
    pub augment_rate: f64,
    pub seed: u64,
    pub clip_norm: f64,
    pub exclude_self: bool,
    pub si_view: SiView,
    pub disable_ss_loss: bool,
    pub disable_ortho: bool,
    pub clustering: ClusteringConfig,
    /// Evaluate on the validation split every this many epochs (0 = never).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Inductive,
            batch_size: 64,
            tau: 0.07,
            lambda: 1e-3,
            gamma: 1e-4,
            lr: 1e-3,
            lr_grid: vec![3e-4, 1e-3, 3e-3, 1e-2],
            epochs: 100,
            patience: 10,
            dropout: 0.1,
            augment_rate: 0.1,
            seed: 42,
            clip_norm: 5.0,
            exclude_self: false,
            si_view: SiView::First,
            disable_ss_loss: false,
            disable_ortho: false,
            clustering: ClusteringConfig {
                k: None,
                prototypes: PrototypeCount::Ratio(0.02),
            },
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.lambda < 0.0 || self.gamma < 0.0 {
            return Err(Error::Config("lambda and gamma must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.augment_rate) {
            return Err(Error::Config("dropout rates must lie in [0, 1)".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }

    fn lambda_eff(&self) -> f64 {
        if self.disable_ss_loss {
            0.0
        } else {
            self.lambda
        }
    }

    fn gamma_eff(&self) -> f64 {
        if self.disable_ortho {
            0.0
        } else {
            self.gamma
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Finetune,
}

/// In-batch sequence-item contrast from a `B × B` score matrix whose entry
/// `(i, j)` scores user `i` against the target of user `j`.
pub fn seq_item_loss(g: &mut Graph, scores: Var, tau: f64) -> Result<Var> {
    let [b, c] = g.shape(scores);
    if b == 0 || b != c {
        return Err(Error::shape("seq_item_loss", format!("score matrix must be square and nonempty, got {b}x{c}")));
    }
    let logits = g.scale(scores, 1.0 / tau)?;
    let logp = g.log_softmax_rows(logits, None)?;
    let sel = eye_selector(g, b, b, 0)?;
    let picked = g.mul(logp, sel)?;
    let total = g.sum_all(picked)?;
    g.scale(total, -1.0 / b as f64)
}

fn eye_selector(g: &mut Graph, rows: usize, cols: usize, offset: usize) -> Result<Var> {
    let mut t = Tensor::zeros(rows, cols);
    for i in 0..rows {
        t.set(i, i + offset, 1.0);
    }
    g.constant(t)
}

/// Sequence-sequence contrast between two views `u`, `u2` (`B × d` each).
/// The normalizer of row `i` runs over `⟨u_i, u_j⟩` and `⟨u_i, u'_j⟩` for all
/// `j`, including `j = i` unless `exclude_self`.
pub fn seq_seq_loss(g: &mut Graph, u: Var, u2: Var, tau: f64, exclude_self: bool) -> Result<Var> {
    let [b, _] = g.shape(u);
    if b == 0 || g.shape(u2) != g.shape(u) {
        return Err(Error::shape("seq_seq_loss", "views must be nonempty and equally shaped"));
    }
    let ut = g.transpose(u)?;
    let u2t = g.transpose(u2)?;
    let same = g.matmul(u, ut)?;
    let cross = g.matmul(u, u2t)?;
    let logits = g.concat_cols(&[same, cross])?;
    let logits = g.scale(logits, 1.0 / tau)?;
    let mask = exclude_self.then(|| {
        let mut m = vec![true; b * 2 * b];
        for i in 0..b {
            m[i * 2 * b + i] = false;
        }
        m
    });
    let logp = g.log_softmax_rows(logits, mask)?;
    let sel = eye_selector(g, b, 2 * b, b)?;
    let picked = g.mul(logp, sel)?;
    let total = g.sum_all(picked)?;
    g.scale(total, -1.0 / b as f64)
}

/// Mean pairwise inner product of encoded interests, `‖Σ_m ξ_m‖² / M²`.
pub fn ortho_reg(g: &mut Graph, xi: Var) -> Result<Var> {
    let m = g.shape(xi)[0];
    if m == 0 {
        return Err(Error::Invalid("orthogonal regularization of an empty sequence".into()));
    }
    let s = g.sum_rows(xi)?;
    let sq = g.mul(s, s)?;
    let total = g.sum_all(sq)?;
    g.scale(total, 1.0 / (m * m) as f64)
}

/// Clean adapted tokens of every item and modality, with their keys.
pub fn clean_tokens(model: &Model, store: &ParamStore, features: FeatureView<'_>) -> Result<(Tensor, Vec<TokenKey>)> {
    let mut g = Graph::new(store.precision());
    let b = model.bind(&mut g, store);
    let bank = item_bank(&mut g, features, &b.adapters)?;
    let mut keys = Vec::new();
    let mut rows = Vec::new();
    for item in 0..bank.len() {
        keys.push(TokenKey { item, modality: Modality::Text });
        rows.push(bank.text.row(item).to_vec());
        if bank.has_visual[item] {
            keys.push(TokenKey { item, modality: Modality::Visual });
            rows.push(bank.visual.row(item).to_vec());
        }
    }
    Ok((Tensor::from_rows(&rows)?, keys))
}

/// Re-clusters the current clean tokens. `None` for models without an
/// interest encoder.
pub fn refresh_index(
    model: &Model,
    store: &ParamStore,
    features: FeatureView<'_>,
    clustering: &ClusteringConfig,
) -> Result<Option<InterestIndex>> {
    if !model.config.architecture.uses_interests() {
        return Ok(None);
    }
    let (tokens, keys) = clean_tokens(model, store, features)?;
    refresh(&tokens, &keys, features.n_items(), clustering).map(Some)
}

/// Loss components of one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: Var,
    pub seq_item: Var,
    pub seq_seq: Option<Var>,
    pub ortho: Option<Var>,
}

/// Everything a batch objective needs besides the graph.
pub struct Objective<'a> {
    pub model: &'a Model,
    pub features: FeatureView<'a>,
    pub index: Option<&'a InterestIndex>,
    pub config: &'a TrainConfig,
    pub stage: Stage,
    pub epoch: u64,
}

impl Objective<'_> {
    fn augmentation(&self, ex: &Example, view: u64) -> Option<Augmentation> {
        if self.stage == Stage::Finetune || self.config.augment_rate == 0.0 {
            return None;
        }
        Some(Augmentation {
            rate: self.config.augment_rate,
            seed: view_seed(self.config.seed, self.epoch, example_key(ex), view),
        })
    }

    fn forward(&self, ex: &Example, view: u64) -> Forward {
        Forward {
            rate: self.config.dropout,
            seed: view_seed(self.config.seed ^ 0xd0, self.epoch, example_key(ex), view),
        }
    }

    /// Builds the batch loss on `g` with parameters bound as `b`.
    pub fn batch_loss(&self, g: &mut Graph, b: &BoundModel, batch: &[&Example]) -> Result<LossParts> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let cfg = self.config;
        let lambda = if self.stage == Stage::Pretrain { cfg.lambda_eff() } else { 0.0 };
        let gamma = cfg.gamma_eff();
        let two_views = self.stage == Stage::Pretrain && (lambda > 0.0 || cfg.si_view == SiView::Mean);
        let protos = match self.index {
            Some(idx) if self.model.config.architecture.uses_interests() => {
                Some((idx, self.model.prototype_tokens(g, b, idx, self.features)?))
            }
            _ => None,
        };
        let mut u1 = Vec::with_capacity(batch.len());
        let mut u2 = Vec::with_capacity(batch.len());
        let mut orthos = Vec::new();
        for ex in batch {
            let st = self.model.represent(
                g,
                b,
                &ex.history,
                self.features,
                protos,
                self.augmentation(ex, 0),
                self.forward(ex, 0),
            )?;
            u1.push(st.u);
            if gamma > 0.0 {
                if let Some(xi) = st.xi {
                    orthos.push(ortho_reg(g, xi)?);
                }
            }
            if two_views {
                let st2 = self.model.represent(
                    g,
                    b,
                    &ex.history,
                    self.features,
                    protos,
                    self.augmentation(ex, 1),
                    self.forward(ex, 1),
                )?;
                u2.push(st2.u);
            }
        }
        let u1 = g.concat_rows(&u1)?;
        let u2 = if two_views { Some(g.concat_rows(&u2)?) } else { None };
        let u_si = match (cfg.si_view, u2) {
            (SiView::Mean, Some(u2)) => {
                let s = g.add(u1, u2)?;
                g.scale(s, 0.5)?
            }
            _ => u1,
        };

        let targets: Vec<usize> = batch.iter().map(|e| e.target).collect();
        let (xt, xv, has_v) = candidate_embeddings(g, &targets, self.features, &b.adapters)?;
        let a = g.softplus(b.var(self.model.fusion_a))?;
        let mut scores = fused_scores(g, u_si, xt, xv, &has_v, a)?;
        if let Some(ids) = self.model.ids {
            let z = g.gather_rows(b.var(ids), &targets)?;
            let zt = g.transpose(z)?;
            let extra = g.matmul(u_si, zt)?;
            scores = g.add(scores, extra)?;
        }
        let seq_item = seq_item_loss(g, scores, cfg.tau)?;
        let mut total = seq_item;

        let seq_seq = match u2 {
            Some(u2) if lambda > 0.0 => {
                let l = seq_seq_loss(g, u1, u2, cfg.tau, cfg.exclude_self)?;
                let w = g.scale(l, lambda)?;
                total = g.add(total, w)?;
                Some(l)
            }
            _ => None,
        };
        let ortho = if orthos.is_empty() {
            None
        } else {
            let stacked = g.concat_rows(&orthos)?;
            let mean = g.mean_rows(stacked)?;
            let w = g.scale(mean, gamma)?;
            total = g.add(total, w)?;
            Some(mean)
        };
        Ok(LossParts {
            total,
            seq_item,
            seq_seq,
            ortho,
        })
    }
}

fn example_key(ex: &Example) -> u64 {
    mix(&[ex.user as u64, ex.history.len() as u64])
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_recall10: Option<f64>,
    pub valid_ndcg10: Option<f64>,
    pub lr: f64,
    pub seconds: f64,
}

pub const LOG_HEADER: &str = "epoch,train_loss,valid_R@10,valid_N@10,lr,seconds";

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"));
        write!(
            f,
            "{},{:.6},{},{},{},{:.3}",
            self.epoch,
            self.train_loss,
            opt(self.valid_recall10),
            opt(self.valid_ndcg10),
            self.lr,
            self.seconds
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub log: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_valid_recall10: Option<f64>,
    pub stopped_early: bool,
    pub optimizer: AdamState,
    /// Index matching the returned parameters.
    pub index: Option<InterestIndex>,
}

/// Runs one epoch over `examples` and returns the mean batch loss.
#[allow(clippy::too_many_arguments)]
fn run_epoch(
    model: &Model,
    store: &mut ParamStore,
    opt: &mut AdamState,
    features: FeatureView<'_>,
    index: Option<&InterestIndex>,
    examples: &[Example],
    cfg: &TrainConfig,
    stage: Stage,
    epoch: usize,
    lr: f64,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut seeded(mix(&[cfg.seed, epoch as u64, 0x5f])));
    let objective = Objective {
        model,
        features,
        index,
        config: cfg,
        stage,
        epoch: epoch as u64,
    };
    let adam = AdamConfig { lr, ..AdamConfig::default() };
    let mut sum = 0.0;
    let mut batches = 0;
    for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
        let mut g = Graph::new(store.precision());
        let b = model.bind(&mut g, store);
        let parts = objective
            .batch_loss(&mut g, &b, &batch)
            .map_err(|e| diagnose(e, epoch, bi))?;
        let loss = g.value(parts.total).item();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at epoch {epoch}, batch {bi}")));
        }
        let grads = g.backward(parts.total).map_err(|e| diagnose(e, epoch, bi))?;
        store.zero_grad();
        store.accumulate(&g, &grads);
        if cfg.clip_norm > 0.0 {
            store.clip_grad_norm(cfg.clip_norm);
        }
        adam_step(store, opt, &adam).map_err(|e| diagnose(e, epoch, bi))?;
        sum += loss;
        batches += 1;
    }
    Ok(if batches > 0 { sum / batches as f64 } else { 0.0 })
}

fn diagnose(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} (epoch {epoch}, batch {batch})")),
        other => other,
    }
}

/// Shared epoch loop. With `early_stop` the best validation parameters are
/// restored at the end.
#[allow(clippy::too_many_arguments)]
fn train_loop(
    model: &Model,
    store: &mut ParamStore,
    data: &Dataset,
    cfg: &TrainConfig,
    stage: Stage,
    lr: f64,
    early_stop: bool,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainReport> {
    cfg.validate()?;
    let features = data.features();
    let examples = data.train.examples();
    let valid = data.valid.examples();
    if examples.is_empty() {
        return Err(Error::Invalid("no training examples".into()));
    }
    let mut opt = AdamState::new(store);
    let mut best: Option<(f64, usize, Vec<Tensor>, Option<InterestIndex>)> = None;
    let mut since_best = 0;
    let mut log = Vec::new();
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let index = refresh_index(model, store, features, &cfg.clustering)?;
        let loss = run_epoch(
            model,
            store,
            &mut opt,
            features,
            index.as_ref(),
            &examples,
            cfg,
            stage,
            epoch,
            lr,
        )?;
        let due = cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0;
        let metrics = if (due || early_stop) && !valid.is_empty() {
            let eval_index = refresh_index(model, store, features, &cfg.clustering)?;
            let pred = Predictor {
                model,
                store,
                features,
                index: eval_index.as_ref(),
            };
            let r = evaluate(&pred, &valid, &[10])?;
            Some((r.recall(10), r.ndcg(10), eval_index))
        } else {
            None
        };
        let entry = EpochLog {
            epoch,
            train_loss: loss,
            valid_recall10: metrics.as_ref().map(|m| m.0),
            valid_ndcg10: metrics.as_ref().map(|m| m.1),
            lr,
            seconds: t0.elapsed().as_secs_f64(),
        };
        log::info!("{entry}");
        on_epoch(&entry);
        log.push(entry);
        if early_stop {
            if let Some((r10, _, eval_index)) = metrics {
                if best.as_ref().is_none_or(|b| r10 > b.0) {
                    best = Some((r10, epoch, store.snapshot(), eval_index));
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= cfg.patience {
                        stopped_early = true;
                        break;
                    }
                }
            }
        }
    }
    let (best_epoch, best_valid, index) = match best {
        Some((r10, epoch, snap, eval_index)) => {
            store.restore(&snap);
            (Some(epoch), Some(r10), eval_index)
        }
        None => (None, None, refresh_index(model, store, features, &cfg.clustering)?),
    };
    Ok(TrainReport {
        log,
        best_epoch,
        best_valid_recall10: best_valid,
        stopped_early,
        optimizer: opt,
        index,
    })
}

/// Pre-trains every parameter.
pub fn pretrain(
    model: &Model,
    store: &mut ParamStore,
    data: &Dataset,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainReport> {
    store.train_only(|_| true);
    train_loop(model, store, data, cfg, Stage::Pretrain, cfg.lr, false, on_epoch)
}

/// Marks the fine-tuning trainable set: adapters, plus the ID table in
/// transductive mode.
pub fn freeze_for_finetune(model: &Model, store: &mut ParamStore, mode: Mode) -> Result<()> {
    if mode == Mode::Transductive && model.ids.is_none() {
        return Err(Error::Invalid("transductive fine-tuning needs an ID table".into()));
    }
    store.train_only(|name| is_adapter_param(name) || (mode == Mode::Transductive && name == ID_TABLE));
    Ok(())
}

/// Fine-tunes with the configured learning rate and early stopping.
pub fn finetune(
    model: &Model,
    store: &mut ParamStore,
    data: &Dataset,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainReport> {
    finetune_with_lr(model, store, data, cfg, cfg.lr, on_epoch)
}

fn finetune_with_lr(
    model: &Model,
    store: &mut ParamStore,
    data: &Dataset,
    cfg: &TrainConfig,
    lr: f64,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainReport> {
    if cfg.mode == Mode::Transductive {
        match model.ids {
            Some(id) if store.get(id).value.rows() == data.n_items() => {}
            _ => return Err(Error::Invalid("transductive fine-tuning needs a catalog-sized ID table".into())),
        }
    }
    freeze_for_finetune(model, store, cfg.mode)?;
    train_loop(model, store, data, cfg, Stage::Finetune, lr, true, on_epoch)
}

/// Fine-tunes once per learning rate in the grid from the same starting
/// point and keeps the run with the best validation Recall@10.
pub fn finetune_search(
    model: &Model,
    store: &mut ParamStore,
    data: &Dataset,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<(f64, TrainReport)> {
    if cfg.lr_grid.is_empty() {
        return Ok((cfg.lr, finetune(model, store, data, cfg, on_epoch)?));
    }
    let start = store.snapshot();
    let mut best: Option<(f64, f64, TrainReport, Vec<Tensor>)> = None;
    for &lr in &cfg.lr_grid {
        store.restore(&start);
        let report = finetune_with_lr(model, store, data, cfg, lr, on_epoch)?;
        let score = report.best_valid_recall10.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|b| score > b.0) {
            best = Some((score, lr, report, store.snapshot()));
        }
    }
    let (_, lr, report, snap) = best.expect("grid is nonempty");
    store.restore(&snap);
    Ok((lr, report))
}
