//! User-adaptive modality fusion and candidate scoring.
//!
//! A candidate's two modality embeddings are blended with weights
//! `softmax(α⟨u, x^t⟩, α⟨u, x^v⟩)`. Its inner product with `u` then factorizes
//! into the per-modality scores, so full-catalog scoring only needs the two
//! score vectors `U·X^tᵀ` and `U·X^vᵀ`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{sigmoid, softplus, Graph, Var};
use crate::tensor::{dot, Tensor};
use crate::tokenizer::ItemBank;

/// Concentration factor for the free scalar `a`.
pub fn alpha(a: f64) -> f64 {
    softplus(a)
}

/// Weight of the text modality, `e^{αs_t} / (e^{αs_t} + e^{αs_v})`, with the
/// larger exponent shifted to zero.
fn text_weight(st: f64, sv: f64, alpha: f64) -> f64 {
    sigmoid(alpha * (st - sv))
}

/// Fused candidate embedding. Image-less candidates are their text embedding.
pub fn fuse_candidate(u: &[f64], xt: &[f64], xv: Option<&[f64]>, alpha: f64) -> Result<Vec<f64>> {
    if xt.len() != u.len() || xv.is_some_and(|v| v.len() != u.len()) {
        return Err(Error::shape("fuse_candidate", "all vectors must have the same width"));
    }
    let Some(xv) = xv else {
        return Ok(xt.to_vec());
    };
    let (st, sv) = (dot(u, xt), dot(u, xv));
    if !(st * alpha).is_finite() || !(sv * alpha).is_finite() {
        return Err(Error::NonFinite("fusion exponent".into()));
    }
    let wt = text_weight(st, sv, alpha);
    Ok(xt.iter().zip(xv).map(|(t, v)| wt * t + (1.0 - wt) * v).collect())
}

/// Fused score from precomputed modality scores.
pub fn match_score(st: f64, sv: Option<f64>, alpha: f64) -> Result<f64> {
    let Some(sv) = sv else {
        return if st.is_finite() {
            Ok(st)
        } else {
            Err(Error::NonFinite("text score".into()))
        };
    };
    if !st.is_finite() || !sv.is_finite() || !alpha.is_finite() {
        return Err(Error::NonFinite("match score input".into()));
    }
    let wt = text_weight(st, sv, alpha);
    Ok(wt * st + (1.0 - wt) * sv)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Inductive,
    Transductive,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inductive" => Ok(Mode::Inductive),
            "transductive" => Ok(Mode::Transductive),
            _ => Err(Error::Config(format!("unknown mode {s:?}"))),
        }
    }
}

/// Text and visual scores of `u` against every item of the bank.
pub fn modality_scores(u: &[f64], bank: &ItemBank) -> Result<(Vec<f64>, Vec<f64>)> {
    if u.len() != bank.text.cols() {
        return Err(Error::shape("modality_scores", "user width differs from bank width"));
    }
    let st = (0..bank.len()).map(|k| dot(u, bank.text.row(k))).collect();
    let sv = (0..bank.len())
        .map(|k| if bank.has_visual[k] { dot(u, bank.visual.row(k)) } else { 0.0 })
        .collect();
    Ok((st, sv))
}

/// Scores of every catalog item for one user. With an ID table the score is
/// the fused score plus `⟨u, z_k⟩`.
pub fn score_bank(u: &[f64], bank: &ItemBank, alpha: f64, mode: Mode, ids: Option<&Tensor>) -> Result<Vec<f64>> {
    let ids = match (mode, ids) {
        (Mode::Inductive, _) => None,
        (Mode::Transductive, None) => return Err(Error::Invalid("transductive scoring needs an ID table".into())),
        (Mode::Transductive, Some(z)) => {
            if z.shape() != [bank.len(), u.len()] {
                return Err(Error::shape("score_bank", "ID table must be items x d"));
            }
            Some(z)
        }
    };
    let (st, sv) = modality_scores(u, bank)?;
    (0..bank.len())
        .into_par_iter()
        .map(|k| {
            let s = match_score(st[k], bank.has_visual[k].then_some(sv[k]), alpha)?;
            Ok(match ids {
                Some(z) => s + dot(u, z.row(k)),
                None => s,
            })
        })
        .collect()
}

/// Probability over items.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let mut out = scores.to_vec();
    crate::graph::softmax_in_place(&mut out);
    out
}

/// Differentiable fused scores of every row of `u` (`B × d`) against every
/// candidate (`C × d` per modality): a `B × C` matrix.
pub fn fused_scores(g: &mut Graph, u: Var, xt: Var, xv: Var, has_v: &[bool], alpha: Var) -> Result<Var> {
    let xtt = g.transpose(xt)?;
    let st = g.matmul(u, xtt)?;
    let xvt = g.transpose(xv)?;
    let sv = g.matmul(u, xvt)?;
    g.fusion(st, sv, alpha, has_v)
}
