//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Precision, Tensor};

/// Result of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max over trainable entries of `|analytic − numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    /// Parameter holding the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
    /// Per-parameter maximum relative error.
    pub per_param: Vec<(String, f64)>,
}

/// Compares the analytic gradient of the scalar built by `f` against central
/// differences with step `h`, over every trainable entry of `store`.
///
/// `f` must be deterministic in the parameter values; it receives a fresh
/// 64-bit graph on every call.
pub fn finite_difference_check<F>(store: &mut ParamStore, h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if store.precision() != Precision::Double {
        return Err(Error::Invalid("gradient checks require 64-bit precision".into()));
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(Precision::Double);
        let out = f(&mut g, store)?;
        let v = g.value(out);
        if v.shape() != [1, 1] {
            return Err(Error::shape("gradcheck", "objective must be a scalar"));
        }
        Ok(v.item())
    };

    store.zero_grad();
    let mut g = Graph::new(Precision::Double);
    let out = f(&mut g, store)?;
    let grads = g.backward(out)?;
    store.accumulate(&g, &grads);
    let analytic: Vec<(ParamId, Tensor)> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, p)| (id, p.grad.clone()))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
        per_param: Vec::new(),
    };
    for (id, grad) in analytic {
        let mut worst_here: f64 = 0.0;
        for j in 0..grad.len() {
            let orig = store.get(id).value.data()[j];
            store.get_mut(id).value.data_mut()[j] = orig + h;
            let fp = eval(store)?;
            store.get_mut(id).value.data_mut()[j] = orig - h;
            let fm = eval(store)?;
            store.get_mut(id).value.data_mut()[j] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite("objective during finite differences".into()));
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = grad.data()[j];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            worst_here = worst_here.max(err);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.get(id).name.clone(), j));
            }
            report.entries_checked += 1;
        }
        report.per_param.push((store.get(id).name.clone(), worst_here));
    }
    store.zero_grad();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let mut s = ParamStore::new(Precision::Double);
        s.add("w", Tensor::new(2, 3, vec![0.3, -1.2, 2.0, 0.0, 5.5, -0.7]).unwrap())
            .unwrap();
        let id = s.id("w").unwrap();
        let rep = finite_difference_check(&mut s, 1e-5, |g, st| {
            let w = g.param(st, id);
            let sq = g.mul(w, w)?;
            g.sum_all(sq)
        })
        .unwrap();
        assert!(rep.max_rel_error < 1e-8, "{rep:?}");
        assert_eq!(rep.entries_checked, 6);
    }

    #[test]
    fn unused_parameter_has_exact_zero_gradient() {
        let mut s = ParamStore::new(Precision::Double);
        let a = s.add("a", Tensor::row_vector(vec![1.0, 2.0])).unwrap();
        let b = s.add("b", Tensor::row_vector(vec![3.0])).unwrap();
        let mut g = Graph::new(Precision::Double);
        let av = g.param(&s, a);
        let _bv = g.param(&s, b);
        let out = g.sum_all(av).unwrap();
        let grads = g.backward(out).unwrap();
        s.accumulate(&g, &grads);
        assert_eq!(s.get(b).grad.data(), &[0.0]);
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut s = ParamStore::new(Precision::Double);
        let x = s
            .add("x", Tensor::new(3, 4, (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect()).unwrap())
            .unwrap();
        let w = s
            .add("w", Tensor::new(4, 4, (0..16).map(|i| ((i * 3 % 7) as f64 - 3.0) * 0.2).collect()).unwrap())
            .unwrap();
        let gm = s.add("gamma", Tensor::row_vector(vec![1.0, 0.5, -0.3, 2.0])).unwrap();
        let bt = s.add("beta", Tensor::row_vector(vec![0.1, 0.0, -0.2, 0.3])).unwrap();
        let a = s.add("a", Tensor::scalar(0.4)).unwrap();
        let rep = finite_difference_check(&mut s, 1e-5, |g, st| {
            let x = g.param(st, x);
            let w = g.param(st, w);
            let gm = g.param(st, gm);
            let bt = g.param(st, bt);
            let a = g.param(st, a);
            let h = g.matmul(x, w)?;
            let h = g.layer_norm(h, gm, bt)?;
            let h = g.gelu(h)?;
            let h = g.dropout(h, 0.25, 3)?;
            let (att, _) = g.attention(h, x, h, false)?;
            let (catt, _) = g.attention(h, h, x, true)?;
            let both = g.add(att, catt)?;
            let left = g.slice_cols(both, 0, 2)?;
            let right = g.slice_cols(both, 2, 2)?;
            let c = g.concat_cols(&[right, left])?;
            let r = g.concat_rows(&[c, x])?;
            let gath = g.gather_rows(r, &[0, 5, 5, 2])?;
            let sp = g.softplus(a)?;
            let st_ = g.slice_cols(gath, 0, 3)?;
            let sv_ = g.slice_cols(gath, 1, 3)?;
            let fused = g.fusion(st_, sv_, sp, &[true, false, true])?;
            let ls = g.log_softmax_rows(fused, None)?;
            let masked = g.log_softmax_rows(fused, Some(vec![true, false, true].repeat(4)))?;
            let tr = g.transpose(ls)?;
            let p = g.matmul(tr, masked)?;
            let mr = g.mean_rows(p)?;
            let bias = g.slice_cols(gm, 0, 3)?;
            let p2 = g.add_row(p, bias)?;
            let p3 = g.sub(p2, p)?;
            let p4 = g.scale(p3, 0.7)?;
            let s1 = g.sum_all(p4)?;
            let s2 = g.sum_all(mr)?;
            let sq = g.mul(s2, s2)?;
            g.add(s1, sq)
        })
        .unwrap();
        assert!(rep.max_rel_error < 1e-6, "{rep:?}");
    }
}
