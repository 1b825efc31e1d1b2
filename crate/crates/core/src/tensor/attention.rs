use super::{softmax_in_place, Tensor};
use crate::error::{invalid, shape_err, Result};
use crate::Scalar;

/// Output of local multi-head attention.
#[derive(Clone, Debug)]
pub struct AttentionOutput<T> {
    /// `[Q, C]`, heads concatenated along channels.
    pub output: Tensor<T>,
    /// `[Q, heads, R]` softmax weights.
    pub weights: Tensor<T>,
}

struct Dims {
    q: usize,
    r: usize,
    c: usize,
    d: usize,
}

fn check<T: Scalar>(
    query: &Tensor<T>,
    keys: &Tensor<T>,
    values: &Tensor<T>,
    bias: &Tensor<T>,
    heads: usize,
) -> Result<Dims> {
    let (q, c) = query.dims2()?;
    let [kq, r, kc] = keys.shape()[..] else {
        return Err(shape_err!("keys must be [Q, R, C], got {:?}", keys.shape()));
    };
    if (kq, kc) != (q, c) || values.shape() != keys.shape() {
        return Err(shape_err!(
            "query {:?}, keys {:?}, values {:?} disagree",
            query.shape(),
            keys.shape(),
            values.shape()
        ));
    }
    if bias.shape() != [q, r] {
        return Err(shape_err!("bias {:?} for [{}, {}] logits", bias.shape(), q, r));
    }
    if heads == 0 || c % heads != 0 {
        return Err(invalid!("{} heads do not divide {} channels", heads, c));
    }
    Ok(Dims {
        q,
        r,
        c,
        d: c / heads,
    })
}

/// Per query `q` and head `h`:
/// `softmax_j(bias[q, j] + <query_h[q], keys_h[q, j]> / scale) · values_h[q, ·]`.
pub fn local_attention<T: Scalar>(
    query: &Tensor<T>,
    keys: &Tensor<T>,
    values: &Tensor<T>,
    bias: &Tensor<T>,
    heads: usize,
    scale: T,
) -> Result<AttentionOutput<T>> {
    let Dims { q, r, c, d } = check(query, keys, values, bias, heads)?;
    if !(scale > T::zero()) {
        return Err(invalid!("attention scale must be positive, got {}", scale));
    }
    let (qd, kd, vd, bd) = (query.data(), keys.data(), values.data(), bias.data());
    let mut out = vec![T::zero(); q * c];
    let mut weights = vec![T::zero(); q * heads * r];
    for qi in 0..q {
        for h in 0..heads {
            let qh = &qd[qi * c + h * d..qi * c + (h + 1) * d];
            let w = &mut weights[(qi * heads + h) * r..(qi * heads + h + 1) * r];
            for (j, wj) in w.iter_mut().enumerate() {
                let kh = &kd[(qi * r + j) * c + h * d..(qi * r + j) * c + (h + 1) * d];
                let dot: T = qh.iter().zip(kh).map(|(&a, &b)| a * b).sum();
                *wj = bd[qi * r + j] + dot / scale;
            }
            softmax_in_place(w);
            let o = &mut out[qi * c + h * d..qi * c + (h + 1) * d];
            for (j, &wj) in w.iter().enumerate() {
                let vh = &vd[(qi * r + j) * c + h * d..(qi * r + j) * c + (h + 1) * d];
                for (ov, &vv) in o.iter_mut().zip(vh) {
                    *ov += wj * vv;
                }
            }
        }
    }
    Ok(AttentionOutput {
        output: Tensor::new(vec![q, c], out)?,
        weights: Tensor::new(vec![q, heads, r], weights)?,
    })
}

pub struct AttentionGrads<T> {
    pub query: Tensor<T>,
    pub keys: Tensor<T>,
    pub values: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Gradients of [`local_attention`] given its saved softmax weights.
pub fn local_attention_backward<T: Scalar>(
    query: &Tensor<T>,
    keys: &Tensor<T>,
    values: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    heads: usize,
    scale: T,
) -> Result<AttentionGrads<T>> {
    let (q, c) = query.dims2()?;
    let r = keys.shape()[1];
    let d = c / heads;
    let (qd, kd, vd, wd, gd) = (
        query.data(),
        keys.data(),
        values.data(),
        weights.data(),
        grad_out.data(),
    );
    let mut gq = vec![T::zero(); q * c];
    let mut gk = vec![T::zero(); keys.len()];
    let mut gv = vec![T::zero(); values.len()];
    let mut gb = vec![T::zero(); q * r];
    let mut dl = vec![T::zero(); r];
    for qi in 0..q {
        for h in 0..heads {
            let w = &wd[(qi * heads + h) * r..(qi * heads + h + 1) * r];
            let go = &gd[qi * c + h * d..qi * c + (h + 1) * d];
            let mut mean = T::zero();
            for j in 0..r {
                let base = (qi * r + j) * c + h * d;
                let vh = &vd[base..base + d];
                let dw: T = go.iter().zip(vh).map(|(&a, &b)| a * b).sum();
                dl[j] = dw;
                mean += w[j] * dw;
                for (g, &gov) in gv[base..base + d].iter_mut().zip(go) {
                    *g += w[j] * gov;
                }
            }
            for j in 0..r {
                let l = w[j] * (dl[j] - mean);
                gb[qi * r + j] += l;
                let ls = l / scale;
                let base = (qi * r + j) * c + h * d;
                for t in 0..d {
                    gq[qi * c + h * d + t] += ls * kd[base + t];
                    gk[base + t] += ls * qd[qi * c + h * d + t];
                }
            }
        }
    }
    Ok(AttentionGrads {
        query: Tensor::new(vec![q, c], gq)?,
        keys: Tensor::new(keys.shape().to_vec(), gk)?,
        values: Tensor::new(values.shape().to_vec(), gv)?,
        bias: Tensor::new(vec![q, r], gb)?,
    })
}
