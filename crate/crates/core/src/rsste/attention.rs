//! Multi-head window attention with Euclidean-distance or scaled dot-product logits.
//!
//! Tokens are laid out `[batch, tokens, channels]`; head `h` owns the channel
//! slice `[h·d, (h+1)·d)` with `d = channels / heads`. The optional bias is a
//! dense `[heads, tokens, tokens]` table added to the logits of every batch
//! entry.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    /// Logits `−sqrt(‖q − k‖² + ε²)`.
    Euclidean,
    /// Logits `q·k / sqrt(d)`.
    DotProduct,
}

impl AttentionKind {
    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::Euclidean => "euclidean",
            AttentionKind::DotProduct => "dot_product",
        }
    }
}

impl std::str::FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(AttentionKind::Euclidean),
            "dot_product" => Ok(AttentionKind::DotProduct),
            other => Err(Error::Config(format!(
                "unknown attention kind `{other}` (expected euclidean|dot_product)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnDims {
    pub batch: usize,
    pub tokens: usize,
    pub channels: usize,
    pub heads: usize,
}

impl AttnDims {
    pub fn resolve<T: Element>(
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        heads: usize,
    ) -> Result<Self> {
        let [batch, tokens, channels] = q.shape()[..] else {
            return Err(Error::dim("attention", "rank", 3, q.ndim()));
        };
        if k.shape() != q.shape() {
            return Err(Error::shapes("attention", q.shape(), k.shape()));
        }
        if v.shape() != q.shape() {
            return Err(Error::shapes("attention", q.shape(), v.shape()));
        }
        if heads == 0 || channels % heads != 0 {
            return Err(Error::dim("attention", "head_dim", heads.max(1), channels));
        }
        if let Some(b) = bias {
            if b.shape() != [heads, tokens, tokens] {
                return Err(Error::shapes(
                    "attention",
                    &[heads, tokens, tokens],
                    b.shape(),
                ));
            }
        }
        Ok(AttnDims {
            batch,
            tokens,
            channels,
            heads,
        })
    }

    fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    fn map_len(&self) -> usize {
        self.heads * self.tokens * self.tokens
    }
}

/// Attention weights and distances kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct AttnSaved<T> {
    /// `[batch, heads, tokens, tokens]` softmax weights.
    pub probs: Vec<T>,
    /// Smoothed distances, same layout (zeros for dot-product).
    pub dist: Vec<T>,
}

fn softmax_in_place<T: Element>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total = total + *x;
    }
    for x in row.iter_mut() {
        *x = *x / total;
    }
}

pub(crate) fn forward<T: Element>(
    q: &[T],
    k: &[T],
    v: &[T],
    bias: Option<&[T]>,
    dims: AttnDims,
    kind: AttentionKind,
    eps: T,
) -> (Vec<T>, AttnSaved<T>) {
    let AttnDims {
        batch,
        tokens: t,
        channels: c,
        heads,
    } = dims;
    let hd = dims.head_dim();
    let scale = T::one() / T::of(hd as f64).sqrt();
    let eps2 = eps * eps;
    let euclid = kind == AttentionKind::Euclidean;
    let mut out = vec![T::zero(); batch * t * c];
    let mut probs = vec![T::zero(); batch * dims.map_len()];
    let mut dist = vec![T::zero(); batch * dims.map_len()];

    out.par_chunks_mut(t * c)
        .zip(probs.par_chunks_mut(dims.map_len()))
        .zip(dist.par_chunks_mut(dims.map_len()))
        .enumerate()
        .for_each(|(b, ((out_b, p_b), d_b))| {
            let base = b * t * c;
            let (q_b, k_b, v_b) = (
                &q[base..base + t * c],
                &k[base..base + t * c],
                &v[base..base + t * c],
            );
            for head in 0..heads {
                let off = head * hd;
                for i in 0..t {
                    let qi = &q_b[i * c + off..i * c + off + hd];
                    let row = &mut p_b[(head * t + i) * t..(head * t + i + 1) * t];
                    for (j, logit) in row.iter_mut().enumerate() {
                        let kj = &k_b[j * c + off..j * c + off + hd];
                        *logit = if euclid {
                            let sq: T = qi
                                .iter()
                                .zip(kj)
                                .map(|(&a, &b)| (a - b) * (a - b))
                                .sum();
                            let d = (sq + eps2).sqrt();
                            d_b[(head * t + i) * t + j] = d;
                            -d
                        } else {
                            qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale
                        };
                        if let Some(bias) = bias {
                            *logit = *logit + bias[(head * t + i) * t + j];
                        }
                    }
                    softmax_in_place(row);
                    let oi = &mut out_b[i * c + off..i * c + off + hd];
                    for (j, &p) in row.iter().enumerate() {
                        let vj = &v_b[j * c + off..j * c + off + hd];
                        for (o, &vv) in oi.iter_mut().zip(vj) {
                            *o = *o + p * vv;
                        }
                    }
                }
            }
        });
    (out, AttnSaved { probs, dist })
}

pub(crate) struct AttnGrads<T> {
    pub dq: Vec<T>,
    pub dk: Vec<T>,
    pub dv: Vec<T>,
    pub dbias: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Element>(
    g_out: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    saved: &AttnSaved<T>,
    dims: AttnDims,
    kind: AttentionKind,
) -> AttnGrads<T> {
    let AttnDims {
        batch,
        tokens: t,
        channels: c,
        heads,
    } = dims;
    let hd = dims.head_dim();
    let scale = T::one() / T::of(hd as f64).sqrt();
    let euclid = kind == AttentionKind::Euclidean;
    let mut dq = vec![T::zero(); batch * t * c];
    let mut dk = vec![T::zero(); batch * t * c];
    let mut dv = vec![T::zero(); batch * t * c];

    let dbias_parts: Vec<Vec<T>> = dq
        .par_chunks_mut(t * c)
        .zip(dk.par_chunks_mut(t * c))
        .zip(dv.par_chunks_mut(t * c))
        .enumerate()
        .map(|(b, ((dq_b, dk_b), dv_b))| {
            let base = b * t * c;
            let (q_b, k_b, v_b, g_b) = (
                &q[base..base + t * c],
                &k[base..base + t * c],
                &v[base..base + t * c],
                &g_out[base..base + t * c],
            );
            let maps = b * dims.map_len();
            let mut dbias = vec![T::zero(); dims.map_len()];
            let mut dp = vec![T::zero(); t * t];
            let mut coef = vec![T::zero(); t * t];
            let ci = c as isize;
            for head in 0..heads {
                let off = head * hd;
                let map = head * t * t;
                let probs = &saved.probs[maps + map..maps + map + t * t];
                // dP = G·Vᵀ
                T::gemm(t, hd, t, T::one(), &g_b[off..], ci, 1, &v_b[off..], 1, ci, T::zero(), &mut dp, t as isize, 1);
                // dV += Pᵀ·G
                T::gemm(t, t, hd, T::one(), probs, 1, t as isize, &g_b[off..], ci, 1, T::one(), &mut dv_b[off..], ci, 1);
                for i in 0..t {
                    let row = i * t..(i + 1) * t;
                    let (p_row, dp_row) = (&probs[row.clone()], &dp[row.clone()]);
                    let rowdot: T = p_row.iter().zip(dp_row).map(|(&p, &d)| p * d).sum();
                    for j in 0..t {
                        let dl = p_row[j] * (dp_row[j] - rowdot);
                        dbias[map + i * t + j] = dbias[map + i * t + j] + dl;
                        coef[i * t + j] = if euclid {
                            let d = saved.dist[maps + map + i * t + j];
                            if d > T::zero() {
                                -dl / d
                            } else {
                                T::zero()
                            }
                        } else {
                            dl * scale
                        };
                    }
                }
                if euclid {
                    // dQ_i += Σ_j coef_ij (q_i − k_j),  dK_j −= Σ_i coef_ij (q_i − k_j)
                    for i in 0..t {
                        let rs: T = coef[i * t..(i + 1) * t].iter().copied().sum();
                        for ch in 0..hd {
                            let at = i * c + off + ch;
                            dq_b[at] = dq_b[at] + rs * q_b[at];
                        }
                    }
                    for j in 0..t {
                        let cs: T = (0..t).map(|i| coef[i * t + j]).sum();
                        for ch in 0..hd {
                            let at = j * c + off + ch;
                            dk_b[at] = dk_b[at] + cs * k_b[at];
                        }
                    }
                    T::gemm(t, t, hd, -T::one(), &coef, t as isize, 1, &k_b[off..], ci, 1, T::one(), &mut dq_b[off..], ci, 1);
                    T::gemm(t, t, hd, -T::one(), &coef, 1, t as isize, &q_b[off..], ci, 1, T::one(), &mut dk_b[off..], ci, 1);
                } else {
                    T::gemm(t, t, hd, T::one(), &coef, t as isize, 1, &k_b[off..], ci, 1, T::one(), &mut dq_b[off..], ci, 1);
                    T::gemm(t, t, hd, T::one(), &coef, 1, t as isize, &q_b[off..], ci, 1, T::one(), &mut dk_b[off..], ci, 1);
                }
            }
            dbias
        })
        .collect();

    let mut dbias = vec![T::zero(); dims.map_len()];
    for part in &dbias_parts {
        for (a, &b) in dbias.iter_mut().zip(part) {
            *a = *a + b;
        }
    }
    AttnGrads { dq, dk, dv, dbias }
}

fn single_head<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    kind: AttentionKind,
    eps: T,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let lift = |x: &Tensor<T>| -> Result<Tensor<T>> {
        match x.shape()[..] {
            [t, d] => x.clone().reshape(&[1, t, d]),
            _ => Err(Error::dim("attention", "rank", 2, x.ndim())),
        }
    };
    let (q3, k3, v3) = (lift(q)?, lift(k)?, lift(v)?);
    let [_, t, d] = q3.shape()[..] else {
        unreachable!()
    };
    let b3 = bias
        .map(|b| b.clone().reshape(&[1, t, t]))
        .transpose()
        .map_err(|_| Error::dim("attention", "bias", t * t, bias.map_or(0, |b| b.numel())))?;
    let dims = AttnDims::resolve(&q3, &k3, &v3, b3.as_ref(), 1)?;
    let (out, saved) = forward(
        q3.data(),
        k3.data(),
        v3.data(),
        b3.as_ref().map(|b| b.data()),
        dims,
        kind,
        eps,
    );
    Ok((Tensor::new(&[t, d], out)?, Tensor::new(&[t, t], saved.probs)?))
}

/// Single-window Euclidean attention `softmax(−‖Q−K‖ + B)·V` on `[T, d]` inputs.
///
/// Returns the output `[T, d]` and the attention matrix `[T, T]`.
pub fn euclidean_attention<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    eps: T,
) -> Result<(Tensor<T>, Tensor<T>)> {
    single_head(q, k, v, bias, AttentionKind::Euclidean, eps)
}

/// Single-window scaled dot-product attention `softmax(QKᵀ/√d + B)·V`.
pub fn dot_product_attention<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    single_head(q, k, v, bias, AttentionKind::DotProduct, T::zero())
}
