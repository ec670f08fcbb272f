//! Residual stack of simplified Swin layers with Euclidean window attention.
//!
//! Each layer normalizes its input tokens once and feeds them to two parallel
//! branches: multi-head window attention (queries and keys are linear
//! projections of the normalized tokens, values are the tokens themselves)
//! and a two-layer GELU MLP. The branches are mixed by learnable scalars
//! `alpha` and `beta`; there is no skip connection inside a layer. The stack
//! adds a final per-token linear map and one outer residual.
//!
//! Odd layers (1-indexed) use regular windows, even layers windows shifted by
//! `⌊M/2⌋`. Feature maps whose sides are not multiples of `M` are reflect
//! padded before partitioning and cropped afterwards.

pub mod attention;

use rand_chacha::ChaCha8Rng;

pub use attention::{dot_product_attention, euclidean_attention, AttentionKind};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RssteConfig {
    /// Number of SSTE layers (J).
    pub layers: usize,
    /// Window side (M).
    pub window: usize,
    pub heads: usize,
    pub channels: usize,
    pub attention_kind: AttentionKind,
    pub mlp_ratio: usize,
    /// ε in `sqrt(‖q − k‖² + ε²)`.
    pub epsilon_norm: f64,
}

impl RssteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("RSSTE needs at least one layer".into()));
        }
        if self.window < 2 {
            return Err(Error::Config(format!(
                "window size must be >= 2, got {}",
                self.window
            )));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads={} must divide channels={}",
                self.heads, self.channels
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be >= 1".into()));
        }
        Ok(())
    }

    /// Cyclic shift used by layer `j` (1-indexed).
    pub fn shift_for_layer(&self, j: usize) -> usize {
        if j % 2 == 1 {
            0
        } else {
            self.window / 2
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SsteParams {
    pub norm_gamma: ParamId,
    pub norm_beta: ParamId,
    /// `[C, C]` query projection.
    pub p_q: ParamId,
    /// `[C, C]` key projection.
    pub p_k: ParamId,
    /// `[heads, (2M−1)²]` relative position table.
    pub bias_table: ParamId,
    pub alpha: ParamId,
    pub beta: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RssteParams {
    pub layers: Vec<SsteParams>,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl SsteParams {
    pub fn init<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &RssteConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let c = cfg.channels;
        let hidden = c * cfg.mlp_ratio;
        let span = (2 * cfg.window - 1) * (2 * cfg.window - 1);
        let mut init = Init { rng };
        SsteParams {
            norm_gamma: store.add(format!("{prefix}.norm.gamma"), Tensor::full(&[c], T::one())),
            norm_beta: store.add(format!("{prefix}.norm.beta"), Tensor::zeros(&[c])),
            p_q: store.add(format!("{prefix}.p_q"), init.fan_in_uniform(&[c, c], c)),
            p_k: store.add(format!("{prefix}.p_k"), init.fan_in_uniform(&[c, c], c)),
            bias_table: store.add(
                format!("{prefix}.bias_table"),
                init.uniform(&[cfg.heads, span], 0.02),
            ),
            alpha: store.add(format!("{prefix}.alpha"), Tensor::scalar(T::one())),
            beta: store.add(format!("{prefix}.beta"), Tensor::scalar(T::of(0.1))),
            mlp_w1: store.add(format!("{prefix}.mlp.w1"), init.fan_in_uniform(&[c, hidden], c)),
            mlp_b1: store.add(format!("{prefix}.mlp.b1"), init.fan_in_uniform(&[hidden], c)),
            mlp_w2: store.add(
                format!("{prefix}.mlp.w2"),
                init.fan_in_uniform(&[hidden, c], hidden),
            ),
            mlp_b2: store.add(format!("{prefix}.mlp.b2"), init.fan_in_uniform(&[c], hidden)),
        }
    }
}

impl RssteParams {
    pub fn init<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &RssteConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let layers = (1..=cfg.layers)
            .map(|j| SsteParams::init(store, &format!("{prefix}.sste{j}"), cfg, rng))
            .collect();
        let c = cfg.channels;
        let mut init = Init { rng };
        RssteParams {
            layers,
            out_w: store.add(format!("{prefix}.out.w"), init.fan_in_uniform(&[c, c], c)),
            out_b: store.add(format!("{prefix}.out.b"), init.fan_in_uniform(&[c], c)),
        }
    }

    /// Every linear-layer weight matrix in the stack, in a fixed order.
    pub fn linear_weights(&self) -> Vec<ParamId> {
        let mut ids = Vec::with_capacity(self.layers.len() * 4 + 1);
        for l in &self.layers {
            ids.extend([l.p_q, l.p_k, l.mlp_w1, l.mlp_w2]);
        }
        ids.push(self.out_w);
        ids
    }
}

/// One SSTE layer on window tokens `[B, M², C]`:
/// `α·MSA(Norm(x)) + β·MLP(Norm(x))`.
pub fn sste_layer<T: Element>(
    g: &mut Graph<T>,
    tokens: Var,
    p: &SsteParams,
    bound: &Bound,
    cfg: &RssteConfig,
) -> Result<Var> {
    let normed = g.layer_norm(
        tokens,
        bound.var(p.norm_gamma),
        bound.var(p.norm_beta),
        LAYER_NORM_EPS,
    )?;
    let q = g.linear(normed, bound.var(p.p_q), None)?;
    let k = g.linear(normed, bound.var(p.p_k), None)?;
    let bias = g.relative_bias(bound.var(p.bias_table), cfg.window)?;
    let msa = g.attention(
        q,
        k,
        normed,
        Some(bias),
        cfg.heads,
        cfg.attention_kind,
        cfg.epsilon_norm,
    )?;
    let hidden = g.linear(normed, bound.var(p.mlp_w1), Some(bound.var(p.mlp_b1)))?;
    let hidden = g.gelu(hidden);
    let mlp = g.linear(hidden, bound.var(p.mlp_w2), Some(bound.var(p.mlp_b2)))?;
    let a = g.scalar_mul(msa, bound.var(p.alpha))?;
    let b = g.scalar_mul(mlp, bound.var(p.beta))?;
    g.add(a, b)
}

/// Full RSSTE on an NCHW feature map: `Linear(F_J) + F_0`.
pub fn rsste_forward<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    p: &RssteParams,
    bound: &Bound,
    cfg: &RssteConfig,
) -> Result<Var> {
    let (_, c, _, _) = g.value(x).nchw("rsste")?;
    if c != cfg.channels {
        return Err(Error::dim("rsste", "channels", cfg.channels, c));
    }
    let mut f = x;
    for (j, layer) in p.layers.iter().enumerate() {
        let shift = cfg.shift_for_layer(j + 1);
        let (tokens, geom) = g.window_partition(f, cfg.window, shift)?;
        let out = sste_layer(g, tokens, layer, bound, cfg)?;
        f = g.window_reverse(out, &geom)?;
    }
    let nhwc = g.channels_last(f)?;
    let lin = g.linear(nhwc, bound.var(p.out_w), Some(bound.var(p.out_b)))?;
    let lin = g.channels_first(lin)?;
    g.add(lin, x)
}
