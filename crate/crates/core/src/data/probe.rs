//! How closely noisy attention tracks clean attention, for dot-product and
//! Euclidean logits.
//!
//! Each trial draws an `(M·p)×(M·p)` patch, cuts it into `M²` tokens of
//! `p×p` pixels, layer-normalizes every token (as the transformer's `Norm`
//! does), and compares the central token's attention row on the clean and
//! the noisy patch with identity projections and no bias.

use rayon::prelude::*;

use super::{add_awgn, synth_sequence, SynthKind};
use crate::error::{Error, Result};
use crate::rsste::{dot_product_attention, euclidean_attention, AttentionKind};
use crate::rsste::LAYER_NORM_EPS;
use crate::tensor::Tensor;

const MAX_ATTEMPTS: u64 = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub sigma: f64,
    pub window: usize,
    /// Side of the square pixel patch forming one token.
    pub token_size: usize,
    pub trials: usize,
    pub seed: u64,
    pub source: SynthKind,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            sigma: 50.0,
            window: 8,
            token_size: 4,
            trials: 20,
            seed: 0,
            source: SynthKind::TexturedPan,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeTrial {
    pub seed: u64,
    pub dot_correlation: f64,
    pub euclidean_correlation: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionProbeReport {
    pub config: ProbeConfig,
    pub trials: Vec<ProbeTrial>,
    pub dot_mean: f64,
    pub euclidean_mean: f64,
    /// Fraction of trials where the Euclidean row correlates better.
    pub euclidean_win_rate: f64,
    /// Degenerate draws that were resampled.
    pub resampled: usize,
}

impl AttentionProbeReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("trial,seed,dot_correlation,euclidean_correlation\n");
        for (i, t) in self.trials.iter().enumerate() {
            out.push_str(&format!(
                "{i},{},{:.6},{:.6}\n",
                t.seed, t.dot_correlation, t.euclidean_correlation
            ));
        }
        out.push_str(&format!(
            "mean,,{:.6},{:.6}\n# euclidean_win_rate={:.4} sigma={} window={} token_size={} resampled={}\n",
            self.dot_mean,
            self.euclidean_mean,
            self.euclidean_win_rate,
            self.config.sigma,
            self.config.window,
            self.config.token_size,
            self.resampled
        ));
        out
    }
}

/// `cov(a, b) / sqrt(var(a)·var(b))`; `None` when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// `[M², p²]` layer-normalized tokens of a `side×side` image.
pub fn tokens(img: &[f64], window: usize, p: usize) -> Tensor<f64> {
    let side = window * p;
    let d = p * p;
    let mut t = Tensor::from_fn(&[window * window, d], |i| {
        let (tok, e) = (i / d, i % d);
        let (ty, tx) = (tok / window, tok % window);
        img[(ty * p + e / p) * side + tx * p + e % p]
    });
    for row in t.data_mut().chunks_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    }
    t
}

/// Attention row of the central token.
pub fn central_row(tokens: &Tensor<f64>, window: usize, kind: AttentionKind) -> Result<Vec<f64>> {
    let (_, attn) = match kind {
        AttentionKind::Euclidean => euclidean_attention(tokens, tokens, tokens, None, 1e-12)?,
        AttentionKind::DotProduct => dot_product_attention(tokens, tokens, tokens, None)?,
    };
    let n = window * window;
    let center = (window / 2) * window + window / 2;
    Ok(attn.data()[center * n..(center + 1) * n].to_vec())
}

fn trial_seed(seed: u64, trial: usize) -> u64 {
    seed ^ (trial as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn run_trial(cfg: &ProbeConfig, trial: usize) -> Result<(ProbeTrial, usize)> {
    let side = cfg.window * cfg.token_size;
    let base = trial_seed(cfg.seed, trial);
    for attempt in 0..MAX_ATTEMPTS {
        let seed = base.wrapping_add(attempt.wrapping_mul(0xD1B5_4A32_D192_ED03));
        let clean = synth_sequence(cfg.source, 1, (side, side), 1, seed)?;
        let noisy = add_awgn(&clean, cfg.sigma, seed ^ 0xA5A5_A5A5)?;
        let tc = tokens(clean.frames[0].data(), cfg.window, cfg.token_size);
        let tn = tokens(noisy.frames[0].data(), cfg.window, cfg.token_size);
        let corr = |kind| -> Result<Option<f64>> {
            Ok(pearson(
                &central_row(&tc, cfg.window, kind)?,
                &central_row(&tn, cfg.window, kind)?,
            ))
        };
        if let (Some(dot), Some(euc)) = (corr(AttentionKind::DotProduct)?, corr(AttentionKind::Euclidean)?) {
            let t = ProbeTrial {
                seed,
                dot_correlation: dot,
                euclidean_correlation: euc,
            };
            return Ok((t, attempt as usize));
        }
    }
    Err(Error::Data(format!(
        "attention probe: trial {trial} stayed degenerate after {MAX_ATTEMPTS} draws"
    )))
}

/// Runs every trial (in parallel, each with its own derived seed).
pub fn attention_probe(cfg: &ProbeConfig) -> Result<AttentionProbeReport> {
    if cfg.window < 2 || cfg.token_size < 2 || cfg.trials == 0 {
        return Err(Error::Config(format!(
            "attention probe needs window ≥ 2, token_size ≥ 2 and trials ≥ 1, got {}, {}, {}",
            cfg.window, cfg.token_size, cfg.trials
        )));
    }
    let results = (0..cfg.trials)
        .into_par_iter()
        .map(|t| run_trial(cfg, t))
        .collect::<Result<Vec<_>>>()?;
    let resampled = results.iter().map(|(_, r)| r).sum();
    let trials: Vec<ProbeTrial> = results.into_iter().map(|(t, _)| t).collect();
    let n = trials.len() as f64;
    let dot_mean = trials.iter().map(|t| t.dot_correlation).sum::<f64>() / n;
    let euclidean_mean = trials.iter().map(|t| t.euclidean_correlation).sum::<f64>() / n;
    let wins = trials
        .iter()
        .filter(|t| t.euclidean_correlation > t.dot_correlation)
        .count();
    Ok(AttentionProbeReport {
        config: cfg.clone(),
        trials,
        dot_mean,
        euclidean_mean,
        euclidean_win_rate: wins as f64 / n,
        resampled,
    })
}
