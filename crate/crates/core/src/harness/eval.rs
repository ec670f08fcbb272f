use super::config::RunConfig;
use super::train::{Trainer, TrainLog};
use crate::data::{add_awgn, mean_db, metrics_csv, psnr, Frame, FrameSequence, MetricRow};
use crate::error::{Error, Result};
use crate::net::{Denoiser, GrtnParams};
use crate::tensor::{Element, Tensor};

/// Runs the causal denoiser over a noisy sequence, one frame at a time.
pub fn denoise_sequence<T: Element>(params: &GrtnParams<T>, noisy: &FrameSequence) -> Result<Vec<Frame>> {
    let mut d = Denoiser::new(params);
    noisy
        .frames
        .iter()
        .map(|f| {
            if f.shape()[0] != params.config.image_channels {
                return Err(Error::Data(format!(
                    "model expects {} image channels, frame has {}",
                    params.config.image_channels,
                    f.shape()[0]
                )));
            }
            let mut shape = vec![1];
            shape.extend_from_slice(f.shape());
            let x: Tensor<T> = f.cast::<T>().reshape(&shape)?;
            let y = d.push(&x, &[noisy.sigma])?;
            y.cast::<f64>().reshape(f.shape())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceResult {
    pub sequence: String,
    pub sigma: f64,
    /// One row per frame.
    pub frames: Vec<MetricRow>,
    pub mean_noisy: f64,
    pub mean_denoised: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub results: Vec<SequenceResult>,
    pub mean_noisy: f64,
    pub mean_denoised: f64,
}

impl EvalReport {
    /// One row per `(sequence, sigma)`, overall mean last.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("sequence,sigma,psnr_noisy,psnr_denoised\n");
        for r in &self.results {
            out.push_str(&format!(
                "{},{},{:.4},{:.4}\n",
                r.sequence, r.sigma, r.mean_noisy, r.mean_denoised
            ));
        }
        out.push_str(&format!(
            "mean,,{:.4},{:.4}\n",
            self.mean_noisy, self.mean_denoised
        ));
        out
    }

    pub fn frames_csv(&self, index: usize) -> String {
        metrics_csv(&self.results[index].frames)
    }
}

/// Per-frame PSNR of noisy input and denoised output against `clean`.
///
/// No frames are excluded: the first frame bootstraps from itself.
pub fn evaluate_sequence<T: Element>(
    params: &GrtnParams<T>,
    name: &str,
    clean: &FrameSequence,
    noisy: &FrameSequence,
) -> Result<(SequenceResult, Vec<Frame>)> {
    let denoised = denoise_sequence(params, noisy)?;
    let mut frames = Vec::with_capacity(clean.len());
    for (i, ((c, n), d)) in clean.frames.iter().zip(&noisy.frames).zip(&denoised).enumerate() {
        frames.push(MetricRow {
            frame: i.to_string(),
            sigma: noisy.sigma,
            psnr_noisy: psnr(n, c, 1.0)?,
            psnr_denoised: psnr(d, c, 1.0)?,
        });
    }
    let mean_noisy = mean_db(&frames.iter().map(|r| r.psnr_noisy).collect::<Vec<_>>());
    let mean_denoised = mean_db(&frames.iter().map(|r| r.psnr_denoised).collect::<Vec<_>>());
    frames.push(MetricRow {
        frame: "mean".into(),
        sigma: noisy.sigma,
        psnr_noisy: mean_noisy,
        psnr_denoised: mean_denoised,
    });
    Ok((
        SequenceResult {
            sequence: name.to_string(),
            sigma: noisy.sigma,
            frames,
            mean_noisy,
            mean_denoised,
        },
        denoised,
    ))
}

/// Corrupts every clean sequence at every sigma (seeded) and scores the model.
pub fn evaluate<T: Element>(
    params: &GrtnParams<T>,
    sequences: &[(String, FrameSequence)],
    sigmas: &[f64],
    seed: u64,
) -> Result<EvalReport> {
    let mut results = Vec::new();
    for (si, (name, clean)) in sequences.iter().enumerate() {
        for (k, &sigma) in sigmas.iter().enumerate() {
            let noise_seed = seed ^ ((si as u64) << 32 | k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let noisy = add_awgn(clean, sigma, noise_seed)?;
            results.push(evaluate_sequence(params, name, clean, &noisy)?.0);
        }
    }
    let mean_noisy = mean_db(&results.iter().map(|r| r.mean_noisy).collect::<Vec<_>>());
    let mean_denoised = mean_db(&results.iter().map(|r| r.mean_denoised).collect::<Vec<_>>());
    Ok(EvalReport {
        results,
        mean_noisy,
        mean_denoised,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    NoGates,
    DotProduct,
    NoOrtho,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoGates,
        Variant::DotProduct,
        Variant::NoOrtho,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoGates => "no_gates",
            Variant::DotProduct => "dot_product",
            Variant::NoOrtho => "no_ortho",
        }
    }

    /// The shared configuration with only this variant's switch flipped.
    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut run = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoGates => run.model.gates_enabled = false,
            Variant::DotProduct => run.model.attention_kind = crate::rsste::AttentionKind::DotProduct,
            Variant::NoOrtho => run.train.lambda = 0.0,
        }
        run
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected full, no_gates, dot_product or no_ortho)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    /// Mean denoised PSNR per evaluation sigma.
    pub psnr: Vec<f64>,
    pub log: TrainLog,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub sigmas: Vec<f64>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// PSNR columns per sigma, then deltas against `full` when present.
    pub fn to_csv(&self) -> String {
        let full = self.rows.iter().find(|r| r.variant == Variant::Full);
        let mut out = String::from("variant");
        for s in &self.sigmas {
            out.push_str(&format!(",psnr_sigma{s}"));
        }
        for s in &self.sigmas {
            out.push_str(&format!(",delta_sigma{s}"));
        }
        out.push_str(",final_loss\n");
        for r in &self.rows {
            out.push_str(r.variant.name());
            for p in &r.psnr {
                out.push_str(&format!(",{p:.4}"));
            }
            for (i, p) in r.psnr.iter().enumerate() {
                match full {
                    Some(f) => out.push_str(&format!(",{:+.4}", p - f.psnr[i])),
                    None => out.push(','),
                }
            }
            let last = r.log.losses.last().copied().unwrap_or(f64::NAN);
            out.push_str(&format!(",{last:.6}\n"));
        }
        out
    }
}

/// Trains each variant from the same seed and schedule, then evaluates all
/// of them on the same held-out sequences.
pub fn ablate<T: Element>(
    base: &RunConfig,
    variants: &[Variant],
    sequences: &[(String, FrameSequence)],
    sigmas: &[f64],
    mut progress: impl FnMut(Variant, usize),
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for &variant in variants {
        let mut trainer = Trainer::<T>::new(variant.apply(base))?;
        let log = trainer.run(|row| progress(variant, row.iteration))?;
        let psnr = sigmas
            .iter()
            .map(|&s| {
                let rep = evaluate(&trainer.params, sequences, &[s], base.train.seed)?;
                Ok(rep.mean_denoised)
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(AblationRow { variant, psnr, log });
    }
    Ok(AblationReport {
        sigmas: sigmas.to_vec(),
        rows,
    })
}
