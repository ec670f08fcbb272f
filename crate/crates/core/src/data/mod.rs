//! Synthetic sequences, noise, PSNR, frame files and the attention probe.
//!
//! Frames are `[C, H, W]` tensors with values nominally in `[0, 1]`; noise
//! levels are quoted on the 0–255 scale.

pub mod io;
pub mod probe;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Frame = Tensor<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SynthKind {
    MovingGradient,
    MovingShapes,
    TexturedPan,
}

impl SynthKind {
    pub const ALL: [SynthKind; 3] = [
        SynthKind::MovingGradient,
        SynthKind::MovingShapes,
        SynthKind::TexturedPan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SynthKind::MovingGradient => "moving_gradient",
            SynthKind::MovingShapes => "moving_shapes",
            SynthKind::TexturedPan => "textured_pan",
        }
    }

    /// Per-frame translation `(dy, dx)` in pixels.
    pub fn velocity(self) -> (isize, isize) {
        match self {
            SynthKind::MovingGradient => (0, 1),
            SynthKind::MovingShapes => (2, -2),
            SynthKind::TexturedPan => (2, 2),
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SynthKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown sequence kind `{s}` (expected moving_gradient, moving_shapes or textured_pan)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Clean,
    Noisy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub frames: Vec<Frame>,
    /// Noise standard deviation on the 0–255 scale; 0 for clean sequences.
    pub sigma: f64,
    pub source: Source,
    pub seed: u64,
}

impl FrameSequence {
    pub fn clean(frames: Vec<Frame>) -> Result<Self> {
        if let Some(first) = frames.first() {
            if first.ndim() != 3 {
                return Err(Error::Data(format!(
                    "frames must be [C, H, W], got {:?}",
                    first.shape()
                )));
            }
            if let Some(bad) = frames.iter().find(|f| f.shape() != first.shape()) {
                return Err(Error::FrameSizeChanged {
                    expected: first.shape().to_vec(),
                    got: bad.shape().to_vec(),
                });
            }
        }
        Ok(FrameSequence {
            frames,
            sigma: 0.0,
            source: Source::Clean,
            seed: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `[C, H, W]` of every frame.
    pub fn frame_shape(&self) -> Option<&[usize]> {
        self.frames.first().map(|f| f.shape())
    }
}

struct Canvas {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Canvas {
    fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }
}

fn ramp(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = (theta.sin(), theta.cos());
    let span = (h + w) as f64;
    let lo = rng.gen_range(0.1..0.3);
    let hi = rng.gen_range(0.7..0.9);
    let mut data = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let t = 0.5 + (dy * y as f64 + dx * x as f64) / span;
            data[y * w + x] = lo + (hi - lo) * t.clamp(0.0, 1.0);
        }
    }
    data
}

fn add_waves(rng: &mut ChaCha8Rng, data: &mut [f64], w: usize, count: usize, freq: (f64, f64)) {
    for _ in 0..count {
        let f = rng.gen_range(freq.0..freq.1);
        let th = rng.gen_range(0.0..std::f64::consts::PI);
        let ph = rng.gen_range(0.0..std::f64::consts::TAU);
        let amp = rng.gen_range(0.04..0.12);
        let (cy, cx) = (th.sin() * f, th.cos() * f);
        for (i, v) in data.iter_mut().enumerate() {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            *v += amp * (cy * y + cx * x + ph).sin();
        }
    }
}

fn add_shapes(rng: &mut ChaCha8Rng, data: &mut [f64], h: usize, w: usize, count: usize) {
    for _ in 0..count {
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let ry = rng.gen_range(2.0..(h as f64 / 4.0).max(3.0));
        let rx = rng.gen_range(2.0..(w as f64 / 4.0).max(3.0));
        let level = rng.gen_range(0.0..1.0);
        let disc = rng.gen_bool(0.5);
        for (i, v) in data.iter_mut().enumerate() {
            let dy = ((i / w) as f64 - cy) / ry;
            let dx = ((i % w) as f64 - cx) / rx;
            let inside = if disc {
                dy * dy + dx * dx <= 1.0
            } else {
                dy.abs() <= 1.0 && dx.abs() <= 1.0
            };
            if inside {
                *v = level;
            }
        }
    }
}

fn canvas(kind: SynthKind, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Canvas {
    let mut data = ramp(rng, h, w);
    match kind {
        SynthKind::MovingGradient => add_waves(rng, &mut data, w, 2, (0.05, 0.3)),
        SynthKind::MovingShapes => add_shapes(rng, &mut data, h, w, 6 + (h * w) / 1024),
        SynthKind::TexturedPan => {
            add_waves(rng, &mut data, w, 6, (0.05, 1.2));
            add_shapes(rng, &mut data, h, w, 4 + (h * w) / 2048);
            add_waves(rng, &mut data, w, 2, (0.8, 2.0));
        }
    }
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Canvas { h, w, data }
}

/// A seeded clip of `frames` frames of `[channels, h, w]`, translating by the
/// kind's integer velocity each frame.
///
/// Frames are crops of one larger canvas, so content entering at the border
/// is fresh canvas rather than wrapped or repeated pixels.
pub fn synth_sequence(
    kind: SynthKind,
    frames: usize,
    (h, w): (usize, usize),
    channels: usize,
    seed: u64,
) -> Result<FrameSequence> {
    if h == 0 || w == 0 || channels == 0 {
        return Err(Error::Config(format!(
            "frame size must be positive, got {channels}x{h}x{w}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (vy, vx) = kind.velocity();
    let travel = frames.saturating_sub(1);
    let ch = h + vy.unsigned_abs() * travel;
    let cw = w + vx.unsigned_abs() * travel;
    let base = canvas(kind, ch, cw, &mut rng);
    let gains: Vec<(f64, f64)> = (0..channels)
        .map(|c| {
            if c == 0 {
                (1.0, 0.0)
            } else {
                (rng.gen_range(0.7..1.0), rng.gen_range(0.0..0.2))
            }
        })
        .collect();
    let origin = |v: isize, t: usize| -> usize {
        let start = v.max(0) as usize * travel;
        (start as isize - v * t as isize) as usize
    };
    let out = (0..frames)
        .map(|t| {
            let (oy, ox) = (origin(vy, t), origin(vx, t));
            Tensor::from_fn(&[channels, h, w], |i| {
                let c = i / (h * w);
                let (y, x) = ((i / w) % h, i % w);
                let (gain, offset) = gains[c];
                (base.at(y + oy, x + ox) * gain + offset).clamp(0.0, 1.0)
            })
        })
        .collect();
    debug_assert!(base.h == ch && base.w == cw);
    Ok(FrameSequence {
        frames: out,
        sigma: 0.0,
        source: Source::Clean,
        seed,
    })
}

/// Adds white Gaussian noise of std `sigma / 255` to every element, without
/// clipping.
pub fn add_awgn(seq: &FrameSequence, sigma: f64, seed: u64) -> Result<FrameSequence> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Config(format!(
            "noise sigma must be finite and non-negative, got {sigma}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = if sigma == 0.0 {
        seq.frames.clone()
    } else {
        let normal = Normal::new(0.0, sigma / 255.0).expect("positive std");
        seq.frames
            .iter()
            .map(|f| Tensor::from_fn(f.shape(), |i| f.data()[i] + normal.sample(&mut rng)))
            .collect()
    };
    Ok(FrameSequence {
        frames,
        sigma,
        source: Source::Noisy,
        seed,
    })
}

/// `10·log10(peak² / MSE)`, or `+∞` for identical inputs.
pub fn psnr(a: &Frame, b: &Frame, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shapes("psnr", a.shape(), b.shape()));
    }
    if a.numel() == 0 {
        return Err(Error::Data("psnr of empty frames".into()));
    }
    let se: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let mse = se / a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// One row of a per-frame metrics table.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    /// Frame index, or `mean` for the summary row.
    pub frame: String,
    pub sigma: f64,
    pub psnr_noisy: f64,
    pub psnr_denoised: f64,
}

pub const METRICS_HEADER: &str = "frame,sigma,psnr_noisy,psnr_denoised";

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.frame,
            r.sigma,
            fmt_db(r.psnr_noisy),
            fmt_db(r.psnr_denoised)
        ));
    }
    out
}

/// Mean of finite values; `+∞` if every value is infinite.
pub fn mean_db(values: &[f64]) -> f64 {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return if values.is_empty() { f64::NAN } else { f64::INFINITY };
    }
    finite.iter().sum::<f64>() / finite.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moving_gradient_shifts_columns() {
        let s = synth_sequence(SynthKind::MovingGradient, 3, (16, 20), 1, 4).unwrap();
        let (f1, f2) = (&s.frames[0], &s.frames[1]);
        for y in 0..16 {
            for x in 1..20 {
                assert_eq!(f2.data()[y * 20 + x], f1.data()[y * 20 + x - 1]);
            }
        }
    }

    #[test]
    fn every_kind_translates_by_its_velocity() {
        for kind in SynthKind::ALL {
            let s = synth_sequence(kind, 4, (24, 24), 3, 11).unwrap();
            let (vy, vx) = kind.velocity();
            for t in 0..3 {
                let (a, b) = (&s.frames[t], &s.frames[t + 1]);
                for c in 0..3 {
                    for y in 2..22 {
                        for x in 2..22 {
                            let (py, px) = ((y as isize - vy) as usize, (x as isize - vx) as usize);
                            assert_eq!(
                                b.data()[(c * 24 + y) * 24 + x],
                                a.data()[(c * 24 + py) * 24 + px],
                                "{kind}"
                            );
                        }
                    }
                }
            }
            assert!(s.frames.iter().all(|f| f.data().iter().all(|v| (0.0..=1.0).contains(v))));
        }
    }

    #[test]
    fn seeds_are_deterministic() {
        let a = synth_sequence(SynthKind::TexturedPan, 3, (16, 16), 1, 9).unwrap();
        let b = synth_sequence(SynthKind::TexturedPan, 3, (16, 16), 1, 9).unwrap();
        let c = synth_sequence(SynthKind::TexturedPan, 3, (16, 16), 1, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn noise_statistics() {
        let clean = synth_sequence(SynthKind::MovingShapes, 1, (256, 256), 1, 0).unwrap();
        assert_eq!(add_awgn(&clean, 0.0, 5).unwrap().frames, clean.frames);
        let noisy = add_awgn(&clean, 25.0, 5).unwrap();
        assert_eq!(noisy.sigma, 25.0);
        let d: Vec<f64> = noisy.frames[0]
            .data()
            .iter()
            .zip(clean.frames[0].data())
            .map(|(a, b)| a - b)
            .collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
        assert!((std / (25.0 / 255.0) - 1.0).abs() < 0.03, "{std}");
        let other = add_awgn(&clean, 25.0, 6).unwrap();
        assert_ne!(other.frames, noisy.frames);
        assert!(add_awgn(&clean, -1.0, 0).is_err());
    }

    #[test]
    fn psnr_cases() {
        let a = Tensor::from_fn(&[1, 4, 4], |i| i as f64 / 16.0);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 10.0 / 255.0);
        let p = psnr(&a, &b, 1.0).unwrap();
        assert!((p - 28.1308).abs() < 1e-4, "{p}");
        assert_eq!(p, psnr(&b, &a, 1.0).unwrap());
        let bad = Tensor::zeros(&[1, 4, 5]);
        assert!(psnr(&a, &bad, 1.0).is_err());
    }

    #[test]
    fn metrics_table_header() {
        let csv = metrics_csv(&[MetricRow {
            frame: "0".into(),
            sigma: 0.0,
            psnr_noisy: f64::INFINITY,
            psnr_denoised: 40.0,
        }]);
        assert_eq!(csv, "frame,sigma,psnr_noisy,psnr_denoised\n0,0,inf,40.0000\n");
    }
}
