//! 8-bit binary PGM (`P5`) and PPM (`P6`) frames.

use std::fs;
use std::path::{Path, PathBuf};

use super::{Frame, FrameSequence};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Encodes a `[1, H, W]` frame as PGM or a `[3, H, W]` frame as PPM.
pub fn encode_pnm(frame: &Frame) -> Result<Vec<u8>> {
    let &[c, h, w] = frame.shape() else {
        return Err(Error::Data(format!(
            "frames must be [C, H, W], got {:?}",
            frame.shape()
        )));
    };
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => {
            return Err(Error::Data(format!(
                "only 1 or 3 channels can be written, got {c}"
            )))
        }
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.reserve(c * h * w);
    let plane = h * w;
    for p in 0..plane {
        for ch in 0..c {
            out.push(quantize(frame.data()[ch * plane + p]));
        }
    }
    Ok(out)
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse {
                offset: start,
                msg: format!("{what} out of range"),
            })
    }
}

/// Parses a binary PGM/PPM with maxval 255 into a `[C, H, W]` frame.
pub fn decode_pnm(bytes: &[u8]) -> Result<Frame> {
    let mut hd = Header { bytes, pos: 0 };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(hd.err("expected magic `P5` or `P6`")),
    };
    hd.pos = 2;
    let w = hd.number("width")?;
    let h = hd.number("height")?;
    let maxval_at = {
        hd.skip_space();
        hd.pos
    };
    let maxval = hd.number("maxval")?;
    if maxval != 255 {
        return Err(Error::Parse {
            offset: maxval_at,
            msg: format!("unsupported maxval {maxval} (only 255)"),
        });
    }
    if w == 0 || h == 0 {
        return Err(hd.err("zero image dimension"));
    }
    match bytes.get(hd.pos) {
        Some(b) if b.is_ascii_whitespace() => hd.pos += 1,
        _ => return Err(hd.err("expected a single whitespace after maxval")),
    }
    let need = channels * h * w;
    let payload = &bytes[hd.pos..];
    if payload.len() < need {
        return Err(Error::Parse {
            offset: bytes.len(),
            msg: format!("truncated payload: expected {need} bytes, got {}", payload.len()),
        });
    }
    let plane = h * w;
    Ok(Tensor::from_fn(&[channels, h, w], |i| {
        let (c, p) = (i / plane, i % plane);
        payload[p * channels + c] as f64 / 255.0
    }))
}

pub fn save_frame(path: &Path, frame: &Frame) -> Result<()> {
    fs::write(path, encode_pnm(frame)?)?;
    Ok(())
}

pub fn load_frame(path: &Path) -> Result<Frame> {
    decode_pnm(&fs::read(path)?).map_err(|e| match e {
        Error::Parse { offset, msg } => Error::Parse {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

/// `.pgm`/`.ppm` files of a directory in lexicographic order.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("pgm") || e.eq_ignore_ascii_case("ppm"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!(
            "no .pgm or .ppm frames in {}",
            dir.display()
        )));
    }
    Ok(paths)
}

pub fn load_sequence(dir: &Path) -> Result<FrameSequence> {
    let frames = list_frames(dir)?
        .iter()
        .map(|p| load_frame(p))
        .collect::<Result<Vec<_>>>()?;
    FrameSequence::clean(frames)
}

/// Writes `frame_0000.pgm`, … into `dir` (created if missing).
pub fn save_sequence(dir: &Path, frames: &[Frame]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let ext = if f.shape().first() == Some(&3) { "ppm" } else { "pgm" };
            let path = dir.join(format!("frame_{i:04}.{ext}"));
            save_frame(&path, f)?;
            Ok(path)
        })
        .collect()
}
