//! Binary checkpoint format.
//!
//! All integers are little-endian. Layout:
//!
//! ```text
//! u8      format version
//! [4]     magic "GRTN"
//! u8      element width in bytes (4 = f32, 8 = f64)
//! u32+..  config text (length-prefixed UTF-8, `key = value` lines)
//! u64     iteration
//! [32]    RNG seed, u64 stream, u128 word position
//! u32     parameter count, then per parameter:
//!           u32+.. name, u32 rank, u64 × rank extents, payload
//! u64     optimizer step count, then first and second moments
//!           for every parameter in the same order (payload only)
//! ```

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use super::config::{Precision, RunConfig};
use super::optim::Adam;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor};

pub const FORMAT_VERSION: u8 = 1;
const MAGIC: &[u8; 4] = b"GRTN";

/// Snapshot of a ChaCha stream position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub run: RunConfig,
    pub iteration: usize,
    pub rng: RngState,
    pub params: ParamStore<T>,
    pub adam: Adam<T>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Data(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_payload<T: Element>(out: &mut Vec<u8>, t: &Tensor<T>) {
    for &x in t.data() {
        if T::NAME == "f32" {
            out.extend_from_slice(&(x.f64() as f32).to_le_bytes());
        } else {
            out.extend_from_slice(&x.f64().to_le_bytes());
        }
    }
}

pub fn precision_of<T: Element>() -> Precision {
    if T::NAME == "f32" {
        Precision::F32
    } else {
        Precision::F64
    }
}

impl<T: Element> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = vec![FORMAT_VERSION];
        out.extend_from_slice(MAGIC);
        out.push(precision_of::<T>().bytes() as u8);
        put_str(&mut out, &self.run.to_string())?;
        out.extend_from_slice(&(self.iteration as u64).to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        put_u32(&mut out, self.params.len())?;
        for (_, name, t) in self.params.iter() {
            put_str(&mut out, name)?;
            put_u32(&mut out, t.ndim())?;
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_payload(&mut out, t);
        }
        out.extend_from_slice(&self.adam.steps.to_le_bytes());
        for t in self.adam.m.iter().chain(&self.adam.v) {
            put_payload(&mut out, t);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let header = r.header()?;
        if header.width != precision_of::<T>().bytes() {
            return Err(Error::Data(format!(
                "checkpoint holds {}-byte elements, expected {}",
                header.width,
                precision_of::<T>().bytes()
            )));
        }
        let mut params = ParamStore::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let shape = r.shape()?;
            let data = r.payload::<T>(shape.iter().product(), header.width)?;
            params.add(name, Tensor::new(&shape, data)?);
        }
        let steps = r.u64()?;
        let shapes: Vec<Vec<usize>> = params.iter().map(|(_, _, t)| t.shape().to_vec()).collect();
        let mut moments = Vec::with_capacity(2 * shapes.len());
        for shape in shapes.iter().chain(&shapes) {
            let data = r.payload::<T>(shape.iter().product(), header.width)?;
            moments.push(Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Parse {
                offset: r.pos,
                msg: "trailing bytes after checkpoint".into(),
            });
        }
        let v = moments.split_off(shapes.len());
        Ok(Checkpoint {
            adam: Adam {
                config: header.run.train.adam(),
                steps,
                m: moments,
                v,
            },
            run: header.run,
            iteration: header.iteration,
            rng: header.rng,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Reads only the element width and configuration of a checkpoint file.
pub fn peek(bytes: &[u8]) -> Result<(Precision, RunConfig)> {
    let h = Reader { bytes, pos: 0 }.header()?;
    let p = if h.width == 4 { Precision::F32 } else { Precision::F64 };
    Ok((p, h.run))
}

/// Number of parameter elements in a serialized checkpoint, counted from
/// the stored extents alone.
pub fn stored_param_count(bytes: &[u8]) -> Result<usize> {
    let mut r = Reader { bytes, pos: 0 };
    let h = r.header()?;
    let mut total = 0;
    for _ in 0..r.u32()? {
        r.string()?;
        let n: usize = r.shape()?.iter().product();
        r.take(n * h.width)?;
        total += n;
    }
    Ok(total)
}

struct Header {
    width: usize,
    run: RunConfig,
    iteration: usize,
    rng: RngState,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Parse {
                offset: self.bytes.len(),
                msg: format!("truncated checkpoint: needed {n} bytes at offset {}", self.pos),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> Result<String> {
        let at = self.pos;
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Parse {
            offset: at,
            msg: "string is not UTF-8".into(),
        })
    }

    fn shape(&mut self) -> Result<Vec<usize>> {
        let rank = self.u32()?;
        if rank > 8 {
            return Err(Error::Parse {
                offset: self.pos - 4,
                msg: format!("implausible tensor rank {rank}"),
            });
        }
        (0..rank).map(|_| Ok(self.u64()? as usize)).collect()
    }

    fn payload<T: Element>(&mut self, n: usize, width: usize) -> Result<Vec<T>> {
        let raw = self.take(n.checked_mul(width).ok_or_else(|| Error::Parse {
            offset: self.pos,
            msg: "tensor too large".into(),
        })?)?;
        Ok(raw
            .chunks_exact(width)
            .map(|c| {
                if width == 4 {
                    T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                } else {
                    T::of(f64::from_le_bytes(c.try_into().expect("8 bytes")))
                }
            })
            .collect())
    }

    fn header(&mut self) -> Result<Header> {
        let version = self.array::<1>()?[0];
        if version != FORMAT_VERSION {
            return Err(Error::Parse {
                offset: 0,
                msg: format!("unsupported checkpoint version {version} (expected {FORMAT_VERSION})"),
            });
        }
        if &self.array::<4>()? != MAGIC {
            return Err(Error::Parse {
                offset: 1,
                msg: "not a GRTN checkpoint".into(),
            });
        }
        let width = self.array::<1>()?[0] as usize;
        if width != 4 && width != 8 {
            return Err(Error::Parse {
                offset: 5,
                msg: format!("unsupported element width {width}"),
            });
        }
        let at = self.pos;
        let run = RunConfig::parse(&self.string()?).map_err(|e| Error::Parse {
            offset: at,
            msg: format!("embedded config: {e}"),
        })?;
        let iteration = self.u64()? as usize;
        let rng = RngState {
            seed: self.array()?,
            stream: self.u64()?,
            word_pos: u128::from_le_bytes(self.array()?),
        };
        Ok(Header {
            width,
            run,
            iteration,
            rng,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::GrtnParams;
    use rand::{RngCore, SeedableRng};

    fn sample() -> Checkpoint<f32> {
        let run = RunConfig::preset("tiny").unwrap();
        let params = GrtnParams::<f32>::init(&run.model, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.next_u64();
        let mut adam = Adam::new(run.train.adam(), &params.store);
        adam.steps = 5;
        adam.m[0].data_mut()[0] = 0.25;
        Checkpoint {
            run,
            iteration: 12,
            rng: RngState::capture(&rng),
            params: params.store,
            adam,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(bytes[0], FORMAT_VERSION);
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(stored_param_count(&bytes).unwrap(), ck.params.numel());
    }

    #[test]
    fn rng_resumes_mid_stream() {
        let mut a = ChaCha8Rng::seed_from_u64(4);
        a.next_u32();
        let mut b = RngState::capture(&a).restore();
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn rejects_damage() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
        let mut bad = bytes.clone();
        bad[0] = 99;
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&bad),
            Err(Error::Parse { offset: 0, .. })
        ));
    }
}
