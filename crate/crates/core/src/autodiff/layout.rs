//! Index maps for pure data-movement ops and their graph wrappers.
//!
//! Every op here is an exact permutation or selection of its input, expressed
//! as a [`Graph::gather`] so one scatter-add rule serves all of them.

use std::sync::Arc;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Reflect an index into `[0, len)` without repeating the edge sample
/// (`… 2 1 | 0 1 2 … n−1 | n−2 n−3 …`).
pub fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

fn round_up(x: usize, m: usize) -> usize {
    x.div_ceil(m) * m
}

/// Geometry of a window partition of an `h × w` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub shift: usize,
    /// Extents after reflect padding to a multiple of `window`.
    pub hp: usize,
    pub wp: usize,
}

impl WindowGeom {
    pub fn new(shape: &[usize], window: usize, shift: usize) -> Result<Self> {
        let [n, c, h, w] = shape[..] else {
            return Err(Error::dim("window_partition", "rank", 4, shape.len()));
        };
        if window == 0 {
            return Err(Error::Config("window size must be >= 1".into()));
        }
        Ok(WindowGeom {
            n,
            c,
            h,
            w,
            window,
            shift,
            hp: round_up(h, window),
            wp: round_up(w, window),
        })
    }

    pub fn windows_per_image(&self) -> usize {
        (self.hp / self.window) * (self.wp / self.window)
    }

    pub fn tokens(&self) -> usize {
        self.window * self.window
    }

    pub fn windows_shape(&self) -> [usize; 3] {
        [self.n * self.windows_per_image(), self.tokens(), self.c]
    }

    /// Position in the windows tensor of padded-grid cell `(py, px)` for image `b`.
    fn token_of(&self, b: usize, py: usize, px: usize) -> (usize, usize) {
        let m = self.window;
        let ry = (py + self.hp - self.shift % self.hp) % self.hp;
        let rx = (px + self.wp - self.shift % self.wp) % self.wp;
        let win = b * self.windows_per_image() + (ry / m) * (self.wp / m) + rx / m;
        (win, (ry % m) * m + rx % m)
    }

    /// Gather index: windows tensor `[n·nW, M², C]` from an NCHW map.
    pub fn partition_index(&self) -> Vec<usize> {
        let [nw, t, c] = self.windows_shape();
        let mut index = vec![0; nw * t * c];
        let (h, w) = (self.h as isize, self.w as isize);
        for b in 0..self.n {
            for py in 0..self.hp {
                for px in 0..self.wp {
                    let (win, tok) = self.token_of(b, py, px);
                    let sy = reflect(py as isize, h as usize);
                    let sx = reflect(px as isize, w as usize);
                    for ch in 0..c {
                        index[(win * t + tok) * c + ch] =
                            ((b * self.c + ch) * self.h + sy) * self.w + sx;
                    }
                }
            }
        }
        index
    }

    /// Gather index: NCHW map from a windows tensor, cropping the padding.
    pub fn reverse_index(&self) -> Vec<usize> {
        let t = self.tokens();
        let mut index = vec![0; self.n * self.c * self.h * self.w];
        for b in 0..self.n {
            for y in 0..self.h {
                for x in 0..self.w {
                    let (win, tok) = self.token_of(b, y, x);
                    for ch in 0..self.c {
                        index[((b * self.c + ch) * self.h + y) * self.w + x] =
                            (win * t + tok) * self.c + ch;
                    }
                }
            }
        }
        index
    }
}

/// Gather index for sub-pixel rearrangement `N(C·r²)HW → NC(rH)(rW)`.
pub fn pixel_shuffle_index(shape: &[usize], r: usize) -> Result<(Vec<usize>, [usize; 4])> {
    let [n, crr, h, w] = shape[..] else {
        return Err(Error::dim("pixel_shuffle", "rank", 4, shape.len()));
    };
    if r == 0 || crr % (r * r) != 0 {
        return Err(Error::dim("pixel_shuffle", "channels", r * r, crr));
    }
    let c = crr / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut index = Vec::with_capacity(n * crr * h * w);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let src_c = ch * r * r + (y % r) * r + x % r;
                    index.push(((b * crr + src_c) * h + y / r) * w + x / r);
                }
            }
        }
    }
    Ok((index, [n, c, oh, ow]))
}

/// Gather index turning `concat(a, b)` along channels into `a₀,b₀,a₁,b₁,…`.
pub fn interleave_index(n: usize, c: usize, plane: usize) -> Vec<usize> {
    let mut index = Vec::with_capacity(n * 2 * c * plane);
    for b in 0..n {
        for ch in 0..c {
            for half in 0..2 {
                let src = (b * 2 * c + half * c + ch) * plane;
                index.extend(src..src + plane);
            }
        }
    }
    index
}

/// Relative-position lookup into a `[heads, (2M−1)²]` table, producing `[heads, M², M²]`.
pub fn relative_bias_index(heads: usize, window: usize) -> Vec<usize> {
    let m = window as isize;
    let span = (2 * window - 1) as isize;
    let t = window * window;
    let mut index = Vec::with_capacity(heads * t * t);
    for h in 0..heads {
        for i in 0..t {
            let (ri, ci) = ((i / window) as isize, (i % window) as isize);
            for j in 0..t {
                let (rj, cj) = ((j / window) as isize, (j % window) as isize);
                let rel = (ri - rj + m - 1) * span + (ci - cj + m - 1);
                index.push(h * (span * span) as usize + rel as usize);
            }
        }
    }
    index
}

impl<T: Element> Graph<T> {
    /// Channel-interleaved concatenation of two NCHW maps of equal shape.
    pub fn interleave_concat(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shapes("interleave_concat", self.shape(a), self.shape(b)));
        }
        let (n, c, h, w) = self.value(a).nchw("interleave_concat")?;
        let cat = self.concat(&[a, b], 1)?;
        let index = interleave_index(n, c, h * w);
        self.gather(cat, Arc::new(index), &[n, 2 * c, h, w])
    }

    /// Selects channels `start, start+step, …` of an NCHW map.
    pub fn select_channels(&mut self, x: Var, start: usize, step: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).nchw("select_channels")?;
        let picked: Vec<usize> = (start..c).step_by(step.max(1)).collect();
        let mut index = Vec::with_capacity(n * picked.len() * h * w);
        for b in 0..n {
            for &ch in &picked {
                let src = (b * c + ch) * h * w;
                index.extend(src..src + h * w);
            }
        }
        self.gather(x, Arc::new(index), &[n, picked.len(), h, w])
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let (index, shape) = pixel_shuffle_index(self.shape(x), r)?;
        self.gather(x, Arc::new(index), &shape)
    }

    /// NCHW map → `[N·nW, M², C]` windows after reflect padding and a cyclic
    /// shift of `shift` pixels toward the origin.
    pub fn window_partition(&mut self, x: Var, window: usize, shift: usize) -> Result<(Var, WindowGeom)> {
        let geom = WindowGeom::new(self.shape(x), window, shift)?;
        let v = self.gather(x, Arc::new(geom.partition_index()), &geom.windows_shape())?;
        Ok((v, geom))
    }

    /// Inverse of [`Graph::window_partition`]; drops the padded cells.
    pub fn window_reverse(&mut self, windows: Var, geom: &WindowGeom) -> Result<Var> {
        if self.shape(windows) != geom.windows_shape() {
            return Err(Error::shapes(
                "window_reverse",
                &geom.windows_shape(),
                self.shape(windows),
            ));
        }
        self.gather(
            windows,
            Arc::new(geom.reverse_index()),
            &[geom.n, geom.c, geom.h, geom.w],
        )
    }

    /// NCHW → NHWC.
    pub fn channels_last(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).nchw("channels_last")?;
        let mut index = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for p in 0..h * w {
                for ch in 0..c {
                    index.push((b * c + ch) * h * w + p);
                }
            }
        }
        self.gather(x, Arc::new(index), &[n, h, w, c])
    }

    /// NHWC → NCHW.
    pub fn channels_first(&mut self, x: Var) -> Result<Var> {
        let [n, h, w, c] = self.shape(x)[..] else {
            return Err(Error::dim("channels_first", "rank", 4, self.shape(x).len()));
        };
        let mut index = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for ch in 0..c {
                for p in 0..h * w {
                    index.push((b * h * w + p) * c + ch);
                }
            }
        }
        self.gather(x, Arc::new(index), &[n, c, h, w])
    }

    pub fn transpose2d(&mut self, x: Var) -> Result<Var> {
        let [r, c] = self.shape(x)[..] else {
            return Err(Error::dim("transpose2d", "rank", 2, self.shape(x).len()));
        };
        let index = (0..r * c).map(|i| (i % r) * c + i / r).collect();
        self.gather(x, Arc::new(index), &[c, r])
    }

    /// Cyclic translation of each image by its own `(dy, dx)`:
    /// `out[y][x] = in[y − dy][x − dx]`.
    pub fn roll(&mut self, x: Var, shifts: &[(isize, isize)]) -> Result<Var> {
        let (n, c, h, w) = self.value(x).nchw("roll")?;
        if shifts.len() != n {
            return Err(Error::dim("roll", "batch", n, shifts.len()));
        }
        let mut index = Vec::with_capacity(n * c * h * w);
        for (b, &(dy, dx)) in shifts.iter().enumerate() {
            for ch in 0..c {
                for y in 0..h {
                    let sy = (y as isize - dy).rem_euclid(h as isize) as usize;
                    for xx in 0..w {
                        let sx = (xx as isize - dx).rem_euclid(w as isize) as usize;
                        index.push(((b * c + ch) * h + sy) * w + sx);
                    }
                }
            }
        }
        self.gather(x, Arc::new(index), &[n, c, h, w])
    }

    /// Reflect-pads the bottom and right edges to `(h2, w2)`.
    pub fn reflect_pad_to(&mut self, x: Var, h2: usize, w2: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).nchw("reflect_pad")?;
        let mut index = Vec::with_capacity(n * c * h2 * w2);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h2 {
                    let sy = reflect(y as isize, h);
                    for xx in 0..w2 {
                        index.push(((b * c + ch) * h + sy) * w + reflect(xx as isize, w));
                    }
                }
            }
        }
        self.gather(x, Arc::new(index), &[n, c, h2, w2])
    }

    /// Keeps the top-left `(h2, w2)` region.
    pub fn crop(&mut self, x: Var, h2: usize, w2: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).nchw("crop")?;
        if h2 > h || w2 > w {
            return Err(Error::dim("crop", "height", h, h2));
        }
        let mut index = Vec::with_capacity(n * c * h2 * w2);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h2 {
                    let row = ((b * c + ch) * h + y) * w;
                    index.extend(row..row + w2);
                }
            }
        }
        self.gather(x, Arc::new(index), &[n, c, h2, w2])
    }

    /// Expands a `[heads, (2M−1)²]` table to a dense `[heads, M², M²]` bias.
    pub fn relative_bias(&mut self, table: Var, window: usize) -> Result<Var> {
        let span = (2 * window - 1) * (2 * window - 1);
        let [heads, entries] = self.shape(table)[..] else {
            return Err(Error::dim("relative_bias", "rank", 2, self.shape(table).len()));
        };
        if entries != span {
            return Err(Error::dim("relative_bias", "entries", span, entries));
        }
        let t = window * window;
        self.gather(
            table,
            Arc::new(relative_bias_index(heads, window)),
            &[heads, t, t],
        )
    }
}

/// Plain-tensor window partition (no graph).
pub fn window_partition<T: Element>(x: &Tensor<T>, window: usize, shift: usize) -> Result<(Tensor<T>, WindowGeom)> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let (w, geom) = g.window_partition(v, window, shift)?;
    Ok((g.value(w).clone(), geom))
}

/// Plain-tensor inverse of [`window_partition`].
pub fn window_reverse<T: Element>(windows: &Tensor<T>, geom: &WindowGeom) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let v = g.constant(windows.clone());
    let out = g.window_reverse(v, geom)?;
    Ok(g.value(out).clone())
}

/// Plain-tensor pixel shuffle.
pub fn pixel_shuffle<T: Element>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (index, shape) = pixel_shuffle_index(x.shape(), r)?;
    Tensor::new(&shape, index.iter().map(|&i| x.data()[i]).collect())
}

/// Plain-tensor interleaved concatenation.
pub fn interleave_concat<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = g.interleave_concat(va, vb)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| i as f64)
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1]);
        assert_eq!(reflect(5, 1), 0);
    }

    #[test]
    fn interleave_orders_channels() {
        let a = Tensor::from_fn(&[1, 2, 1, 1], |i| 10.0 + i as f64);
        let b = Tensor::from_fn(&[1, 2, 1, 1], |i| 20.0 + i as f64);
        let out = interleave_concat(&a, &b).unwrap();
        assert_eq!(out.data(), &[10.0, 20.0, 11.0, 21.0]);

        let same = interleave_concat(&a, &a).unwrap();
        assert_eq!(same.data(), &[10.0, 10.0, 11.0, 11.0]);
    }

    #[test]
    fn deinterleave_recovers_inputs() {
        let a = ramp(&[2, 3, 2, 2]);
        let b = a.map(|v| -v - 1.0);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let z = g.interleave_concat(va, vb).unwrap();
        let even = g.select_channels(z, 0, 2).unwrap();
        let odd = g.select_channels(z, 1, 2).unwrap();
        assert_eq!(g.value(even), &a);
        assert_eq!(g.value(odd), &b);
    }

    #[test]
    fn interleave_rejects_mismatch() {
        let a = ramp(&[1, 2, 2, 2]);
        let b = ramp(&[1, 3, 2, 2]);
        assert!(interleave_concat(&a, &b).is_err());
    }

    #[test]
    fn pixel_shuffle_layout() {
        let x = Tensor::new(&[1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);

        let x = ramp(&[2, 3, 2, 5]);
        assert_eq!(pixel_shuffle(&x, 1).unwrap(), x);
        assert!(pixel_shuffle(&ramp(&[1, 3, 2, 2]), 2).is_err());
    }

    #[test]
    fn window_round_trip_divisible() {
        let x = ramp(&[1, 1, 4, 4]);
        let (w, geom) = window_partition(&x, 2, 0).unwrap();
        assert_eq!(w.shape(), &[4, 4, 1]);
        // First window is the top-left 2×2 block.
        assert_eq!(&w.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(window_reverse(&w, &geom).unwrap(), x);
    }

    #[test]
    fn window_padding_and_crop() {
        let x = ramp(&[1, 2, 5, 5]);
        let (w, geom) = window_partition(&x, 4, 0).unwrap();
        assert_eq!((geom.hp, geom.wp), (8, 8));
        assert_eq!(w.shape(), &[4, 16, 2]);
        let back = window_reverse(&w, &geom).unwrap();
        assert_eq!(back.shape(), &[1, 2, 5, 5]);
        assert_eq!(back, x);
    }

    #[test]
    fn shifted_window_is_cyclic_translation() {
        let x = ramp(&[1, 1, 4, 4]);
        let (w, geom) = window_partition(&x, 2, 1).unwrap();
        // Top-left window of the shifted grid starts at (1, 1).
        assert_eq!(&w.data()[..4], &[5.0, 6.0, 9.0, 10.0]);
        assert_eq!(window_reverse(&w, &geom).unwrap(), x);
    }

    #[test]
    fn relative_bias_depends_on_offset_only() {
        let idx = relative_bias_index(1, 3);
        let t = 9;
        for i in 0..t {
            for j in 0..t {
                let (di, dj) = (
                    (i / 3) as isize - (j / 3) as isize,
                    (i % 3) as isize - (j % 3) as isize,
                );
                for i2 in 0..t {
                    for j2 in 0..t {
                        let d2 = (
                            (i2 / 3) as isize - (j2 / 3) as isize,
                            (i2 % 3) as isize - (j2 % 3) as isize,
                        );
                        assert_eq!(idx[i * t + j] == idx[i2 * t + j2], (di, dj) == d2);
                    }
                }
            }
        }
    }

    #[test]
    fn roll_moves_content() {
        let x = ramp(&[1, 1, 3, 4]);
        let mut g = Graph::new();
        let v = g.constant(x);
        let r = g.roll(v, &[(0, 1)]).unwrap();
        assert_eq!(&g.value(r).data()[..4], &[3.0, 0.0, 1.0, 2.0]);
    }
}
