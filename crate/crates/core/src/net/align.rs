//! Parameter-free alignment of the previous blended features onto the
//! current frame, guided by spatially denoised features.

use std::sync::Arc;

use crate::autodiff::layout::reflect;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Alignment {
    /// Previous features pass through unchanged.
    Identity,
    /// One integer translation per image, found by exhaustive correlation search.
    GlobalShift,
    /// Block-matching flow, interpolated per pixel and applied by bilinear warping.
    FlowWarp,
}

impl Alignment {
    pub fn name(self) -> &'static str {
        match self {
            Alignment::Identity => "identity",
            Alignment::GlobalShift => "global_shift",
            Alignment::FlowWarp => "flow_warp",
        }
    }
}

impl std::str::FromStr for Alignment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Alignment::Identity),
            "global_shift" => Ok(Alignment::GlobalShift),
            "flow_warp" => Ok(Alignment::FlowWarp),
            other => Err(Error::Config(format!(
                "unknown alignment `{other}` (expected identity|global_shift|flow_warp)"
            ))),
        }
    }
}

/// Side of the blocks used by [`Alignment::FlowWarp`], in feature pixels.
pub const FLOW_BLOCK: usize = 4;

/// Per-sample `[c·h·w]` planes of an NCHW tensor as `f64`.
fn sample_planes<T: Element>(t: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
    let (n, c, h, w) = t.nchw("align")?;
    let len = c * h * w;
    Ok((0..n)
        .map(|b| t.data()[b * len..(b + 1) * len].iter().map(|v| v.f64()).collect())
        .collect())
}

/// Integer `(dy, dx)` within `±radius` such that cyclically translating `prev`
/// by it best matches `curr` under zero-mean cross-correlation summed over
/// planes. Both hold `k` stacked `h × w` planes. Ties go to the smaller
/// displacement.
pub fn estimate_global_shift(
    curr: &[f64],
    prev: &[f64],
    h: usize,
    w: usize,
    radius: usize,
) -> (isize, isize) {
    let plane = h * w;
    let centered = |m: &[f64]| -> Vec<f64> {
        m.chunks(plane)
            .flat_map(|c| {
                let mean = c.iter().sum::<f64>() / plane as f64;
                c.iter().map(move |v| v - mean)
            })
            .collect()
    };
    let (a, p) = (centered(curr), centered(prev));
    let planes = curr.len() / plane;
    let r = radius as isize;
    let mut candidates: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .collect();
    candidates.sort_by_key(|&(dy, dx)| (dy.abs() + dx.abs(), dy.abs(), dy, dx));
    let mut best = (0, 0);
    let mut best_score = f64::NEG_INFINITY;
    for (dy, dx) in candidates {
        let mut score = 0.0;
        for k in 0..planes {
            let (a, p) = (&a[k * plane..][..plane], &p[k * plane..][..plane]);
            for y in 0..h {
                let sy = (y as isize - dy).rem_euclid(h as isize) as usize;
                for x in 0..w {
                    let sx = (x as isize - dx).rem_euclid(w as isize) as usize;
                    score += a[y * w + x] * p[sy * w + sx];
                }
            }
        }
        if score > best_score {
            best_score = score;
            best = (dy, dx);
        }
    }
    best
}

/// Per-block integer displacements `(dy, dx)` minimizing the sum of absolute
/// differences between `curr` blocks and `prev` read at `(y − dy, x − dx)`,
/// summed over the stacked `h × w` planes of both.
pub fn block_matching_flow(
    curr: &[f64],
    prev: &[f64],
    h: usize,
    w: usize,
    block: usize,
    radius: usize,
) -> Vec<(isize, isize)> {
    let (by, bx) = (h.div_ceil(block), w.div_ceil(block));
    let r = radius as isize;
    let mut candidates: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .collect();
    candidates.sort_by_key(|&(dy, dx)| (dy.abs() + dx.abs(), dy.abs(), dy, dx));
    let mut flow = Vec::with_capacity(by * bx);
    for j in 0..by {
        for i in 0..bx {
            let mut best = (0, 0);
            let mut best_sad = f64::INFINITY;
            for &(dy, dx) in &candidates {
                let mut sad = 0.0;
                for (c, p) in curr.chunks(h * w).zip(prev.chunks(h * w)) {
                    for y in j * block..((j + 1) * block).min(h) {
                        let sy = reflect(y as isize - dy, h);
                        for x in i * block..((i + 1) * block).min(w) {
                            let sx = reflect(x as isize - dx, w);
                            sad += (c[y * w + x] - p[sy * w + sx]).abs();
                        }
                    }
                }
                if sad < best_sad {
                    best_sad = sad;
                    best = (dy, dx);
                }
            }
            flow.push(best);
        }
    }
    flow
}

/// Per-pixel flow from block flow by bilinear interpolation between block centers.
fn dense_flow(blocks: &[(isize, isize)], h: usize, w: usize, block: usize) -> Vec<(f64, f64)> {
    let (by, bx) = (h.div_ceil(block), w.div_ceil(block));
    let center = |k: usize| k as f64 * block as f64 + (block as f64 - 1.0) / 2.0;
    let locate = |pos: f64, count: usize| -> (usize, usize, f64) {
        let t = (pos - (block as f64 - 1.0) / 2.0) / block as f64;
        if t <= 0.0 || count == 1 {
            return (0, 0, 0.0);
        }
        let k0 = (t.floor() as usize).min(count - 1);
        let k1 = (k0 + 1).min(count - 1);
        let frac = if k1 == k0 {
            0.0
        } else {
            (pos - center(k0)) / block as f64
        };
        (k0, k1, frac)
    };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let (j0, j1, fy) = locate(y as f64, by);
        for x in 0..w {
            let (i0, i1, fx) = locate(x as f64, bx);
            let at = |j: usize, i: usize| blocks[j * bx + i];
            let mut acc = (0.0, 0.0);
            for (j, wy) in [(j0, 1.0 - fy), (j1, fy)] {
                for (i, wx) in [(i0, 1.0 - fx), (i1, fx)] {
                    let (dy, dx) = at(j, i);
                    acc.0 += wy * wx * dy as f64;
                    acc.1 += wy * wx * dx as f64;
                }
            }
            out.push(acc);
        }
    }
    out
}

/// Bilinear taps reading `prev` at `(y − fy, x − fx)` with edge clamping.
fn warp_taps<T: Element>(
    flows: &[Vec<(f64, f64)>],
    c: usize,
    h: usize,
    w: usize,
) -> Vec<[(usize, T); 4]> {
    let mut taps = Vec::with_capacity(flows.len() * c * h * w);
    for (b, flow) in flows.iter().enumerate() {
        for ch in 0..c {
            let base = (b * c + ch) * h * w;
            for y in 0..h {
                for x in 0..w {
                    let (fy, fx) = flow[y * w + x];
                    let sy = (y as f64 - fy).clamp(0.0, (h - 1) as f64);
                    let sx = (x as f64 - fx).clamp(0.0, (w - 1) as f64);
                    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                    let (ty, tx) = (sy - y0 as f64, sx - x0 as f64);
                    taps.push([
                        (base + y0 * w + x0, T::of((1.0 - ty) * (1.0 - tx))),
                        (base + y0 * w + x1, T::of((1.0 - ty) * tx)),
                        (base + y1 * w + x0, T::of(ty * (1.0 - tx))),
                        (base + y1 * w + x1, T::of(ty * tx)),
                    ]);
                }
            }
        }
    }
    taps
}

/// Aligns `prev` (previous blended features) to the current frame.
///
/// The guides only steer the displacement search; gradients flow to `prev`.
pub fn align<T: Element>(
    g: &mut Graph<T>,
    prev: Var,
    guide_curr: Var,
    guide_prev: Var,
    strategy: Alignment,
    radius: usize,
) -> Result<Var> {
    if g.shape(guide_curr) != g.shape(guide_prev) {
        return Err(Error::shapes("align", g.shape(guide_curr), g.shape(guide_prev)));
    }
    let (n, c, h, w) = g.value(prev).nchw("align")?;
    let (gn, _, gh, gw) = g.value(guide_curr).nchw("align")?;
    if (gn, gh, gw) != (n, h, w) {
        return Err(Error::shapes("align", g.shape(prev), g.shape(guide_curr)));
    }
    match strategy {
        Alignment::Identity => Ok(prev),
        Alignment::GlobalShift => {
            let curr = sample_planes(g.value(guide_curr))?;
            let past = sample_planes(g.value(guide_prev))?;
            let shifts: Vec<(isize, isize)> = curr
                .iter()
                .zip(&past)
                .map(|(a, p)| estimate_global_shift(a, p, h, w, radius))
                .collect();
            g.roll(prev, &shifts)
        }
        Alignment::FlowWarp => {
            let curr = sample_planes(g.value(guide_curr))?;
            let past = sample_planes(g.value(guide_prev))?;
            let flows: Vec<Vec<(f64, f64)>> = curr
                .iter()
                .zip(&past)
                .map(|(a, p)| {
                    let blocks = block_matching_flow(a, p, h, w, FLOW_BLOCK, radius);
                    dense_flow(&blocks, h, w, FLOW_BLOCK)
                })
                .collect();
            let taps = warp_taps::<T>(&flows, c, h, w);
            g.interp(prev, Arc::new(taps), &[n, c, h, w])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern(h: usize, w: usize) -> Vec<f64> {
        (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as f64, (i % w) as f64);
                (0.9 * x + 0.4 * y).sin() + (0.3 * x * y).cos() * 0.5
            })
            .collect()
    }

    fn roll(m: &[f64], h: usize, w: usize, dy: isize, dx: isize) -> Vec<f64> {
        (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as isize, (i % w) as isize);
                let sy = (y - dy).rem_euclid(h as isize) as usize;
                let sx = (x - dx).rem_euclid(w as isize) as usize;
                m[sy * w + sx]
            })
            .collect()
    }

    /// Independent exhaustive search: maximize correlation over all shifts
    /// without any tie-breaking order.
    fn brute_force(curr: &[f64], prev: &[f64], h: usize, w: usize, r: isize) -> (isize, isize) {
        let mut best = ((0, 0), f64::NEG_INFINITY);
        for dy in -r..=r {
            for dx in -r..=r {
                let shifted = roll(prev, h, w, dy, dx);
                let (mc, ms) = (
                    curr.iter().sum::<f64>() / curr.len() as f64,
                    shifted.iter().sum::<f64>() / shifted.len() as f64,
                );
                let s: f64 = curr
                    .iter()
                    .zip(&shifted)
                    .map(|(a, b)| (a - mc) * (b - ms))
                    .sum();
                if s > best.1 {
                    best = ((dy, dx), s);
                }
            }
        }
        best.0
    }

    #[test]
    fn recovers_horizontal_shift() {
        let (h, w) = (16, 16);
        let prev = pattern(h, w);
        let curr = roll(&prev, h, w, 0, 2);
        assert_eq!(brute_force(&curr, &prev, h, w, 4), (0, 2));
        assert_eq!(estimate_global_shift(&curr, &prev, h, w, 4), (0, 2));
    }

    #[test]
    fn uses_every_plane_when_channel_mean_is_flat() {
        let (h, w) = (12, 12);
        let base = pattern(h, w);
        let neg: Vec<f64> = base.iter().map(|v| -v).collect();
        let prev: Vec<f64> = base.iter().chain(&neg).copied().collect();
        let curr: Vec<f64> = roll(&base, h, w, -1, 2)
            .into_iter()
            .chain(roll(&neg, h, w, -1, 2))
            .collect();
        assert_eq!(estimate_global_shift(&curr, &prev, h, w, 3), (-1, 2));
        let flow = block_matching_flow(&curr, &prev, h, w, 4, 3);
        assert_eq!(flow[4], (-1, 2));
    }

    #[test]
    fn zero_motion_finds_origin() {
        let prev = pattern(12, 10);
        assert_eq!(estimate_global_shift(&prev, &prev, 12, 10, 4), (0, 0));
    }

    #[test]
    fn matches_brute_force_on_diagonal_shifts() {
        let (h, w) = (16, 12);
        let prev = pattern(h, w);
        for (dy, dx) in [(1, -3), (-4, 4), (2, 0), (-1, -1)] {
            let curr = roll(&prev, h, w, dy, dx);
            assert_eq!(estimate_global_shift(&curr, &prev, h, w, 4), (dy, dx));
            assert_eq!(brute_force(&curr, &prev, h, w, 4), (dy, dx));
        }
    }

    #[test]
    fn identity_strategy_is_passthrough() {
        let mut g = Graph::<f64>::new();
        let prev = g.constant(Tensor::from_fn(&[1, 2, 4, 4], |i| i as f64));
        let guide = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let out = align(&mut g, prev, guide, guide, Alignment::Identity, 4).unwrap();
        assert_eq!(out, prev);
    }

    #[test]
    fn global_shift_moves_previous_features() {
        let (h, w) = (8, 8);
        let base = pattern(h, w);
        let shifted = roll(&base, h, w, 1, 2);
        let mut g = Graph::<f64>::new();
        let guide_prev = g.constant(Tensor::new(&[1, 1, h, w], base.clone()).unwrap());
        let guide_curr = g.constant(Tensor::new(&[1, 1, h, w], shifted.clone()).unwrap());
        let out = align(&mut g, guide_prev, guide_curr, guide_prev, Alignment::GlobalShift, 4).unwrap();
        assert_eq!(g.value(out).data(), &shifted[..]);
    }

    #[test]
    fn flow_warp_recovers_interior_translation() {
        let (h, w) = (16, 16);
        let base = pattern(h, w);
        let moved = roll(&base, h, w, 0, 1);
        let mut g = Graph::<f64>::new();
        let gp = g.constant(Tensor::new(&[1, 1, h, w], base).unwrap());
        let gc = g.constant(Tensor::new(&[1, 1, h, w], moved.clone()).unwrap());
        let out = align(&mut g, gp, gc, gp, Alignment::FlowWarp, 2).unwrap();
        let v = g.value(out).data();
        for y in 2..h - 2 {
            for x in 2..w - 2 {
                assert!((v[y * w + x] - moved[y * w + x]).abs() < 1e-12);
            }
        }
    }
}
