//! im2col convolution kernels (forward, input gradient, weight gradient).

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

impl Conv2dSpec {
    pub fn same(kernel: usize) -> Self {
        Conv2dSpec {
            stride: 1,
            padding: kernel / 2,
            groups: 1,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

/// Resolved extents of one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub spec: Conv2dSpec,
}

impl ConvGeom {
    pub fn resolve<T: Element>(
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        spec: Conv2dSpec,
    ) -> Result<Self> {
        let (n, cin, h, w) = input.nchw("conv2d")?;
        let (cout, cin_g, kh, kw) = weight.nchw("conv2d")?;
        if spec.stride == 0 {
            return Err(Error::Config("conv2d: stride must be >= 1".into()));
        }
        if spec.groups == 0 || cin % spec.groups != 0 || cout % spec.groups != 0 {
            return Err(Error::Config(format!(
                "conv2d: groups={} must divide in_channels={cin} and out_channels={cout}",
                spec.groups
            )));
        }
        if cin_g != cin / spec.groups {
            return Err(Error::dim(
                "conv2d",
                "weight.in_channels",
                cin / spec.groups,
                cin_g,
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::dim("conv2d", "bias", cout, b.numel()));
            }
        }
        let (hp, wp) = (h + 2 * spec.padding, w + 2 * spec.padding);
        if hp < kh {
            return Err(Error::dim("conv2d", "height", kh, hp));
        }
        if wp < kw {
            return Err(Error::dim("conv2d", "width", kw, wp));
        }
        Ok(ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            oh: (hp - kh) / spec.stride + 1,
            ow: (wp - kw) / spec.stride + 1,
            spec,
        })
    }

    fn cin_g(&self) -> usize {
        self.cin / self.spec.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.spec.groups
    }

    /// Rows of the im2col matrix for one group.
    fn k(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }

    /// A 1×1, stride-1, unpadded conv reads its input directly as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == 1 && self.spec.padding == 0
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.cout, self.oh, self.ow]
    }
}

/// Output columns `ox` whose input column `ox·stride + kj − pad` lies in `[0, w)`.
fn valid_cols(ow: usize, w: usize, stride: usize, offset: isize) -> (usize, usize) {
    // ix = ox·stride + offset ≥ 0  and  ix < w
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) as usize).div_ceil(stride)
    };
    let hi = if (w as isize) <= offset {
        0
    } else {
        ((w as isize - offset) as usize).div_ceil(stride).min(ow)
    };
    (lo.min(hi), hi)
}

fn im2col<T: Element>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let (h, w, p) = (g.h, g.w, g.p());
    let (stride, pad) = (g.spec.stride, g.spec.padding as isize);
    for c in 0..g.cin_g() {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                let offset = kj as isize - pad;
                let (lo, hi) = valid_cols(g.ow, w, stride, offset);
                for oy in 0..g.oh {
                    let iy = (oy * stride) as isize + ki as isize - pad;
                    let seg = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= h as isize {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    seg[..lo].fill(T::zero());
                    seg[hi..].fill(T::zero());
                    let start = (lo * stride) as isize + offset;
                    if stride == 1 {
                        let start = start as usize;
                        seg[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (i, out) in seg[lo..hi].iter_mut().enumerate() {
                            *out = src[start as usize + i * stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (h, w, p) = (g.h, g.w, g.p());
    let (stride, pad) = (g.spec.stride, g.spec.padding as isize);
    for c in 0..g.cin_g() {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                let offset = kj as isize - pad;
                let (lo, hi) = valid_cols(g.ow, w, stride, offset);
                for oy in 0..g.oh {
                    let iy = (oy * stride) as isize + ki as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let seg = &src[oy * g.ow + lo..oy * g.ow + hi];
                    let start = ((lo * stride) as isize + offset) as usize;
                    for (i, &v) in seg.iter().enumerate() {
                        let d = &mut dst[start + i * stride];
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeom,
) -> Tensor<T> {
    let (k, p) = (g.k(), g.p());
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * p;
    let mut out = vec![T::zero(); g.n * out_len];
    out.par_chunks_mut(out_len)
        .enumerate()
        .for_each(|(n, out_n)| {
            let x_n = &x.data()[n * in_len..(n + 1) * in_len];
            let mut col = if g.is_pointwise() {
                Vec::new()
            } else {
                vec![T::zero(); k * p]
            };
            for grp in 0..g.spec.groups {
                let x_g = &x_n[grp * cin_g * g.h * g.w..(grp + 1) * cin_g * g.h * g.w];
                let col_ref: &[T] = if g.is_pointwise() {
                    x_g
                } else {
                    im2col(x_g, g, &mut col);
                    &col
                };
                let w_g = &weight.data()[grp * cout_g * k..(grp + 1) * cout_g * k];
                let o_g = &mut out_n[grp * cout_g * p..(grp + 1) * cout_g * p];
                crate::tensor::matmul_into(cout_g, k, p, w_g, col_ref, o_g, false);
            }
            if let Some(b) = bias {
                for (o, plane) in out_n.chunks_mut(p).enumerate() {
                    let bo = b.data()[o];
                    plane.iter_mut().for_each(|v| *v = *v + bo);
                }
            }
        });
    Tensor::new(&g.out_shape(), out).expect("conv output shape")
}

pub(crate) fn backward_input<T: Element>(
    dout: &Tensor<T>,
    weight: &Tensor<T>,
    g: &ConvGeom,
) -> Tensor<T> {
    let (k, p) = (g.k(), g.p());
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * p;
    let mut dx = vec![T::zero(); g.n * in_len];
    dx.par_chunks_mut(in_len).enumerate().for_each(|(n, dx_n)| {
        let d_n = &dout.data()[n * out_len..(n + 1) * out_len];
        let mut dcol = vec![T::zero(); k * p];
        for grp in 0..g.spec.groups {
            let w_g = &weight.data()[grp * cout_g * k..(grp + 1) * cout_g * k];
            let d_g = &d_n[grp * cout_g * p..(grp + 1) * cout_g * p];
            let dx_g = &mut dx_n[grp * cin_g * g.h * g.w..(grp + 1) * cin_g * g.h * g.w];
            // dcol[k×p] = w_gᵀ · d_g
            T::gemm(
                k,
                cout_g,
                p,
                T::one(),
                w_g,
                1,
                k as isize,
                d_g,
                p as isize,
                1,
                T::zero(),
                &mut dcol,
                p as isize,
                1,
            );
            if g.is_pointwise() {
                for (a, &b) in dx_g.iter_mut().zip(&dcol) {
                    *a = *a + b;
                }
            } else {
                col2im(&dcol, g, dx_g);
            }
        }
    });
    Tensor::new(&[g.n, g.cin, g.h, g.w], dx).expect("conv input grad shape")
}

pub(crate) fn backward_weight<T: Element>(
    dout: &Tensor<T>,
    x: &Tensor<T>,
    g: &ConvGeom,
) -> Tensor<T> {
    let (k, p) = (g.k(), g.p());
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * p;
    let w_len = g.cout * k;
    // Per-sample partials are reduced in sample order so the result does not
    // depend on the thread count.
    let partials: Vec<Vec<T>> = (0..g.n)
        .into_par_iter()
        .map(|n| {
            let x_n = &x.data()[n * in_len..(n + 1) * in_len];
            let d_n = &dout.data()[n * out_len..(n + 1) * out_len];
            let mut dw = vec![T::zero(); w_len];
            let mut col = if g.is_pointwise() {
                Vec::new()
            } else {
                vec![T::zero(); k * p]
            };
            for grp in 0..g.spec.groups {
                let x_g = &x_n[grp * cin_g * g.h * g.w..(grp + 1) * cin_g * g.h * g.w];
                let col_ref: &[T] = if g.is_pointwise() {
                    x_g
                } else {
                    im2col(x_g, g, &mut col);
                    &col
                };
                let d_g = &d_n[grp * cout_g * p..(grp + 1) * cout_g * p];
                let dw_g = &mut dw[grp * cout_g * k..(grp + 1) * cout_g * k];
                // dw_g[cout_g×k] = d_g · colᵀ
                T::gemm(
                    cout_g,
                    p,
                    k,
                    T::one(),
                    d_g,
                    p as isize,
                    1,
                    col_ref,
                    1,
                    p as isize,
                    T::zero(),
                    dw_g,
                    k as isize,
                    1,
                );
            }
            dw
        })
        .collect();
    let mut dw = vec![T::zero(); w_len];
    for part in &partials {
        for (a, &b) in dw.iter_mut().zip(part) {
            *a = *a + b;
        }
    }
    Tensor::new(&[g.cout, cin_g, g.kh, g.kw], dw).expect("conv weight grad shape")
}

pub(crate) fn backward_bias<T: Element>(dout: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let p = g.p();
    let mut db = vec![T::zero(); g.cout];
    for n in 0..g.n {
        for (o, acc) in db.iter_mut().enumerate() {
            let start = (n * g.cout + o) * p;
            let s: T = dout.data()[start..start + p].iter().copied().sum();
            *acc = *acc + s;
        }
    }
    Tensor::new(&[g.cout], db).expect("conv bias grad shape")
}
