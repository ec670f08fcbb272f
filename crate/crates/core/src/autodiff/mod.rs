//! Reverse-mode differentiation over a tape of tensor operations.
//!
//! A [`Graph`] owns every intermediate value. Nodes are appended in
//! evaluation order, so the tape order is already topological and
//! [`Graph::backward`] walks it once in reverse.

mod conv;
pub mod gradcheck;
pub mod layout;

use std::sync::Arc;

pub use conv::Conv2dSpec;
use conv::ConvGeom;

use crate::error::{Error, Result};
use crate::rsste::attention::{self, AttentionKind, AttnDims, AttnSaved};
use crate::tensor::{matmul_into, Element, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Sigmoid,
    Gelu,
}

/// How off-diagonal covariance entries enter the orthogonality penalty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OrthoMode {
    /// Sum of off-diagonal entries as they are (can be negative).
    Signed,
    /// Sum of absolute off-diagonal entries.
    Absolute,
}

impl std::str::FromStr for OrthoMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "signed" => Ok(OrthoMode::Signed),
            "absolute" => Ok(OrthoMode::Absolute),
            other => Err(Error::Config(format!(
                "unknown ortho_mode `{other}` (expected signed|absolute)"
            ))),
        }
    }
}

impl OrthoMode {
    pub fn name(self) -> &'static str {
        match self {
            OrthoMode::Signed => "signed",
            OrthoMode::Absolute => "absolute",
        }
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: T,
    },
    ScalarMul {
        x: Var,
        s: Var,
    },
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Activation {
        x: Var,
        kind: Activation,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        /// Per-row `(mean, 1/std)`.
        stats: Vec<(T, T)>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Gather {
        x: Var,
        index: Arc<Vec<usize>>,
    },
    Interp {
        x: Var,
        taps: Arc<Vec<[(usize, T); 4]>>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        dims: AttnDims,
        kind: AttentionKind,
        saved: AttnSaved<T>,
    },
    Blend {
        w: Var,
        a: Var,
        b: Var,
    },
    Orthogonality {
        mats: Vec<Var>,
        mode: OrthoMode,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine { .. } => "affine",
            Op::ScalarMul { .. } => "scalar_mul",
            Op::Abs(..) => "abs",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Activation { kind, .. } => match kind {
                Activation::LeakyRelu(_) => "leaky_relu",
                Activation::Sigmoid => "sigmoid",
                Activation::Gelu => "gelu",
            },
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::Concat { .. } => "concat",
            Op::Gather { .. } => "gather",
            Op::Interp { .. } => "interp",
            Op::Attention { kind, .. } => match kind {
                AttentionKind::Euclidean => "euclidean_attention",
                AttentionKind::DotProduct => "dot_product_attention",
            },
            Op::Blend { .. } => "blend",
            Op::Orthogonality { .. } => "orthogonality",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of tensor operations supporting reverse-mode differentiation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to every leaf that requires them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn zip_map<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Vec<T> {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect()
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu<T: Element>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (x / T::of(std::f64::consts::SQRT_2)).erf())
}

fn gelu_grad<T: Element>(x: T) -> T {
    let half = T::of(0.5);
    let cdf = half * (T::one() + (x / T::of(std::f64::consts::SQRT_2)).erf());
    let pdf = (-half * x * x).exp() / T::of((2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

fn sigmoid<T: Element>(x: T) -> T {
    // Branching keeps exp() from overflowing for large |x|.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn activate<T: Element>(x: T, kind: Activation) -> T {
    match kind {
        Activation::LeakyRelu(slope) => {
            if x >= T::zero() {
                x
            } else {
                T::of(slope) * x
            }
        }
        Activation::Sigmoid => sigmoid(x),
        Activation::Gelu => gelu(x),
    }
}

/// Row-centered matrices and their per-matrix orthogonality terms.
pub(crate) fn ortho_terms<T: Element>(m: &Tensor<T>, mode: OrthoMode) -> Option<(Vec<T>, T)> {
    let [rows, cols] = m.shape()[..] else {
        return None;
    };
    if rows < 2 {
        return None;
    }
    let mut centered = m.data().to_vec();
    for row in centered.chunks_mut(cols) {
        let mean = row.iter().copied().sum::<T>() / T::of(cols as f64);
        row.iter_mut().for_each(|x| *x = *x - mean);
    }
    let mut off = T::zero();
    for a in 0..rows {
        for b in 0..rows {
            if a == b {
                continue;
            }
            let dot: T = centered[a * cols..(a + 1) * cols]
                .iter()
                .zip(&centered[b * cols..(b + 1) * cols])
                .map(|(&x, &y)| x * y)
                .sum();
            off = off
                + match mode {
                    OrthoMode::Signed => dot,
                    OrthoMode::Absolute => dot.abs(),
                };
        }
    }
    Some((centered, off / T::of((rows * (rows - 1)) as f64)))
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shapes(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let data = zip_map(self.value(a), self.value(b), f);
        let value = Tensor::new(self.shape(a), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, t) = (T::of(scale), T::of(shift));
        let value = self.value(x).map(|v| s * v + t);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Affine { x, scale: s }, rg)
    }

    /// Multiplies every element of `x` by the single-element tensor `s`.
    pub fn scalar_mul(&mut self, x: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::dim("scalar_mul", "scalar", 1, self.value(s).numel()));
        }
        let sv = self.value(s).data()[0];
        let value = self.value(x).map(|v| v * sv);
        let rg = self.any_grad(&[x, s]);
        Ok(self.push(value, Op::ScalarMul { x, s }, rg))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.abs());
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Abs(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::of(self.value(x).numel() as f64);
        let value = Tensor::scalar(self.value(x).sum() / n);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Mean(x), rg)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let value = self.value(x).map(|v| activate(v, kind));
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Activation { x, kind }, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.activation(x, Activation::LeakyRelu(slope))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Gelu)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", "axis", shape.len(), axis));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = src.to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total = total + e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    /// Normalizes over the last axis, then applies `gamma·x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(Error::dim("layer_norm", "rank", 1, 0))?;
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(Error::dim("layer_norm", "features", d, self.value(p).numel()));
            }
        }
        let eps = T::of(eps);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        let mut stats = Vec::with_capacity(src.len() / d.max(1));
        let inv_d = T::one() / T::of(d as f64);
        for (row, dst) in src.chunks(d).zip(out.chunks_mut(d)) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rstd = T::one() / (var + eps).sqrt();
            for (j, o) in dst.iter_mut().enumerate() {
                *o = g[j] * (row[j] - mean) * rstd + b[j];
            }
            stats.push((mean, rstd));
        }
        let value = Tensor::new(&shape, out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            rg,
        ))
    }

    /// `x·W + b` over the last axis, with `W` stored `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let [fan_in, fan_out] = self.shape(w)[..] else {
            return Err(Error::dim("linear", "weight.rank", 2, self.shape(w).len()));
        };
        let d = *xs.last().ok_or(Error::dim("linear", "rank", 1, 0))?;
        if d != fan_in {
            return Err(Error::dim("linear", "in_features", fan_in, d));
        }
        if let Some(b) = b {
            if self.shape(b) != [fan_out] {
                return Err(Error::dim("linear", "bias", fan_out, self.value(b).numel()));
            }
        }
        let rows = self.value(x).numel() / fan_in.max(1);
        let mut out = vec![T::zero(); rows * fan_out];
        matmul_into(
            rows,
            fan_in,
            fan_out,
            self.value(x).data(),
            self.value(w).data(),
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(fan_out) {
                for (o, &bb) in row.iter_mut().zip(bias) {
                    *o = *o + bb;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = fan_out;
        let value = Tensor::new(&shape, out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    /// Zero-padded 2-D convolution on NCHW input with OIHW weights.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let geom = ConvGeom::resolve(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            spec,
        )?;
        let value = conv::forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom);
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat", "axis", first.len(), axis));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shapes("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(&shape, out)?;
        let rg = self.any_grad(parts);
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::dim("gather", "index", src.len(), bad));
        }
        let value = Tensor::new(shape, index.iter().map(|&i| src[i]).collect())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Gather { x, index }, rg))
    }

    /// `out[i] = Σ_t w_t · x[idx_t]` over four taps per output element.
    pub fn interp(
        &mut self,
        x: Var,
        taps: Arc<Vec<[(usize, T); 4]>>,
        shape: &[usize],
    ) -> Result<Var> {
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(taps.len());
        for tap in taps.iter() {
            let mut acc = T::zero();
            for &(i, w) in tap {
                if i >= src.len() {
                    return Err(Error::dim("interp", "index", src.len(), i));
                }
                acc = acc + w * src[i];
            }
            out.push(acc);
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Interp { x, taps }, rg))
    }

    /// Multi-head attention over `[batch, tokens, channels]` tokens.
    ///
    /// `bias`, when present, is `[heads, tokens, tokens]`.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        heads: usize,
        kind: AttentionKind,
        eps: f64,
    ) -> Result<Var> {
        let dims = AttnDims::resolve(
            self.value(q),
            self.value(k),
            self.value(v),
            bias.map(|b| self.value(b)),
            heads,
        )?;
        let (out, saved) = attention::forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            bias.map(|b| self.value(b).data()),
            dims,
            kind,
            T::of(eps),
        );
        let value = Tensor::new(self.shape(q), out)?;
        let mut deps = vec![q, k, v];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                bias,
                dims,
                kind,
                saved,
            },
            rg,
        ))
    }

    /// `w ⊙ a + (1 − w) ⊙ b`.
    pub fn blend(&mut self, w: Var, a: Var, b: Var) -> Result<Var> {
        self.same_shape("blend", w, a)?;
        self.same_shape("blend", a, b)?;
        let (wv, av, bv) = (self.value(w).data(), self.value(a).data(), self.value(b).data());
        let out = (0..wv.len())
            .map(|i| wv[i] * av[i] + (T::one() - wv[i]) * bv[i])
            .collect();
        let value = Tensor::new(self.shape(a), out)?;
        let rg = self.any_grad(&[w, a, b]);
        Ok(self.push(value, Op::Blend { w, a, b }, rg))
    }

    /// Mean over matrices of the mean off-diagonal entry of the row-centered
    /// Gram matrix `(W − W̄)(W − W̄)ᵀ`. Matrices with fewer than two rows are
    /// skipped with a warning; with none left the result is zero.
    pub fn orthogonality(&mut self, mats: &[Var], mode: OrthoMode) -> Result<Var> {
        let mut total = T::zero();
        let mut count = 0usize;
        for &m in mats {
            if self.shape(m).len() != 2 {
                return Err(Error::dim("orthogonality", "rank", 2, self.shape(m).len()));
            }
            match ortho_terms(self.value(m), mode) {
                Some((_, o)) => {
                    total = total + o;
                    count += 1;
                }
                None => log::warn!(
                    "orthogonality: skipping single-row matrix of shape {:?}",
                    self.shape(m)
                ),
            }
        }
        let o = if count == 0 {
            T::zero()
        } else {
            total / T::of(count as f64)
        };
        let rg = self.any_grad(mats);
        Ok(self.push(
            Tensor::scalar(o),
            Op::Orthogonality {
                mats: mats.to_vec(),
                mode,
            },
            rg,
        ))
    }

    /// Name and index of the first node holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.all_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    /// Back-propagates from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(rv.shape(), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let mut acc = |var: Var, f: &dyn Fn(&mut [T])| {
            if !self.nodes[var.0].requires_grad {
                return;
            }
            let slot = &mut grads[var.0];
            if slot.is_none() {
                *slot = Some(Tensor::zeros(self.shape(var)));
            }
            f(slot.as_mut().unwrap().data_mut());
        };
        let add_scaled = |dst: &mut [T], src: &[T], s: T| {
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = *d + s * v;
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &|d| add_scaled(d, gd, T::one()));
                acc(*b, &|d| add_scaled(d, gd, T::one()));
            }
            Op::Sub(a, b) => {
                acc(*a, &|d| add_scaled(d, gd, T::one()));
                acc(*b, &|d| add_scaled(d, gd, -T::one()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + gd[i] * bv[i];
                    }
                });
                acc(*b, &|d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + gd[i] * av[i];
                    }
                });
            }
            Op::Affine { x, scale } => acc(*x, &|d| add_scaled(d, gd, *scale)),
            Op::ScalarMul { x, s } => {
                let sv = self.value(*s).data()[0];
                let xv = self.value(*x).data();
                acc(*x, &|d| add_scaled(d, gd, sv));
                acc(*s, &|d| {
                    let dot: T = gd.iter().zip(xv).map(|(&a, &b)| a * b).sum();
                    d[0] = d[0] + dot;
                });
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                acc(*x, &|d| {
                    for i in 0..d.len() {
                        let s = if xv[i] > T::zero() {
                            T::one()
                        } else if xv[i] < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        d[i] = d[i] + gd[i] * s;
                    }
                });
            }
            Op::Sum(x) => acc(*x, &|d| d.iter_mut().for_each(|v| *v = *v + gd[0])),
            Op::Mean(x) => {
                let s = gd[0] / T::of(self.value(*x).numel() as f64);
                acc(*x, &|d| d.iter_mut().for_each(|v| *v = *v + s));
            }
            Op::Activation { x, kind } => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                acc(*x, &|d| {
                    for i in 0..d.len() {
                        let local = match kind {
                            Activation::LeakyRelu(slope) => {
                                if xv[i] >= T::zero() {
                                    T::one()
                                } else {
                                    T::of(*slope)
                                }
                            }
                            Activation::Sigmoid => yv[i] * (T::one() - yv[i]),
                            Activation::Gelu => gelu_grad(xv[i]),
                        };
                        d[i] = d[i] + gd[i] * local;
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let yv = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                acc(*x, &|d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: T = (0..len).map(|j| gd[at(j)] * yv[at(j)]).sum();
                            for j in 0..len {
                                d[at(j)] = d[at(j)] + yv[at(j)] * (gd[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let xv = self.value(*x).data();
                let gam = self.value(*gamma).data();
                let d_feat = gam.len();
                let inv_d = T::one() / T::of(d_feat as f64);
                acc(*x, &|dx| {
                    let mut xhat = vec![T::zero(); d_feat];
                    let mut dxhat = vec![T::zero(); d_feat];
                    for (r, &(mean, rstd)) in stats.iter().enumerate() {
                        let base = r * d_feat;
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d_feat {
                            xhat[j] = (xv[base + j] - mean) * rstd;
                            dxhat[j] = gd[base + j] * gam[j];
                            m1 = m1 + dxhat[j];
                            m2 = m2 + dxhat[j] * xhat[j];
                        }
                        m1 = m1 * inv_d;
                        m2 = m2 * inv_d;
                        for j in 0..d_feat {
                            dx[base + j] = dx[base + j] + rstd * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                });
                acc(*gamma, &|dg| {
                    for (r, &(mean, rstd)) in stats.iter().enumerate() {
                        for j in 0..d_feat {
                            let xhat = (xv[r * d_feat + j] - mean) * rstd;
                            dg[j] = dg[j] + gd[r * d_feat + j] * xhat;
                        }
                    }
                });
                acc(*beta, &|db| {
                    for row in gd.chunks(d_feat) {
                        for j in 0..d_feat {
                            db[j] = db[j] + row[j];
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let [fan_in, fan_out] = self.shape(*w)[..] else {
                    unreachable!()
                };
                let rows = gd.len() / fan_out.max(1);
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                // dx[rows×in] += g · wᵀ
                acc(*x, &|dx| {
                    T::gemm(
                        rows,
                        fan_out,
                        fan_in,
                        T::one(),
                        gd,
                        fan_out as isize,
                        1,
                        wv,
                        1,
                        fan_out as isize,
                        T::one(),
                        dx,
                        fan_in as isize,
                        1,
                    )
                });
                // dw[in×out] += xᵀ · g
                acc(*w, &|dw| {
                    T::gemm(
                        fan_in,
                        rows,
                        fan_out,
                        T::one(),
                        xv,
                        1,
                        fan_in as isize,
                        gd,
                        fan_out as isize,
                        1,
                        T::one(),
                        dw,
                        fan_out as isize,
                        1,
                    )
                });
                if let Some(b) = b {
                    acc(*b, &|db| {
                        for row in gd.chunks(fan_out) {
                            for j in 0..fan_out {
                                db[j] = db[j] + row[j];
                            }
                        }
                    });
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                if self.nodes[x.0].requires_grad {
                    let dx = conv::backward_input(g, self.value(*w), geom);
                    acc(*x, &|d| add_scaled(d, dx.data(), T::one()));
                }
                if self.nodes[w.0].requires_grad {
                    let dw = conv::backward_weight(g, self.value(*x), geom);
                    acc(*w, &|d| add_scaled(d, dw.data(), T::one()));
                }
                if let Some(b) = b {
                    if self.nodes[b.0].requires_grad {
                        let db = conv::backward_bias(g, geom);
                        acc(*b, &|d| add_scaled(d, db.data(), T::one()));
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    acc(p, &|d| {
                        for o in 0..outer {
                            let src = &gd[o * total * inner + offset..][..len];
                            add_scaled(&mut d[o * len..(o + 1) * len], src, T::one());
                        }
                    });
                    offset += len;
                }
            }
            Op::Gather { x, index } => acc(*x, &|d| {
                for (&i, &gv) in index.iter().zip(gd) {
                    d[i] = d[i] + gv;
                }
            }),
            Op::Interp { x, taps } => acc(*x, &|d| {
                for (tap, &gv) in taps.iter().zip(gd) {
                    for &(i, w) in tap {
                        d[i] = d[i] + w * gv;
                    }
                }
            }),
            Op::Attention {
                q,
                k,
                v,
                bias,
                dims,
                kind,
                saved,
            } => {
                let grads_qkv = attention::backward(
                    gd,
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    saved,
                    *dims,
                    *kind,
                );
                acc(*q, &|d| add_scaled(d, &grads_qkv.dq, T::one()));
                acc(*k, &|d| add_scaled(d, &grads_qkv.dk, T::one()));
                acc(*v, &|d| add_scaled(d, &grads_qkv.dv, T::one()));
                if let Some(b) = bias {
                    acc(*b, &|d| add_scaled(d, &grads_qkv.dbias, T::one()));
                }
            }
            Op::Blend { w, a, b } => {
                let (wv, av, bv) = (
                    self.value(*w).data(),
                    self.value(*a).data(),
                    self.value(*b).data(),
                );
                acc(*w, &|d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + gd[i] * (av[i] - bv[i]);
                    }
                });
                acc(*a, &|d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + gd[i] * wv[i];
                    }
                });
                acc(*b, &|d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + gd[i] * (T::one() - wv[i]);
                    }
                });
            }
            Op::Orthogonality { mats, mode } => {
                let count = mats
                    .iter()
                    .filter(|m| self.shape(**m)[0] >= 2)
                    .count();
                if count == 0 {
                    return;
                }
                let outer = gd[0] / T::of(count as f64);
                for &m in mats {
                    let [rows, cols] = self.shape(m)[..] else {
                        unreachable!()
                    };
                    let Some((centered, _)) = ortho_terms(self.value(m), *mode) else {
                        continue;
                    };
                    let scale = outer / T::of((rows * (rows - 1)) as f64);
                    acc(m, &|d| {
                        // d/dc_a Σ_{a≠b} f(c_a·c_b) = 2 Σ_{b≠a} f'(c_a·c_b) c_b
                        let mut dc = vec![T::zero(); rows * cols];
                        for a in 0..rows {
                            let ca = &centered[a * cols..(a + 1) * cols];
                            for bb in 0..rows {
                                if a == bb {
                                    continue;
                                }
                                let cb = &centered[bb * cols..(bb + 1) * cols];
                                let slope = match mode {
                                    OrthoMode::Signed => T::one(),
                                    OrthoMode::Absolute => {
                                        let dot: T =
                                            ca.iter().zip(cb).map(|(&x, &y)| x * y).sum();
                                        if dot > T::zero() {
                                            T::one()
                                        } else if dot < T::zero() {
                                            -T::one()
                                        } else {
                                            T::zero()
                                        }
                                    }
                                };
                                let coef = T::of(2.0) * slope * scale;
                                for j in 0..cols {
                                    dc[a * cols + j] = dc[a * cols + j] + coef * cb[j];
                                }
                            }
                        }
                        // Row centering projects the gradient onto zero-mean rows.
                        for (row, drow) in dc.chunks(cols).zip(d.chunks_mut(cols)) {
                            let mean = row.iter().copied().sum::<T>() / T::of(cols as f64);
                            for j in 0..cols {
                                drow[j] = drow[j] + row[j] - mean;
                            }
                        }
                    });
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_all_ones_sums_window() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = g.conv2d(x, w, None, Conv2dSpec::default()).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[4.0; 4]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let xs: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
        let x = g.constant(t(&[1, 1, 3, 4], &xs));
        let w = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let b = g.constant(t(&[1], &[0.0]));
        let y = g.conv2d(x, w, Some(b), Conv2dSpec::default()).unwrap();
        assert_eq!(g.value(y).data(), &xs[..]);
    }

    #[test]
    fn conv_zero_second_group() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 4, 3, 3], |i| (i as f64).sin()));
        let w = g.constant(Tensor::from_fn(&[4, 2, 3, 3], |i| {
            if i < 2 * 18 {
                (i as f64 * 0.37).cos()
            } else {
                0.0
            }
        }));
        let spec = Conv2dSpec::same(3).with_groups(2);
        let y = g.conv2d(x, w, None, spec).unwrap();
        let out = g.value(y).data();
        assert!(out[..18].iter().any(|&v| v != 0.0));
        assert!(out[18..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_output_size_and_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 4, 7, 6]));
        let w = g.constant(Tensor::zeros(&[3, 4, 3, 3]));
        let spec = Conv2dSpec::same(3).with_stride(2);
        let y = g.conv2d(x, w, None, spec).unwrap();
        assert_eq!(g.shape(y), &[2, 3, 4, 3]);

        let bad_groups = g.conv2d(x, w, None, Conv2dSpec::same(3).with_groups(3));
        assert!(matches!(bad_groups, Err(Error::Config(_))));
        let w_bad = g.constant(Tensor::zeros(&[4, 3, 3, 3]));
        let err = g.conv2d(x, w_bad, None, Conv2dSpec::same(3)).unwrap_err();
        assert!(matches!(
            err,
            Error::Dimension {
                axis: "weight.in_channels",
                ..
            }
        ));
    }

    #[test]
    fn activations_at_known_points() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0.0, -2.0, 3.0]));
        let s = g.sigmoid(x);
        let l = g.leaky_relu(x, 0.1);
        let ge = g.gelu(x);
        assert_eq!(g.value(s).data()[0], 0.5);
        assert!((g.value(l).data()[1] + 0.2).abs() < 1e-15);
        assert_eq!(g.value(l).data()[2], 3.0);
        assert_eq!(g.value(ge).data()[0], 0.0);
        let big = g.constant(t(&[2], &[-800.0, 800.0]));
        let sb = g.sigmoid(big);
        let v = g.value(sb).data();
        assert!(v[0] >= 0.0 && v[1] <= 1.0 && v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        for &p in g.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(t(&[2], &[0.0, 2f64.ln()]));
        let y = g.softmax(x, 0).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 1.0 / 3.0).abs() < 1e-15 && (v[1] - 2.0 / 3.0).abs() < 1e-15);

        let x = g.constant(Tensor::from_fn(&[3, 5, 4], |i| (i as f64 * 1.3).sin() * 50.0));
        let y = g.softmax(x, 1).unwrap();
        let v = g.value(y).data();
        for o in 0..3 {
            for i in 0..4 {
                let s: f64 = (0..5).map(|j| v[(o * 5 + j) * 4 + i]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let ones = g.constant(Tensor::full(&[2], 1.0));
        let zeros = g.constant(Tensor::zeros(&[2]));
        let c = g.constant(t(&[1, 2], &[5.0, 5.0]));
        let y = g.layer_norm(c, ones, zeros, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);

        let x = g.constant(t(&[1, 2], &[1.0, 3.0]));
        let y = g.layer_norm(x, ones, zeros, 0.0).unwrap();
        assert_eq!(g.value(y).data(), &[-1.0, 1.0]);

        let beta = g.constant(t(&[2], &[0.25, -4.0]));
        let y = g.layer_norm(x, zeros, beta, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.25, -4.0]);
    }

    #[test]
    fn linear_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = g.constant(t(&[2, 2], &[1.0, 1.0, 0.0, 1.0]));
        let b = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 3.0]);

        let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = g.linear(x, eye, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);

        let zero = g.constant(Tensor::zeros(&[2, 3]));
        let b3 = g.constant(t(&[3], &[0.5, -1.0, 2.0]));
        let xs = g.constant(Tensor::from_fn(&[4, 2], |i| i as f64));
        let y = g.linear(xs, zero, Some(b3)).unwrap();
        for row in g.value(y).data().chunks(3) {
            assert_eq!(row, &[0.5, -1.0, 2.0]);
        }

        let bad = g.constant(Tensor::zeros(&[3, 2]));
        assert!(g.linear(x, bad, None).is_err());
    }

    #[test]
    fn backward_simple_identities() {
        let mut g = Graph::new();
        let xs = t(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 0.0, -1.5]);
        let x = g.param(xs.clone());
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);

        let mut g = Graph::new();
        let x = g.param(xs.clone());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        let expect: Vec<f64> = xs.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(grads.get(x).unwrap().data(), &expect[..]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.param(Tensor::<f64>::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn blend_examples() {
        let mut g = Graph::new();
        let shape = [1, 1, 2, 2];
        let td = g.constant(Tensor::full(&shape, 2.0));
        let wb = g.constant(Tensor::full(&shape, 4.0));
        for (w, expect) in [(1.0, 2.0), (0.0, 4.0), (0.5, 3.0)] {
            let wv = g.constant(Tensor::full(&shape, w));
            let b = g.blend(wv, td, wb).unwrap();
            assert!(g.value(b).data().iter().all(|&v| v == expect));
        }
    }
}
