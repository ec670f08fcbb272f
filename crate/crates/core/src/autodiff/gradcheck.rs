//! Central-difference verification of analytic gradients (64-bit only).

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many elements per input (evenly strided); `None` checks all.
    pub max_per_input: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-4,
            max_per_input: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over checked elements of `|a − n| / max(1, |a|, |n|)`.
    pub max_rel_error: f64,
    /// `(input, element)` of the worst element.
    pub worst: (usize, usize),
    pub checked: usize,
    /// Largest analytic gradient magnitude seen, to catch vacuous passes.
    pub max_abs_grad: f64,
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    if let Some((_, op)) = g.first_non_finite() {
        return Err(Error::NonFinite { op: op.to_string() });
    }
    let v = g.value(root);
    if !v.is_scalar() {
        return Err(Error::NonScalarRoot(v.shape().to_vec()));
    }
    Ok(v.data()[0])
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences for every (or a strided subset of) input element.
pub fn finite_diff_check<F>(
    inputs: &[Tensor<f64>],
    opts: GradCheckOptions,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    if let Some((_, op)) = g.first_non_finite() {
        return Err(Error::NonFinite { op: op.to_string() });
    }
    let grads = g.backward(root)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
        max_abs_grad: 0.0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        let zeros = Tensor::zeros(input.shape());
        let analytic = grads.get(vars[ii]).unwrap_or(&zeros);
        let n = input.numel();
        let stride = match opts.max_per_input {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for e in (0..n).step_by(stride) {
            let orig = input.data()[e];
            work[ii].data_mut()[e] = orig + opts.eps;
            let plus = evaluate(&f, &work)?;
            work[ii].data_mut()[e] = orig - opts.eps;
            let minus = evaluate(&f, &work)?;
            work[ii].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic.data()[e];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if !rel.is_finite() {
                return Err(Error::NonFinite {
                    op: "finite_diff_check".into(),
                });
            }
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (ii, e);
            }
            report.max_abs_grad = report.max_abs_grad.max(a.abs());
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_layer_passes_tightly() {
        let x = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.7).sin());
        let w = Tensor::from_fn(&[4, 2], |i| (i as f64 * 1.3).cos());
        let b = Tensor::from_fn(&[2], |i| i as f64 - 0.5);
        let r = finite_diff_check(&[x, w, b], GradCheckOptions::default(), |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            let sq = g.mul(y, y)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
        assert_eq!(r.checked, 12 + 8 + 2);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // At the kink the analytic slope is 1, the central difference 0.55.
        let x = Tensor::from_fn(&[1], |_| 0.0);
        let r = finite_diff_check(&[x], GradCheckOptions::default(), |g, v| {
            let a = g.leaky_relu(v[0], 0.1);
            Ok(g.sum(a))
        })
        .unwrap();
        assert!(r.max_rel_error > 0.1);
    }

    #[test]
    fn reports_non_finite_op() {
        let x = Tensor::from_fn(&[2], |_| 1000.0);
        let err = finite_diff_check(&[x], GradCheckOptions::default(), |g, v| {
            let e = g.activation(v[0], super::super::Activation::Gelu);
            let big = g.mul(e, e)?;
            let huge = g.mul(big, big)?;
            let h2 = g.mul(huge, huge)?;
            let h3 = g.mul(h2, h2)?;
            let h4 = g.mul(h3, h3)?;
            let h5 = g.mul(h4, h4)?;
            let h6 = g.mul(h5, h5)?;
            Ok(g.sum(h6))
        })
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { ref op } if op == "mul"));
    }
}
