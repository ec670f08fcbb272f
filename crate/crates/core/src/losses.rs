//! Training objective: mean absolute error plus a weight-decorrelation term.

use crate::autodiff::{ortho_terms, Graph, OrthoMode, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub ortho_mode: OrthoMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.001,
            ortho_mode: OrthoMode::Signed,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Mean of `|ŷ − y|` over every element.
pub fn l1_data_loss<T: Element>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(Error::shapes("l1_data_loss", g.shape(pred), g.shape(target)));
    }
    let d = g.sub(pred, target)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// Weight matrices with one row per output unit.
///
/// Linear weights are stored `[in, out]`, so each is transposed first.
pub fn weight_rows<T: Element>(g: &mut Graph<T>, bound: &Bound, ids: &[ParamId]) -> Result<Vec<Var>> {
    ids.iter().map(|&id| g.transpose2d(bound.var(id))).collect()
}

/// Mean over matrices of the mean off-diagonal row covariance.
pub fn orthogonality_loss<T: Element>(g: &mut Graph<T>, mats: &[Var], mode: OrthoMode) -> Result<Var> {
    g.orthogonality(mats, mode)
}

/// `l1 + λ·O`; with `λ = 0` the regularizer is not built at all.
pub fn total_loss<T: Element>(
    g: &mut Graph<T>,
    data_loss: Var,
    mats: &[Var],
    cfg: &LossConfig,
) -> Result<Var> {
    if cfg.lambda == 0.0 {
        return Ok(data_loss);
    }
    let o = orthogonality_loss(g, mats, cfg.ortho_mode)?;
    let weighted = g.affine(o, cfg.lambda, 0.0);
    g.add(data_loss, weighted)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceReport {
    /// `(parameter name, O_k)` for every matrix with at least two rows.
    pub per_layer: Vec<(String, f64)>,
    pub aggregate: f64,
    pub layers: usize,
}

impl CovarianceReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,off_diagonal_mean\n");
        for (name, o) in &self.per_layer {
            out.push_str(&format!("{name},{o}\n"));
        }
        out.push_str(&format!("mean,{}\n", self.aggregate));
        out
    }
}

pub fn covariance_report<T: Element>(
    store: &ParamStore<T>,
    ids: &[ParamId],
    mode: OrthoMode,
) -> CovarianceReport {
    let mut per_layer = Vec::new();
    for &id in ids {
        let w = store.get(id);
        let rows: Tensor<f64> = match w.shape() {
            &[r, c] => Tensor::from_fn(&[c, r], |i| w.data()[(i % r) * c + i / r].f64()),
            _ => continue,
        };
        if let Some((_, o)) = ortho_terms(&rows, mode) {
            per_layer.push((store.name(id).to_string(), o));
        }
    }
    let layers = per_layer.len();
    let aggregate = if layers == 0 {
        0.0
    } else {
        per_layer.iter().map(|(_, o)| o).sum::<f64>() / layers as f64
    };
    CovarianceReport {
        per_layer,
        aggregate,
        layers,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ortho(rows: usize, cols: usize, data: &[f64], mode: OrthoMode) -> f64 {
        let mut g = Graph::new();
        let m = g.constant(Tensor::from_f64(&[rows, cols], data).unwrap());
        let o = orthogonality_loss(&mut g, &[m], mode).unwrap();
        g.value(o).data()[0]
    }

    #[test]
    fn hand_covariances() {
        assert!((ortho(2, 2, &[1.0, 0.0, 0.0, 1.0], OrthoMode::Signed) + 0.5).abs() < 1e-15);
        assert_eq!(ortho(2, 2, &[1.0, 1.0, 1.0, 1.0], OrthoMode::Signed), 0.0);
        // Off-diagonals are 2 each; two of them over A(A−1) = 2.
        assert_eq!(ortho(2, 2, &[1.0, -1.0, 1.0, -1.0], OrthoMode::Signed), 2.0);
        assert_eq!(ortho(2, 2, &[1.0, 0.0, 0.0, 1.0], OrthoMode::Absolute), 0.5);
    }

    #[test]
    fn l1_cases() {
        let mut g = Graph::new();
        let y = g.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
        let same = l1_data_loss(&mut g, y, y).unwrap();
        assert_eq!(g.value(same).data()[0], 0.0);
        let shifted = g.affine(y, 1.0, 1.0);
        let one = l1_data_loss(&mut g, shifted, y).unwrap();
        assert_eq!(g.value(one).data()[0], 1.0);
        let bad = g.constant(Tensor::zeros(&[3, 2]));
        assert!(l1_data_loss(&mut g, bad, y).is_err());
    }

    #[test]
    fn zero_lambda_is_data_loss() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_fn(&[4], |i| i as f64));
        let b = g.constant(Tensor::zeros(&[4]));
        let w = g.constant(Tensor::from_fn(&[3, 3], |i| (i as f64).sin()));
        let l1 = l1_data_loss(&mut g, a, b).unwrap();
        let cfg = LossConfig {
            lambda: 0.0,
            ..LossConfig::default()
        };
        let t = total_loss(&mut g, l1, &[w], &cfg).unwrap();
        assert_eq!(t, l1);
    }

    #[test]
    fn report_matches_graph_value() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.9).cos()));
        let b = store.add("b", Tensor::from_fn(&[4, 1], |i| i as f64));
        let report = covariance_report(&store, &[a, b], OrthoMode::Signed);
        // `b` transposes to a single row and is skipped.
        assert_eq!(report.layers, 1);
        let mut g = Graph::new();
        let bound = store.bind(&mut g, false);
        let mats = weight_rows(&mut g, &bound, &[a]).unwrap();
        let o = orthogonality_loss(&mut g, &mats, OrthoMode::Signed).unwrap();
        assert!((g.value(o).data()[0] - report.aggregate).abs() < 1e-15);
        assert!(report.to_csv().starts_with("layer,off_diagonal_mean\n"));
    }
}
