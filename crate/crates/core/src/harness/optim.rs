use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor};

/// `floor + ½(base − floor)(1 + cos(π·iter/total))`.
pub fn cosine_lr(iter: usize, total: usize, base: f64, floor: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Config("cosine schedule needs total > 0".into()));
    }
    if iter > total {
        return Err(Error::Config(format!(
            "iteration {iter} is past the end of a {total}-iteration schedule"
        )));
    }
    let phase = std::f64::consts::PI * iter as f64 / total as f64;
    Ok(floor + 0.5 * (base - floor) * (1.0 + phase.cos()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    /// Number of updates applied so far.
    pub steps: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = || -> Vec<Tensor<T>> {
            store
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.shape()))
                .collect()
        };
        Adam {
            config,
            steps: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update; `grads[i]` pairs with the i-th stored parameter
    /// (`None` means a zero gradient).
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::dim("adam", "parameters", store.len(), grads.len()));
        }
        self.steps += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.steps as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let (b1, b2, e) = (T::of(beta1), T::of(beta2), T::of(eps));
        let (one_b1, one_b2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
        let step = T::of(lr / c1);
        let inv_c2 = T::of(1.0 / c2);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            let zeros;
            let g = match &grads[i] {
                Some(g) if g.shape() != p.shape() => {
                    return Err(Error::shapes("adam", p.shape(), g.shape()))
                }
                Some(g) => g.data(),
                None => {
                    zeros = vec![T::zero(); p.numel()];
                    &zeros
                }
            };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, &gv), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                *mi = b1 * *mi + one_b1 * gv;
                *vi = b2 * *vi + one_b2 * gv * gv;
                *w = *w - step * *mi / ((*vi * inv_c2).sqrt() + e);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_identities() {
        assert!((cosine_lr(0, 100, 4e-4, 1e-6).unwrap() - 4e-4).abs() < 1e-12);
        assert!((cosine_lr(100, 100, 4e-4, 1e-6).unwrap() - 1e-6).abs() < 1e-12);
        assert!((cosine_lr(50, 100, 4e-4, 0.0).unwrap() - 2e-4).abs() < 1e-12);
        assert!(cosine_lr(0, 0, 1.0, 0.0).is_err());
        let lrs: Vec<f64> = (0..=100).map(|i| cosine_lr(i, 100, 1.0, 0.1).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first update is lr·g/(|g| + eps) ≈ lr·sign(g).
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::from_f64(&[2], &[1.0, -1.0]).unwrap());
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let g = Tensor::from_f64(&[2], &[0.5, -3.0]).unwrap();
        adam.step(&mut store, &[Some(g)], 0.01).unwrap();
        let w = store.get(store.find("w").unwrap()).data();
        assert!((w[0] - 0.99).abs() < 1e-9 && (w[1] + 0.99).abs() < 1e-9, "{w:?}");
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_f64(&[3], &[3.0, -2.0, 0.5]).unwrap());
        let mut adam = Adam::new(AdamConfig::default(), &store);
        for _ in 0..2000 {
            let g = store.get(id).map(|w| 2.0 * w);
            adam.step(&mut store, &[Some(g)], 0.05).unwrap();
        }
        assert!(store.get(id).max_abs() < 1e-3);
    }
}
