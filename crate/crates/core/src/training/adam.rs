use diffcore::{Real, Tensor};

/// Adam with bias-corrected moments, one moment pair per target tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Real> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub step: u64,
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    /// `β1 = 0.9`, `β2 = 0.999`, `ε = 1e-8`, zero moments shaped like `targets`.
    pub fn new<'a>(lr: f64, targets: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let (first, second) = targets.into_iter().map(|t| (vec![T::zero(); t.len()], vec![T::zero(); t.len()])).unzip();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first, second }
    }

    /// One update of every target from its gradient.
    pub fn update(&mut self, targets: &mut [Tensor<T>], grads: &[&Tensor<T>]) {
        assert_eq!(targets.len(), self.first.len(), "Adam target count");
        assert_eq!(grads.len(), self.first.len(), "Adam gradient count");
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::c(self.beta1), T::c(self.beta2));
        let (c1, c2) = (T::c(1.0 - self.beta1.powi(t)), T::c(1.0 - self.beta2.powi(t)));
        let (lr, eps) = (T::c(self.lr), T::c(self.eps));
        for (k, target) in targets.iter_mut().enumerate() {
            let g = grads[k].data();
            assert_eq!(g.len(), target.len(), "Adam gradient shape");
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for (idx, x) in target.data_mut().iter_mut().enumerate() {
                m[idx] = b1 * m[idx] + (T::one() - b1) * g[idx];
                v[idx] = b2 * v[idx] + (T::one() - b2) * g[idx] * g[idx];
                let m_hat = m[idx] / c1;
                let v_hat = v[idx] / c2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
