use super::scalar::Scalar;
use super::store::ParamStore;
use super::tape::Gradients;
use super::tensor::Tensor;
use super::NumericsError;

/// Adam optimizer bound to one [`ParamStore`].
pub struct Adam<S> {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(store: &ParamStore<S>, lr: f64) -> Self {
        let m = store.keys().map(|k| Tensor::zeros(store.get(k).shape().to_vec())).collect();
        let v = store.keys().map(|k| Tensor::zeros(store.get(k).shape().to_vec())).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m, v }
    }

    /// One update step. Every parameter in the store must have a gradient;
    /// a missing entry means the loss graph silently dropped a parameter,
    /// which is a bug worth failing loudly on.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &Gradients<S>) -> Result<(), NumericsError> {
        assert_eq!(self.m.len(), store.len(), "store grew after optimizer construction");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (S::from_f64(self.beta1), S::from_f64(self.beta2));
        let (nb1, nb2) = (S::from_f64(1.0 - self.beta1), S::from_f64(1.0 - self.beta2));
        let eps = S::from_f64(self.eps);
        let step = S::from_f64(self.lr);
        let (ibc1, ibc2) = (S::from_f64(1.0 / bc1), S::from_f64(1.0 / bc2));

        for key in store.keys().collect::<Vec<_>>() {
            let g = grads.get(key).ok_or_else(|| NumericsError::MissingGradient {
                name: store.name(key).to_string(),
            })?;
            if !g.all_finite() {
                return Err(NumericsError::NonFiniteGradient { name: store.name(key).to_string() });
            }
            let i = key.index as usize;
            let p = store.get_mut(key);
            assert_eq!(g.shape(), p.shape());
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for ((p, &g), (m, v)) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut().zip(v.iter_mut()))
            {
                *m = b1 * *m + nb1 * g;
                *v = b2 * *v + nb2 * g * g;
                let mhat = *m * ibc1;
                let vhat = *v * ibc2;
                *p = *p - step * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
