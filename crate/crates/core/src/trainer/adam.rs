use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam over every tensor of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        Self {
            beta1: BETA1,
            beta2: BETA2,
            eps: ADAM_EPS,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update with learning rate `lr`; `grads` follow the store order.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() || store.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters and {} moment slots",
                grads.len(),
                store.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let (b1, b2): (T, T) = (lit(self.beta1), lit(self.beta2));
        let c1 = lit::<T>(1.0 - self.beta1.powi(self.step as i32));
        let c2 = lit::<T>(1.0 - self.beta2.powi(self.step as i32));
        let (lr, eps): (T, T) = (lit(lr), lit(self.eps));
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let g = &grads[i];
            let p = store.value_mut(id);
            if g.shape() != p.shape() {
                return Err(Error::shape("adam", p.shape(), g.shape()));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
