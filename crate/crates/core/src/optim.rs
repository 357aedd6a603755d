//! Adam with bias correction and optional L2 weight decay.

use crate::scalar::Scalar;
use crate::substrate::{ParamStore, Tensor};

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients currently held in `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        if self.m.is_empty() {
            for (_, value, _) in store.iter() {
                self.m.push(Tensor::zeros(value.shape()));
                self.v.push(Tensor::zeros(value.shape()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let wd = self.weight_decay;
        for ((value, grad), (m, v)) in store
            .iter_mut()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let it = value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((w, &g), (mi, vi)) in it {
                let g = g.as_f64() + wd * w.as_f64();
                let mn = b1 * mi.as_f64() + (1.0 - b1) * g;
                let vn = b2 * vi.as_f64() + (1.0 - b2) * g * g;
                *mi = T::lit(mn);
                *vi = T::lit(vn);
                let update = self.lr * (mn / c1) / ((vn / c2).sqrt() + self.eps);
                *w = T::lit(w.as_f64() - update);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_f64(&[1], &[w]).unwrap());
        s
    }

    fn set_grad(s: &mut ParamStore<f64>, g: f64) {
        s.grad_mut("w").unwrap().data_mut()[0] = g;
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // eps/|g| must stay below the 1e-6 band
        for g in [0.05, -0.5, 40.0] {
            let mut s = single(1.0);
            set_grad(&mut s, g);
            let mut opt = Adam::new(1e-3, 0.0);
            opt.step(&mut s);
            let delta = (s.get("w").unwrap().data()[0] - 1.0).abs();
            assert!(delta <= 1e-3 && delta >= 1e-3 * (1.0 - 1e-6), "{delta}");
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = single(2.5);
        let mut opt = Adam::new(0.1, 0.0);
        for _ in 0..10 {
            opt.step(&mut s);
        }
        assert_eq!(s.get("w").unwrap().data()[0], 2.5);
    }

    #[test]
    fn quadratic_converges_like_scalar_recurrence() {
        let mut s = single(0.0);
        let mut opt = Adam::new(0.1, 0.0);
        let (mut w, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            let g = 2.0 * (s.get("w").unwrap().data()[0] - 3.0);
            set_grad(&mut s, g);
            opt.step(&mut s);

            let g = 2.0 * (w - 3.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        let got = s.get("w").unwrap().data()[0];
        assert!((got - 3.0).abs() < 0.1, "{got}");
        assert!((got - w).abs() < 1e-12);
    }
}
