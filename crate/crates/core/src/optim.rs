//! First-order optimizers over a [`ParamStore`].

use alloc::vec::Vec;

use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros: Vec<Tensor<T>> = store
            .named()
            .map(|(_, v)| Tensor::zeros(v.shape()))
            .collect();
        Self {
            lr,
            beta1,
            beta2,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. Parameters without a gradient keep their value and moments.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) {
        self.t += 1;
        let t = self.t as f64;
        let c1 = 1.0 - libm::pow(self.beta1, t);
        let c2 = 1.0 - libm::pow(self.beta2, t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (ib1, ib2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let step = T::of(self.lr / c1);
        let rc2 = T::of(1.0 / c2);
        let eps = T::of(ADAM_EPS);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let p = store.value_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m).zip(v).zip(g.data()) {
                *m = b1 * *m + ib1 * g;
                *v = b2 * *v + ib2 * g * g;
                *p -= step * *m / ((*v * rc2).sqrt() + eps);
            }
        }
    }
}

/// SGD with classical momentum: `u = mu * u + g; p -= lr * u`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: store
                .named()
                .map(|(_, v)| Tensor::zeros(v.shape()))
                .collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) {
        let (lr, mu) = (T::of(self.lr), T::of(self.momentum));
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let p = store.value_mut(id).data_mut();
            for ((p, u), &g) in p.iter_mut().zip(self.velocity[i].data_mut()).zip(g.data()) {
                *u = mu * *u + g;
                *p -= lr * *u;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = ParamStore::<f64>::new();
        s.add("w", Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap());
        let mut opt = Adam::new(&s, 0.1, 0.5, 0.999);
        let g = Tensor::from_vec(&[2], vec![3.0, -0.2]).unwrap();
        opt.step(&mut s, &[Some(g)]);
        // bias-corrected first step is lr * sign(g)
        let w = s.value(crate::params::ParamId(0)).data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", Tensor::from_vec(&[1], vec![5.0]).unwrap());
        let mut opt = Adam::new(&s, 0.05, 0.9, 0.999);
        for _ in 0..2000 {
            let w = s.value(id).data()[0];
            opt.step(&mut s, &[Some(Tensor::scalar(2.0 * (w - 1.0)))]);
        }
        assert!((s.value(id).data()[0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", Tensor::scalar(0.0));
        let mut opt = Sgd::new(&s, 0.1, 0.9);
        opt.step(&mut s, &[Some(Tensor::scalar(1.0))]);
        opt.step(&mut s, &[Some(Tensor::scalar(1.0))]);
        assert!((s.value(id).data()[0] + 0.29).abs() < 1e-12);
    }
}
