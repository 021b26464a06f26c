//! Parameterised layers built on [`Graph`] and [`ParamStore`].

use alloc::format;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::rng::{uniform_tensor, Rng};
use crate::tensor::Tensor;

/// Largest of 4, 2, 1 groups dividing `c`.
pub fn norm_groups(c: usize) -> usize {
    [4, 2, 1]
        .into_iter()
        .find(|g| c.is_multiple_of(*g))
        .unwrap_or(1)
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// Uniform init with variance `1 / fan_in`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let bound = libm::sqrt(3.0 / (c_in * k * k) as f64);
        let weight = store.add(
            format!("{name}.weight"),
            uniform_tensor(rng, &[c_out, c_in, k, k], bound),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }

    pub fn out_channels<T: Real>(&self, store: &ParamStore<T>) -> usize {
        store.value(self.weight).shape()[0]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl Norm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[c])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c])),
            groups: norm_groups(c),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.group_norm(x, gamma, beta, self.groups)
    }
}

/// conv -> group norm -> SiLU.
#[derive(Clone, Copy, Debug)]
pub struct ConvBlock {
    pub conv: Conv,
    pub norm: Norm,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Self {
            conv: Conv::new(
                store,
                rng,
                &format!("{name}.conv"),
                c_in,
                c_out,
                k,
                stride,
                pad,
            ),
            norm: Norm::new(store, &format!("{name}.norm"), c_out),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.conv.forward(g, store, x)?;
        let h = self.norm.forward(g, store, h)?;
        Ok(g.silu(h))
    }
}

/// Affine map over the last axis. `weight`: `[out, in]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        let bound = libm::sqrt(3.0 / c_in as f64);
        Self {
            weight: store.add(
                format!("{name}.weight"),
                uniform_tensor(rng, &[c_out, c_in], bound),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, Some(b))
    }
}

/// Sets every parameter whose name starts with `prefix` to zero.
pub fn zero_params<T: Real>(store: &mut ParamStore<T>, prefix: &str) {
    let ids: alloc::vec::Vec<_> = store
        .ids()
        .filter(|&id| store.name(id).starts_with(prefix))
        .collect();
    for id in ids {
        store.value_mut(id).data_mut().fill(T::zero());
    }
}
