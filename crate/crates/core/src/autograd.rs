//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied during a forward pass;
//! [`Graph::backward`] replays the tape in reverse. Parameters are bound
//! from a [`ParamStore`] and their gradients are gathered per store after
//! the backward pass.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Tanh(Var),
    Sigmoid(Var),
    Silu(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Upsample2x(Var),
    MaxPool2(Var, Vec<usize>),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    ConcatChannels(Var, Var),
    Reshape(Var),
    Bap {
        maps: Var,
        feats: Var,
    },
    SignedSqrt(Var, T),
    L2NormalizeLast {
        x: Var,
        norms: Vec<T>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    RowMax(Var, Vec<usize>),
    MeanSpatial(Var),
    RowL2Norm(Var),
    Mean(Var),
    Sum(Var),
    NegLogSigmoid(Var, T),
    NegLog1mSigmoid(Var, T),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bound: BTreeMap<(u64, usize), Var>,
    frozen: Vec<u64>,
    params: Vec<(u64, ParamId, Var)>,
}

fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Real>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: BTreeMap::new(),
            frozen: Vec::new(),
            params: Vec::new(),
        }
    }

    /// Parameters of `store` bound after this call are treated as constants.
    pub fn freeze(&mut self, store: &ParamStore<T>) {
        self.frozen.push(store.uid());
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient is retained after [`Graph::backward`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Copies a value into a new constant node, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Binds a parameter; repeated binds of the same parameter share a node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        store.record_access(id);
        let key = (store.uid(), id.index());
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let trainable = !self.frozen.contains(&store.uid());
        let v = self.push(store.value(id).clone(), Op::Param, trainable);
        self.bound.insert(key, v);
        if trainable {
            self.params.push((store.uid(), id, v));
        }
        v
    }

    fn same_shape(&self, a: Var, b: Var, ctx: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(ctx, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(T::exp);
        let rg = self.rg(&[a]);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(T::tanh);
        let rg = self.rg(&[a]);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(&[a]);
        self.push(v, Op::Silu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(T::zero()));
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let v = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { x * slope });
        let rg = self.rg(&[a]);
        self.push(v, Op::LeakyRelu(a, slope), rg)
    }

    /// 2-D convolution. `x`: `[n, c, h, w]`, `w`: `[o, c, k, k]`, `b`: `[o]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (o, wc, k, k2) = self.value(w).dims4()?;
        if wc != c || k != k2 {
            return Err(Error::shape("conv2d weight", &[o, c, k, k], self.shape(w)));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::shape("conv2d bias", &[o], self.shape(b)));
            }
        }
        let geom = ConvGeom {
            c_in: c,
            h,
            w: wd,
            k,
            stride,
            pad,
        };
        if !geom.valid() {
            return Err(Error::shape(
                "conv2d input smaller than kernel",
                &[n, c, k, k],
                self.shape(x),
            ));
        }
        let (ho, wo) = geom.out_hw();
        let out = kernels::conv2d_forward(
            &geom,
            n,
            o,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::from_vec(&[n, o, ho, wo], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, rg))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let out = kernels::upsample2x(self.value(x).data(), n * c, h, w);
        let value = Tensor::from_vec(&[n, c, 2 * h, 2 * w], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Upsample2x(x), rg))
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h < 2 || w < 2 {
            return Err(Error::shape("maxpool2 input", &[n, c, 2, 2], self.shape(x)));
        }
        let (out, idx) = kernels::maxpool2(self.value(x).data(), n * c, h, w);
        let value = Tensor::from_vec(&[n, c, h / 2, w / 2], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MaxPool2(x, idx), rg))
    }

    /// Per-sample group normalisation with channel-wise affine parameters.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape("group_norm groups", &[groups], &[c]));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("group_norm affine", &[c], self.shape(gamma)));
        }
        let plane = h * w;
        let (xhat, rstd) =
            kernels::group_norm_stats(self.value(x).data(), n, c, plane, groups, T::of(1e-5));
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![T::zero(); xhat.len()];
        for (i, (o, &xh)) in out.iter_mut().zip(&xhat).enumerate() {
            let ch = (i / plane) % c;
            *o = xh * g[ch] + bt[ch];
        }
        let value = Tensor::from_vec(&[n, c, h, w], out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, c1, h, w) = self.value(a).dims4()?;
        let (n2, c2, h2, w2) = self.value(b).dims4()?;
        if (n, h, w) != (n2, h2, w2) {
            return Err(Error::shape(
                "concat_channels",
                self.shape(a),
                self.shape(b),
            ));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * (c1 + c2) * plane);
        for i in 0..n {
            out.extend_from_slice(&self.value(a).data()[i * c1 * plane..(i + 1) * c1 * plane]);
            out.extend_from_slice(&self.value(b).data()[i * c2 * plane..(i + 1) * c2 * plane]);
        }
        let value = Tensor::from_vec(&[n, c1 + c2, h, w], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::ConcatChannels(a, b), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Bilinear attention pooling: `maps [n, m, h, w]`, `feats [n, c, h, w]`
    /// to `[n, m, c]`, entry `(n, m, c)` = spatial mean of `maps[n,m] * feats[n,c]`.
    pub fn bap(&mut self, maps: Var, feats: Var) -> Result<Var> {
        let (n, m, h, w) = self.value(maps).dims4()?;
        let (n2, c, h2, w2) = self.value(feats).dims4()?;
        if (n, h, w) != (n2, h2, w2) {
            return Err(Error::shape(
                "bilinear pooling",
                self.shape(maps),
                self.shape(feats),
            ));
        }
        let p = h * w;
        let scale = T::one() / T::of(p as f64);
        let mut out = vec![T::zero(); n * m * c];
        let a = self.value(maps).data();
        let f = self.value(feats).data();
        for i in 0..n {
            T::gemm(
                m,
                p,
                c,
                scale,
                &a[i * m * p..(i + 1) * m * p],
                p,
                1,
                &f[i * c * p..(i + 1) * c * p],
                1,
                p,
                T::zero(),
                &mut out[i * m * c..(i + 1) * m * c],
                c,
                1,
            );
        }
        let value = Tensor::from_vec(&[n, m, c], out)?;
        let rg = self.rg(&[maps, feats]);
        Ok(self.push(value, Op::Bap { maps, feats }, rg))
    }

    /// `sign(x) * (sqrt(|x| + eps) - sqrt(eps))`: continuous with a finite
    /// slope at zero.
    pub fn signed_sqrt(&mut self, a: Var, eps: T) -> Var {
        let s0 = eps.sqrt();
        let v = self.value(a).map(|x| {
            let r = (x.abs() + eps).sqrt() - s0;
            if x < T::zero() {
                -r
            } else {
                r
            }
        });
        let rg = self.rg(&[a]);
        self.push(v, Op::SignedSqrt(a, eps), rg)
    }

    /// Scales every slice along the last axis to unit L2 norm. Zero slices stay zero.
    pub fn l2_normalize_last(&mut self, a: Var) -> Result<Var> {
        let len = *self
            .shape(a)
            .last()
            .ok_or_else(|| Error::shape("l2 normalize", &[1], &[]))?;
        let x = self.value(a).data();
        let mut norms = Vec::with_capacity(x.len() / len.max(1));
        let mut out = vec![T::zero(); x.len()];
        for (row, o) in x.chunks(len).zip(out.chunks_mut(len)) {
            let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let d = nrm.max(T::of(1e-12));
            for (oo, &v) in o.iter_mut().zip(row) {
                *oo = v / d;
            }
            norms.push(nrm);
        }
        let value = Tensor::from_vec(self.shape(a), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::L2NormalizeLast { x: a, norms }, rg))
    }

    /// Affine map on the last axis: `x [.., k]`, `w [o, k]`, `b [o]` to `[.., o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let k = *xs
            .last()
            .ok_or_else(|| Error::shape("linear input", &[1], &[]))?;
        let ws = self.shape(w);
        if ws.len() != 2 || ws[1] != k {
            return Err(Error::shape("linear weight", &[0, k], ws));
        }
        let o = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::shape("linear bias", &[o], self.shape(b)));
            }
        }
        let rows = self.value(x).numel() / k;
        let mut out = vec![T::zero(); rows * o];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for r in out.chunks_mut(o) {
                r.copy_from_slice(bv);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(
            rows,
            k,
            o,
            T::one(),
            self.value(x).data(),
            k,
            1,
            self.value(w).data(),
            1,
            k,
            beta,
            &mut out,
            o,
            1,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = o;
        let value = Tensor::from_vec(&shape, out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    /// Maximum over every non-batch element: `[n, ..]` to `[n]`.
    /// Returns the node and the flat per-row argmax.
    pub fn row_max(&mut self, a: Var) -> (Var, Vec<usize>) {
        let t = self.value(a);
        let n = t.batch();
        let mut vals = Vec::with_capacity(n);
        let mut idx = Vec::with_capacity(n);
        for i in 0..n {
            let row = t.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            vals.push(row[best]);
            idx.push(best);
        }
        let value = Tensor::from_vec(&[n], vals).unwrap();
        let rg = self.rg(&[a]);
        let v = self.push(value, Op::RowMax(a, idx.clone()), rg);
        (v, idx)
    }

    /// Global average pooling `[n, c, h, w]` to `[n, c]`.
    pub fn mean_spatial(&mut self, a: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(a).dims4()?;
        let p = T::of((h * w) as f64);
        let out: Vec<T> = self
            .value(a)
            .data()
            .chunks(h * w)
            .map(|pl| pl.iter().copied().sum::<T>() / p)
            .collect();
        let value = Tensor::from_vec(&[n, c], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::MeanSpatial(a), rg))
    }

    /// Per-row Euclidean norm: `[n, ..]` to `[n]`.
    pub fn row_l2_norm(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.batch();
        let out: Vec<T> = (0..n)
            .map(|i| t.row(i).iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let value = Tensor::from_vec(&[n], out).unwrap();
        let rg = self.rg(&[a]);
        self.push(value, Op::RowL2Norm(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = t.sum() / T::of(t.numel() as f64);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(v), Op::Mean(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(v), Op::Sum(a), rg)
    }

    /// `-ln(sigmoid(logit))`, saturating at `cap`.
    pub fn neg_log_sigmoid(&mut self, a: Var, cap: T) -> Var {
        let v = self.value(a).map(|l| softplus(-l).min(cap));
        let rg = self.rg(&[a]);
        self.push(v, Op::NegLogSigmoid(a, cap), rg)
    }

    /// `-ln(1 - sigmoid(logit))`, saturating at `cap`.
    pub fn neg_log_1m_sigmoid(&mut self, a: Var, cap: T) -> Var {
        let v = self.value(a).map(|l| softplus(l).min(cap));
        let rg = self.rg(&[a]);
        self.push(v, Op::NegLog1mSigmoid(a, cap), rg)
    }

    /// Per-row cross entropy of `logits [n, k]` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::shape("cross entropy", &[targets.len(), 0], s));
        }
        let k = s[1];
        let mut probs = Vec::with_capacity(targets.len() * k);
        let mut losses = Vec::with_capacity(targets.len());
        for (row, &t) in self.value(logits).data().chunks(k).zip(targets) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            for &v in row {
                probs.push((v - mx).exp() / z);
            }
            losses.push(z.ln() + mx - row[t]);
        }
        let value = Tensor::from_vec(&[targets.len()], losses)?;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward seed", &[1], self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Param) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Gives a writable zeroed gradient slot for `v`, or `None` if `v` needs no gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> Option<&'g mut Tensor<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let shape = self.shape(v);
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)))
    }

    fn take_slot(&self, grads: &mut [Option<Tensor<T>>], v: Var) -> Option<Tensor<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        Some(
            grads[v.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.shape(v))),
        )
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.accum(grads, *a, g.zip_map(bv, |x, y| x * y).unwrap());
                }
                if self.requires_grad(*b) {
                    self.accum(grads, *b, g.zip_map(av, |x, y| x * y).unwrap());
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accum(grads, *a, g.map(|v| v * s));
            }
            Op::AddScalar(a) => self.accum(grads, *a, g.clone()),
            Op::Exp(a) => self.accum(grads, *a, g.zip_map(out, |d, y| d * y).unwrap()),
            Op::Tanh(a) => self.accum(
                grads,
                *a,
                g.zip_map(out, |d, y| d * (T::one() - y * y)).unwrap(),
            ),
            Op::Sigmoid(a) => self.accum(
                grads,
                *a,
                g.zip_map(out, |d, y| d * y * (T::one() - y)).unwrap(),
            ),
            Op::Silu(a) => {
                let d = g
                    .zip_map(self.value(*a), |d, x| {
                        let s = sigmoid(x);
                        d * s * (T::one() + x * (T::one() - s))
                    })
                    .unwrap();
                self.accum(grads, *a, d)
            }
            Op::Relu(a) => self.accum(
                grads,
                *a,
                g.zip_map(
                    self.value(*a),
                    |d, x| if x > T::zero() { d } else { T::zero() },
                )
                .unwrap(),
            ),
            Op::LeakyRelu(a, s) => {
                let s = *s;
                self.accum(
                    grads,
                    *a,
                    g.zip_map(self.value(*a), |d, x| if x > T::zero() { d } else { d * s })
                        .unwrap(),
                )
            }
            Op::Conv2d { x, w, b, geom } => {
                let (n, o) = (out.shape()[0], out.shape()[1]);
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut dx = self.take_slot(grads, *x);
                let mut dw = self.take_slot(grads, *w);
                let mut db = b.and_then(|b| self.take_slot(grads, b));
                kernels::conv2d_backward(
                    geom,
                    n,
                    o,
                    xv,
                    wv,
                    g.data(),
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                if let Some(t) = dx {
                    grads[x.0] = Some(t);
                }
                if let Some(t) = dw {
                    grads[w.0] = Some(t);
                }
                if let (Some(b), Some(t)) = (b, db) {
                    grads[b.0] = Some(t);
                }
            }
            Op::Upsample2x(a) => {
                let (n, c, h, w) = self.value(*a).dims4().unwrap();
                if let Some(dx) = self.slot(grads, *a) {
                    kernels::upsample2x_backward(g.data(), n * c, h, w, dx.data_mut());
                }
            }
            Op::MaxPool2(a, idx) => {
                if let Some(dx) = self.slot(grads, *a) {
                    let d = dx.data_mut();
                    for (&j, &gv) in idx.iter().zip(g.data()) {
                        d[j] += gv;
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let (_, c, h, w) = out.dims4().unwrap();
                let plane = h * w;
                let gam = self.value(*gamma).data();
                if let Some(dgam) = self.slot(grads, *gamma) {
                    let d = dgam.data_mut();
                    for (j, (&gv, &xh)) in g.data().iter().zip(xhat).enumerate() {
                        d[(j / plane) % c] += gv * xh;
                    }
                }
                if let Some(dbeta) = self.slot(grads, *beta) {
                    let d = dbeta.data_mut();
                    for (j, &gv) in g.data().iter().enumerate() {
                        d[(j / plane) % c] += gv;
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let per = (c / groups) * plane;
                    let cnt = T::of(per as f64);
                    let dxd = dx.data_mut();
                    for (blk, &r) in rstd.iter().enumerate() {
                        let base = blk * per;
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in base..base + per {
                            let dxh = g.data()[j] * gam[(j / plane) % c];
                            m1 += dxh;
                            m2 += dxh * xhat[j];
                        }
                        m1 /= cnt;
                        m2 /= cnt;
                        for j in base..base + per {
                            let dxh = g.data()[j] * gam[(j / plane) % c];
                            dxd[j] += r * (dxh - m1 - xhat[j] * m2);
                        }
                    }
                }
            }
            Op::ConcatChannels(a, b) => {
                let (n, c1, h, w) = self.value(*a).dims4().unwrap();
                let c2 = self.shape(*b)[1];
                let plane = h * w;
                if let Some(da) = self.slot(grads, *a) {
                    let d = da.data_mut();
                    for i in 0..n {
                        let src = &g.data()[i * (c1 + c2) * plane..][..c1 * plane];
                        for (x, &y) in d[i * c1 * plane..(i + 1) * c1 * plane].iter_mut().zip(src) {
                            *x += y;
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    let d = db.data_mut();
                    for i in 0..n {
                        let src = &g.data()[(i * (c1 + c2) + c1) * plane..][..c2 * plane];
                        for (x, &y) in d[i * c2 * plane..(i + 1) * c2 * plane].iter_mut().zip(src) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                let t = g.clone().reshape(self.shape(*a)).unwrap();
                self.accum(grads, *a, t);
            }
            Op::Bap { maps, feats } => {
                let (n, m, h, w) = self.value(*maps).dims4().unwrap();
                let c = self.shape(*feats)[1];
                let p = h * w;
                let scale = T::one() / T::of(p as f64);
                let av = self.value(*maps).data();
                let fv = self.value(*feats).data();
                let gd = g.data();
                if let Some(da) = self.slot(grads, *maps) {
                    let d = da.data_mut();
                    for i in 0..n {
                        // dA[m, p] += scale * dOut[m, c] * F[c, p]
                        T::gemm(
                            m,
                            c,
                            p,
                            scale,
                            &gd[i * m * c..(i + 1) * m * c],
                            c,
                            1,
                            &fv[i * c * p..(i + 1) * c * p],
                            p,
                            1,
                            T::one(),
                            &mut d[i * m * p..(i + 1) * m * p],
                            p,
                            1,
                        );
                    }
                }
                if let Some(df) = self.slot(grads, *feats) {
                    let d = df.data_mut();
                    for i in 0..n {
                        // dF[c, p] += scale * dOut^T[c, m] * A[m, p]
                        T::gemm(
                            c,
                            m,
                            p,
                            scale,
                            &gd[i * m * c..(i + 1) * m * c],
                            1,
                            c,
                            &av[i * m * p..(i + 1) * m * p],
                            p,
                            1,
                            T::one(),
                            &mut d[i * c * p..(i + 1) * c * p],
                            p,
                            1,
                        );
                    }
                }
            }
            Op::SignedSqrt(a, eps) => {
                let eps = *eps;
                let d = g
                    .zip_map(self.value(*a), |d, x| {
                        d * T::of(0.5) / (x.abs() + eps).sqrt()
                    })
                    .unwrap();
                self.accum(grads, *a, d);
            }
            Op::L2NormalizeLast { x, norms } => {
                let len = *out.shape().last().unwrap();
                if let Some(dx) = self.slot(grads, *x) {
                    let tiny = T::of(1e-12);
                    for (((drow, grow), yrow), &nrm) in dx
                        .data_mut()
                        .chunks_mut(len)
                        .zip(g.data().chunks(len))
                        .zip(out.data().chunks(len))
                        .zip(norms)
                    {
                        if nrm > tiny {
                            let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                            for ((d, &gv), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                                *d += (gv - y * dot) / nrm;
                            }
                        } else {
                            for (d, &gv) in drow.iter_mut().zip(grow) {
                                *d += gv / tiny;
                            }
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let k = *self.shape(*x).last().unwrap();
                let o = self.shape(*w)[0];
                let rows = self.value(*x).numel() / k;
                if let Some(b) = b {
                    if let Some(db) = self.slot(grads, *b) {
                        let d = db.data_mut();
                        for row in g.data().chunks(o) {
                            for (dd, &gv) in d.iter_mut().zip(row) {
                                *dd += gv;
                            }
                        }
                    }
                }
                let wv = self.value(*w).data();
                let xv = self.value(*x).data();
                if let Some(dw) = self.slot(grads, *w) {
                    // dW[o, k] += dY^T[o, rows] * X[rows, k]
                    T::gemm(
                        o,
                        rows,
                        k,
                        T::one(),
                        g.data(),
                        1,
                        o,
                        xv,
                        k,
                        1,
                        T::one(),
                        dw.data_mut(),
                        k,
                        1,
                    );
                }
                if let Some(dx) = self.slot(grads, *x) {
                    // dX[rows, k] += dY[rows, o] * W[o, k]
                    T::gemm(
                        rows,
                        o,
                        k,
                        T::one(),
                        g.data(),
                        o,
                        1,
                        wv,
                        k,
                        1,
                        T::one(),
                        dx.data_mut(),
                        k,
                        1,
                    );
                }
            }
            Op::RowMax(a, idx) => {
                if let Some(dx) = self.slot(grads, *a) {
                    let r = dx.row_len();
                    let d = dx.data_mut();
                    for (i, (&j, &gv)) in idx.iter().zip(g.data()).enumerate() {
                        d[i * r + j] += gv;
                    }
                }
            }
            Op::MeanSpatial(a) => {
                let (_, _, h, w) = self.value(*a).dims4().unwrap();
                let p = h * w;
                let inv = T::one() / T::of(p as f64);
                if let Some(dx) = self.slot(grads, *a) {
                    for (pl, &gv) in dx.data_mut().chunks_mut(p).zip(g.data()) {
                        for v in pl {
                            *v += gv * inv;
                        }
                    }
                }
            }
            Op::RowL2Norm(a) => {
                let xv = self.value(*a);
                if let Some(dx) = self.slot(grads, *a) {
                    let r = xv.row_len();
                    for (i, (&nrm, &gv)) in out.data().iter().zip(g.data()).enumerate() {
                        if nrm > T::zero() {
                            let s = gv / nrm;
                            for (d, &x) in
                                dx.data_mut()[i * r..(i + 1) * r].iter_mut().zip(xv.row(i))
                            {
                                *d += s * x;
                            }
                        }
                    }
                }
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                let v = g.data()[0] / T::of(n as f64);
                self.accum(grads, *a, Tensor::full(self.shape(*a), v));
            }
            Op::Sum(a) => {
                let v = g.data()[0];
                self.accum(grads, *a, Tensor::full(self.shape(*a), v));
            }
            Op::NegLogSigmoid(a, cap) => {
                let cap = *cap;
                let d = g
                    .zip_map(self.value(*a), |d, l| {
                        if softplus(-l) < cap {
                            -d * sigmoid(-l)
                        } else {
                            T::zero()
                        }
                    })
                    .unwrap();
                self.accum(grads, *a, d);
            }
            Op::NegLog1mSigmoid(a, cap) => {
                let cap = *cap;
                let d = g
                    .zip_map(self.value(*a), |d, l| {
                        if softplus(l) < cap {
                            d * sigmoid(l)
                        } else {
                            T::zero()
                        }
                    })
                    .unwrap();
                self.accum(grads, *a, d);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                if let Some(dx) = self.slot(grads, *logits) {
                    for (i, (&t, &gv)) in targets.iter().zip(g.data()).enumerate() {
                        for j in 0..k {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            dx.data_mut()[i * k + j] += gv * (probs[i * k + j] - onehot);
                        }
                    }
                }
            }
        }
    }
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(u64, ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of an input or parameter node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Per-parameter gradients for `store`, indexed by [`ParamId`].
    /// Parameters not reached by the pass are `None`.
    pub fn for_store(&self, store: &ParamStore<T>) -> Vec<Option<Tensor<T>>> {
        let mut out: Vec<Option<Tensor<T>>> = (0..store.len()).map(|_| None).collect();
        for &(uid, id, v) in &self.params {
            if uid == store.uid() {
                if let Some(g) = self.wrt(v) {
                    out[id.index()] = Some(g.clone());
                }
            }
        }
        out
    }
}
