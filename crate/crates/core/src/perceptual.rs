//! VGG19-style feature extractor and perceptual loss.
//!
//! The feature stack is the ordered list of conv / ReLU / max-pool modules
//! of VGG19 (37 modules). `tap_layer = k` runs the first `k` modules, so the
//! default 14 ends at the ReLU after the second conv of the third block.
//! Weight names follow the `features.{index}.weight|bias` convention of the
//! common reference implementation, so converted general-purpose weights
//! load directly.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::autograd::{Graph, Var};
use crate::checkpoint::{Checkpoint, MetaValue};
use crate::error::{Error, Result};
use crate::nn::{Conv, Linear};
use crate::optim::Sgd;
use crate::params::ParamStore;
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Conv widths as multiples of the base width; `0` marks a 2x2 max pool.
const VGG19_LAYOUT: [usize; 21] = [
    1, 1, 0, 2, 2, 0, 4, 4, 4, 4, 0, 8, 8, 8, 8, 0, 8, 8, 8, 8, 0,
];

pub const VGG19_MODULES: usize = 37;

/// Mean / std of the colour statistics general-purpose weights expect.
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    General,
    ProblemSpecific,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::General => "general",
            Provenance::ProblemSpecific => "problem_specific",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Module {
    Conv {
        index: usize,
        c_in: usize,
        c_out: usize,
    },
    Relu,
    Pool,
}

/// The first `tap_layer` modules of the stack for base width `width`.
pub fn vgg19_modules(channels: usize, width: usize, tap_layer: usize) -> Vec<Module> {
    let mut out = Vec::with_capacity(VGG19_MODULES);
    let mut c = channels;
    for &mult in &VGG19_LAYOUT {
        if mult == 0 {
            out.push(Module::Pool);
        } else {
            let index = out.len();
            out.push(Module::Conv {
                index,
                c_in: c,
                c_out: width * mult,
            });
            out.push(Module::Relu);
            c = width * mult;
        }
    }
    debug_assert_eq!(out.len(), VGG19_MODULES);
    out.truncate(tap_layer);
    out
}

/// `[channels, size]` of the tap activation for a square input.
pub fn tap_shape(channels: usize, width: usize, tap_layer: usize, image_size: usize) -> [usize; 3] {
    let mut c = channels;
    let mut s = image_size;
    for m in vgg19_modules(channels, width, tap_layer) {
        match m {
            Module::Conv { c_out, .. } => c = c_out,
            Module::Relu => {}
            Module::Pool => s /= 2,
        }
    }
    [c, s, s]
}

#[derive(Clone, Debug)]
pub struct FeatureExtractor<T> {
    pub store: ParamStore<T>,
    modules: Vec<Module>,
    convs: Vec<Conv>,
    channels: usize,
    width: usize,
    tap_layer: usize,
    provenance: Provenance,
    loaded: bool,
}

fn check_tap(tap_layer: usize) -> Result<()> {
    if (1..=VGG19_MODULES).contains(&tap_layer) {
        Ok(())
    } else {
        Err(Error::range(
            "loss.tap_layer",
            format!("must be in 1..={VGG19_MODULES}, got {tap_layer}"),
        ))
    }
}

impl<T: Real> FeatureExtractor<T> {
    /// Randomly initialised stack; not usable for losses until trained or loaded.
    pub fn new(
        channels: usize,
        width: usize,
        tap_layer: usize,
        provenance: Provenance,
        rng: &mut Rng,
    ) -> Result<Self> {
        check_tap(tap_layer)?;
        let modules = vgg19_modules(channels, width, tap_layer);
        let mut store = ParamStore::new();
        let mut convs = Vec::new();
        for m in &modules {
            if let Module::Conv { index, c_in, c_out } = *m {
                convs.push(Conv::new(
                    &mut store,
                    rng,
                    &format!("features.{index}"),
                    c_in,
                    c_out,
                    3,
                    1,
                    1,
                ));
            }
        }
        Ok(Self {
            store,
            modules,
            convs,
            channels,
            width,
            tap_layer,
            provenance,
            loaded: false,
        })
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn tap_layer(&self) -> usize {
        self.tap_layer
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn is_loaded(&self) -> bool {
        self.loaded
    }

    pub fn mark_loaded(&mut self) {
        self.loaded = true;
    }

    pub fn tap_channels(&self) -> usize {
        tap_shape(self.channels, self.width, self.tap_layer, 1 << 10)[0]
    }

    /// Graph forward up to the tap layer.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1] != self.channels {
            let n = shape.first().copied().unwrap_or(0);
            return Err(Error::shape(
                "extractor input",
                &[n, self.channels, 0, 0],
                shape,
            ));
        }
        let mut h = x;
        if self.provenance == Provenance::General && self.channels == 3 {
            // [-1, 1] pixels to the colour statistics of the pretraining data
            let mut w = Tensor::zeros(&[3, 3, 1, 1]);
            let mut b = Tensor::zeros(&[3]);
            for c in 0..3 {
                w.data_mut()[c * 4] = T::of(0.5 / IMAGENET_STD[c]);
                b.data_mut()[c] = T::of((0.5 - IMAGENET_MEAN[c]) / IMAGENET_STD[c]);
            }
            let w = g.constant(w);
            let b = g.constant(b);
            h = g.conv2d(h, w, Some(b), 1, 0)?;
        }
        let mut convs = self.convs.iter();
        for m in &self.modules {
            h = match m {
                Module::Conv { .. } => {
                    convs
                        .next()
                        .expect("conv per module")
                        .forward(g, &self.store, h)?
                }
                Module::Relu => g.relu(h),
                Module::Pool => g.maxpool2(h)?,
            };
        }
        Ok(h)
    }

    /// Tap activations of a batch.
    pub fn feature_extract(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if !self.loaded {
            return Err(Error::ExtractorNotLoaded);
        }
        let mut g = Graph::new();
        g.freeze(&self.store);
        let xv = g.constant(x.clone());
        let f = self.forward(&mut g, xv)?;
        Ok(g.value(f).clone())
    }

    pub fn cast<U: Real>(&self) -> FeatureExtractor<U> {
        FeatureExtractor {
            store: self.store.cast(),
            modules: self.modules.clone(),
            convs: self.convs.clone(),
            channels: self.channels,
            width: self.width,
            tap_layer: self.tap_layer,
            provenance: self.provenance,
            loaded: self.loaded,
        }
    }
}

/// Batch mean of per-sample L2 distances between tap activations. `x` is a
/// target (no gradient), `x_prime` carries the graph.
pub fn perceptual_loss<T: Real>(
    g: &mut Graph<T>,
    extractor: &FeatureExtractor<T>,
    x: Var,
    x_prime: Var,
) -> Result<Var> {
    g.freeze(&extractor.store);
    let fx = extractor.forward(g, x)?;
    let fxp = extractor.forward(g, x_prime)?;
    let d = g.sub(fx, fxp)?;
    let n = g.row_l2_norm(d);
    Ok(g.mean(n))
}

/// Per-sample perceptual distances with frozen weights.
pub fn perceptual_distances<T: Real>(
    extractor: &FeatureExtractor<T>,
    x: &Tensor<T>,
    x_prime: &Tensor<T>,
) -> Result<Vec<f64>> {
    let a = extractor.feature_extract(x)?;
    let b = extractor.feature_extract(x_prime)?;
    let d = a.zip_map(&b, |p, q| p - q)?;
    Ok((0..d.batch())
        .map(|i| {
            libm::sqrt(
                d.row(i)
                    .iter()
                    .map(|v| v.as_f64() * v.as_f64())
                    .sum::<f64>(),
            )
        })
        .collect())
}

impl FeatureExtractor<f32> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push_meta("kind", MetaValue::Str("extractor".into()));
        ck.push_meta(
            "provenance",
            MetaValue::Str(self.provenance.as_str().into()),
        );
        ck.push_meta("channels", MetaValue::U64(self.channels as u64));
        ck.push_meta("width", MetaValue::U64(self.width as u64));
        ck.push_meta("tap_layer", MetaValue::U64(self.tap_layer as u64));
        for (n, t) in self.store.named() {
            ck.push_tensor(n, t.clone());
        }
        ck
    }

    /// Builds an extractor truncated at `tap_layer` from a weight table.
    ///
    /// Tensors of modules past the tap are ignored; every tensor the
    /// truncated stack needs must be present with the right shape. Base
    /// width and input channels come from the first conv.
    pub fn from_checkpoint(
        ck: &Checkpoint,
        tap_layer: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        check_tap(tap_layer)?;
        let first = ck
            .tensor("features.0.weight")
            .ok_or_else(|| Error::ShapeIncompatible("missing tensor `features.0.weight`".into()))?;
        let s = first.shape();
        if s.len() != 4 || s[2] != 3 || s[3] != 3 {
            return Err(Error::ShapeIncompatible(format!(
                "`features.0.weight` has shape {s:?}"
            )));
        }
        let (width, channels) = (s[0], s[1]);
        let mut rng = crate::rng::seeded_rng(0);
        let mut ex = Self::new(channels, width, tap_layer, provenance, &mut rng)?;
        let mut entries: Vec<(&str, Tensor<f32>)> = Vec::new();
        for (name, t) in &ck.tensors {
            let idx = name
                .strip_prefix("features.")
                .and_then(|r| r.split('.').next())
                .and_then(|i| i.parse::<usize>().ok());
            match idx {
                Some(i) if i >= tap_layer => continue,
                Some(_) => entries.push((name.as_str(), t.clone())),
                None => continue,
            }
        }
        ex.store.load_named(entries)?;
        ex.loaded = true;
        Ok(ex)
    }
}

/// Rotates a `[c, s, s]` image by `k * 90` degrees counter-clockwise.
pub fn rotate90<T: Real>(img: &[T], c: usize, s: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c * s * s];
    for ch in 0..c {
        let src = &img[ch * s * s..(ch + 1) * s * s];
        let dst = &mut out[ch * s * s..(ch + 1) * s * s];
        for y in 0..s {
            for x in 0..s {
                let (sy, sx) = match k % 4 {
                    0 => (y, x),
                    1 => (x, s - 1 - y),
                    2 => (s - 1 - y, s - 1 - x),
                    _ => (s - 1 - x, y),
                };
                dst[y * s + x] = src[sy * s + sx];
            }
        }
    }
    out
}

/// Expands `[n, c, s, s]` into all four rotations; returns `(batch, targets)`.
pub fn rotation_batch<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    if h != w {
        return Err(Error::shape(
            "rotation pretext input",
            &[n, c, h, h],
            x.shape(),
        ));
    }
    let mut data = Vec::with_capacity(4 * x.numel());
    let mut targets = Vec::with_capacity(4 * n);
    for i in 0..n {
        for k in 0..4 {
            data.extend(rotate90(x.row(i), c, h, k));
            targets.push(k);
        }
    }
    Ok((Tensor::from_vec(&[4 * n, c, h, w], data)?, targets))
}

/// Global-average-pool + linear head predicting the rotation class.
#[derive(Clone, Debug)]
pub struct RotationHead<T> {
    pub store: ParamStore<T>,
    linear: Linear,
}

impl<T: Real> RotationHead<T> {
    pub fn new(tap_channels: usize, rng: &mut Rng) -> Self {
        let mut store = ParamStore::new();
        let linear = Linear::new(&mut store, rng, "rotation_head", tap_channels, 4);
        Self { store, linear }
    }

    pub fn forward(&self, g: &mut Graph<T>, features: Var) -> Result<Var> {
        let pooled = g.mean_spatial(features)?;
        self.linear.forward(g, &self.store, pooled)
    }
}

/// Fraction of rotated copies whose rotation is predicted correctly.
pub fn rotation_accuracy<T: Real>(
    extractor: &FeatureExtractor<T>,
    head: &RotationHead<T>,
    images: &Tensor<T>,
) -> Result<f64> {
    let (batch, targets) = rotation_batch(images)?;
    let mut g = Graph::new();
    g.freeze(&extractor.store);
    g.freeze(&head.store);
    let x = g.constant(batch);
    let f = extractor.forward(&mut g, x)?;
    let logits = head.forward(&mut g, f)?;
    let l = g.value(logits);
    let correct = targets
        .iter()
        .enumerate()
        .filter(|&(i, &t)| {
            let row = l.row(i);
            let best = (0..4).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == t
        })
        .count();
    Ok(correct as f64 / targets.len() as f64)
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome<T> {
    pub extractor: FeatureExtractor<T>,
    pub head: RotationHead<T>,
    /// Mean cross-entropy per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Self-supervised rotation pretraining of the feature stack on normal
/// images `[n, c, s, s]` with momentum SGD.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_rotation<T: Real>(
    images: &Tensor<T>,
    width: usize,
    tap_layer: usize,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    momentum: f64,
    rng: &mut Rng,
) -> Result<PretrainOutcome<T>> {
    let (n, c, _, _) = images.dims4()?;
    if n == 0 {
        return Err(Error::EmptyTrainSplit);
    }
    let mut extractor =
        FeatureExtractor::new(c, width, tap_layer, Provenance::ProblemSpecific, rng)?;
    let mut head = RotationHead::new(extractor.tap_channels(), rng);
    let mut opt_f = Sgd::new(&extractor.store, lr, momentum);
    let mut opt_h = Sgd::new(&head.store, lr, momentum);
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size.max(1)) {
            let (batch, targets) = rotation_batch(&images.select_rows(chunk))?;
            let mut g = Graph::new();
            let x = g.constant(batch);
            let f = extractor.forward(&mut g, x)?;
            let logits = head.forward(&mut g, f)?;
            let per_row = g.softmax_cross_entropy(logits, &targets)?;
            let loss = g.mean(per_row);
            let lv = g.value(loss).data()[0].as_f64();
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: batches as u64,
                    term: "rotation",
                });
            }
            let grads = g.backward(loss)?;
            let gf = grads.for_store(&extractor.store);
            opt_f.step(&mut extractor.store, &gf);
            let gh = grads.for_store(&head.store);
            opt_h.step(&mut head.store, &gh);
            total += lv;
            batches += 1;
        }
        epoch_losses.push(total / batches as f64);
    }
    extractor.loaded = true;
    Ok(PretrainOutcome {
        extractor,
        head,
        epoch_losses,
    })
}

/// Display name of a module, e.g. `conv3_2` or `relu3_2`.
pub fn module_name(channels: usize, width: usize, index: usize) -> String {
    let mut block = 1;
    let mut conv = 0;
    for (i, m) in vgg19_modules(channels, width, VGG19_MODULES)
        .into_iter()
        .enumerate()
    {
        match m {
            Module::Conv { .. } => conv += 1,
            Module::Pool => {}
            Module::Relu => {}
        }
        if i == index {
            return match m {
                Module::Conv { .. } => format!("conv{block}_{conv}"),
                Module::Relu => format!("relu{block}_{conv}"),
                Module::Pool => format!("pool{block}"),
            };
        }
        if m == Module::Pool {
            block += 1;
            conv = 0;
        }
    }
    String::from("?")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_tensor, seeded_rng};

    #[test]
    fn stack_layout() {
        let full = vgg19_modules(3, 64, VGG19_MODULES);
        assert_eq!(full.len(), 37);
        assert_eq!(
            full.iter()
                .filter(|m| matches!(m, Module::Conv { .. }))
                .count(),
            16
        );
        assert_eq!(module_name(3, 64, 13), "relu3_2");
        assert_eq!(module_name(3, 64, 36), "pool5");
        assert_eq!(tap_shape(3, 64, 14, 224), [256, 56, 56]);
        assert_eq!(tap_shape(3, 8, 1, 64), [8, 64, 64]);
        assert_eq!(tap_shape(3, 8, 5, 64), [8, 32, 32]);
    }

    #[test]
    fn tap_range() {
        let mut rng = seeded_rng(0);
        assert!(FeatureExtractor::<f32>::new(3, 4, 0, Provenance::General, &mut rng).is_err());
        assert!(FeatureExtractor::<f32>::new(3, 4, 38, Provenance::General, &mut rng).is_err());
        assert!(FeatureExtractor::<f32>::new(3, 4, 37, Provenance::General, &mut rng).is_ok());
    }

    #[test]
    fn rotation_pretraining_learns() {
        // An asymmetric gradient image, so every rotation is distinguishable.
        let one: Vec<f32> = (0..64)
            .map(|i| if i % 8 < 2 || i < 16 { 1.0 } else { -1.0 })
            .collect();
        let images = Tensor::from_vec(&[6, 1, 8, 8], one.repeat(6)).unwrap();
        let mut rng = seeded_rng(1);
        let out = pretrain_rotation(&images, 4, 4, 40, 3, 0.05, 0.9, &mut rng).unwrap();
        assert!(out.extractor.is_loaded());
        assert!(
            out.epoch_losses.last().unwrap() < &out.epoch_losses[0],
            "{:?}",
            out.epoch_losses
        );
        assert_eq!(
            rotation_accuracy(&out.extractor, &out.head, &images).unwrap(),
            1.0
        );
    }

    #[test]
    fn rotations_compose() {
        let img: Vec<f64> = (0..18).map(f64::from).collect();
        let r1 = rotate90(&img, 2, 3, 1);
        assert_eq!(rotate90(&rotate90(&r1, 2, 3, 1), 2, 3, 2), img);
        assert_eq!(rotate90(&r1, 2, 3, 1), rotate90(&img, 2, 3, 2));
        // top-left corner comes from the top-right corner
        assert_eq!(r1[0], img[2]);
    }

    #[test]
    fn unloaded_extractor_is_rejected() {
        let ex =
            FeatureExtractor::<f32>::new(3, 2, 4, Provenance::General, &mut seeded_rng(0)).unwrap();
        let x = normal_tensor(&mut seeded_rng(1), &[1, 3, 8, 8]);
        assert_eq!(ex.feature_extract(&x), Err(Error::ExtractorNotLoaded));
    }

    #[test]
    fn checkpoint_ignores_layers_past_tap_and_rejects_truncation() {
        let mut ex =
            FeatureExtractor::<f32>::new(3, 2, 37, Provenance::General, &mut seeded_rng(0))
                .unwrap();
        ex.loaded = true;
        let ck = ex.to_checkpoint();
        let short = FeatureExtractor::from_checkpoint(&ck, 14, Provenance::General).unwrap();
        assert_eq!(short.store.len(), 12);
        let mut truncated = ck.clone();
        truncated
            .tensors
            .retain(|(n, _)| !n.starts_with("features.12."));
        assert!(matches!(
            FeatureExtractor::from_checkpoint(&truncated, 14, Provenance::General),
            Err(Error::ShapeIncompatible(_))
        ));
    }
}
