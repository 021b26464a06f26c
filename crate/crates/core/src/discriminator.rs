//! Fine-grained attention critic.
//!
//! Residual backbone -> `M` attention maps -> bilinear attention pooling
//! (signed square root, per-map L2 normalisation) -> 1x1 filter bank over
//! the pooled matrix -> global max pooling -> logit. The argmax of the max
//! pool identifies the most discriminative part.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::autograd::{Graph, Var};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::image::{resize_plane, resize_window};
use crate::nn::{Conv, Linear, Norm};
use crate::params::ParamStore;
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Offset of the signed square root, keeping its slope finite at zero.
pub const SIGNED_SQRT_EPS: f64 = 1e-3;

/// Block counts of a 50-layer residual network.
pub const FULL_DEPTH_BLOCKS: [usize; 4] = [3, 4, 6, 3];

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    norm2: Norm,
    conv2: Conv,
    shortcut: Option<Conv>,
}

impl ResBlock {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Self {
        Self {
            norm1: Norm::new(store, &format!("{name}.norm1"), c_in),
            conv1: Conv::new(
                store,
                rng,
                &format!("{name}.conv1"),
                c_in,
                c_out,
                3,
                stride,
                1,
            ),
            norm2: Norm::new(store, &format!("{name}.norm2"), c_out),
            conv2: Conv::new(store, rng, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1),
            shortcut: (c_in != c_out || stride != 1).then(|| {
                Conv::new(
                    store,
                    rng,
                    &format!("{name}.shortcut"),
                    c_in,
                    c_out,
                    1,
                    stride,
                    0,
                )
            }),
        }
    }

    /// Pre-activation residual unit.
    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.norm1.forward(g, store, x)?;
        let h = g.silu(h);
        let r = self.conv1.forward(g, store, h)?;
        let r = self.norm2.forward(g, store, r)?;
        let r = g.silu(r);
        let r = self.conv2.forward(g, store, r)?;
        let sc = match &self.shortcut {
            Some(c) => c.forward(g, store, h)?,
            None => x,
        };
        g.add(sc, r)
    }
}

/// Handles of one critic pass.
#[derive(Clone, Debug)]
pub struct CriticVars {
    pub logits: Var,
    pub features: Var,
    pub maps: Var,
    pub pooled: Var,
    pub responses: Var,
    /// Flat `(map, filter)` index of the max-pooled response per sample.
    pub argmax: Vec<usize>,
}

/// Where the critic found the strongest evidence for one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Discrimination {
    pub map: usize,
    pub filter: usize,
    /// Peak cell of the selected attention map in feature coordinates.
    pub cell: (usize, usize),
    /// Centre of that cell in image pixels.
    pub pixel: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CriticOutput<T> {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub maps: Tensor<T>,
    pub locations: Vec<Discrimination>,
}

#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    pub store: ParamStore<T>,
    stem: Conv,
    blocks: Vec<ResBlock>,
    final_norm: Norm,
    attention: Conv,
    filter_bank: Linear,
    stride: usize,
    channels: usize,
    image_size: usize,
    feature_channels: usize,
    maps: usize,
    filters: usize,
}

pub fn sigmoid(l: f64) -> f64 {
    if l >= 0.0 {
        1.0 / (1.0 + libm::exp(-l))
    } else {
        let e = libm::exp(l);
        e / (1.0 + e)
    }
}

impl<T: Real> Discriminator<T> {
    pub fn new(cfg: &RunConfig, rng: &mut Rng) -> Self {
        let mut store = ParamStore::new();
        let stem = Conv::new(
            &mut store,
            rng,
            "stem",
            cfg.channels,
            cfg.disc_width,
            3,
            2,
            1,
        );
        let mut blocks = Vec::new();
        let mut c = cfg.disc_width;
        for s in 0..cfg.backbone_stages {
            let out = cfg.disc_width << s;
            let n = if cfg.backbone_full {
                FULL_DEPTH_BLOCKS[s.min(3)]
            } else {
                cfg.backbone_blocks
            };
            for b in 0..n {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                blocks.push(ResBlock::new(
                    &mut store,
                    rng,
                    &format!("stage{s}.block{b}"),
                    c,
                    out,
                    stride,
                ));
                c = out;
            }
        }
        let final_norm = Norm::new(&mut store, "final_norm", c);
        let attention = Conv::new(&mut store, rng, "attention", c, cfg.attention_maps, 1, 1, 0);
        let filter_bank = Linear::new(&mut store, rng, "filter_bank", c, cfg.filter_bank);
        Self {
            store,
            stem,
            blocks,
            final_norm,
            attention,
            filter_bank,
            stride: 1 << cfg.backbone_stages,
            channels: cfg.channels,
            image_size: cfg.image_size,
            feature_channels: c,
            maps: cfg.attention_maps,
            filters: cfg.filter_bank,
        }
    }

    pub fn feature_channels(&self) -> usize {
        self.feature_channels
    }

    /// Total downsampling of the backbone.
    pub fn feature_stride(&self) -> usize {
        self.stride
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Residual backbone: `[n, c, s, s]` to `[n, C_f, s/stride, s/stride]`.
    pub fn backbone_features(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        let s = self.image_size;
        if shape.len() != 4 || shape[1..] != [self.channels, s, s] {
            let n = shape.first().copied().unwrap_or(0);
            return Err(Error::shape(
                "critic input",
                &[n, self.channels, s, s],
                shape,
            ));
        }
        let mut h = self.stem.forward(g, &self.store, x)?;
        for b in &self.blocks {
            h = b.forward(g, &self.store, h)?;
        }
        let h = self.final_norm.forward(g, &self.store, h)?;
        Ok(g.silu(h))
    }

    /// Nonnegative attention maps `[n, M, h, w]`.
    pub fn attention_maps(&self, g: &mut Graph<T>, features: Var) -> Result<Var> {
        let a = self.attention.forward(g, &self.store, features)?;
        Ok(g.relu(a))
    }

    /// BAP matrix `[n, M, C_f]` after signed square root and per-map L2
    /// normalisation.
    pub fn bilinear_attention_pool(
        &self,
        g: &mut Graph<T>,
        features: Var,
        maps: Var,
    ) -> Result<Var> {
        let p = g.bap(maps, features)?;
        let p = g.signed_sqrt(p, T::of(SIGNED_SQRT_EPS));
        g.l2_normalize_last(p)
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<CriticVars> {
        let features = self.backbone_features(g, x)?;
        let maps = self.attention_maps(g, features)?;
        let pooled = self.bilinear_attention_pool(g, features, maps)?;
        let responses = self.filter_bank.forward(g, &self.store, pooled)?;
        let (logits, argmax) = g.row_max(responses);
        Ok(CriticVars {
            logits,
            features,
            maps,
            pooled,
            responses,
            argmax,
        })
    }

    fn locate(&self, maps: &Tensor<T>, argmax: &[usize]) -> Vec<Discrimination> {
        let (_, m, h, w) = maps.dims4().expect("maps are 4-d");
        argmax
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                let (map, filter) = (j / self.filters, j % self.filters);
                let plane = &maps.data()[(i * m + map) * h * w..(i * m + map + 1) * h * w];
                let mut best = 0;
                for (p, &v) in plane.iter().enumerate() {
                    if v > plane[best] {
                        best = p;
                    }
                }
                let cell = (best / w, best % w);
                let half = self.stride / 2;
                Discrimination {
                    map,
                    filter,
                    cell,
                    pixel: (cell.0 * self.stride + half, cell.1 * self.stride + half),
                }
            })
            .collect()
    }

    /// Critic probabilities and diagnostics with frozen weights.
    pub fn discriminate(&self, x: &Tensor<T>) -> Result<CriticOutput<T>> {
        let mut g = Graph::new();
        g.freeze(&self.store);
        let xv = g.constant(x.clone());
        let v = self.forward(&mut g, xv)?;
        let logits: Vec<f64> = g
            .value(v.logits)
            .data()
            .iter()
            .map(|l| l.as_f64())
            .collect();
        let maps = g.value(v.maps).clone();
        Ok(CriticOutput {
            probs: logits.iter().map(|&l| sigmoid(l)).collect(),
            locations: self.locate(&maps, &v.argmax),
            logits,
            maps,
        })
    }

    /// Attention maps only.
    pub fn maps(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        g.freeze(&self.store);
        let xv = g.constant(x.clone());
        let f = self.backbone_features(&mut g, xv)?;
        let m = self.attention_maps(&mut g, f)?;
        Ok(g.value(m).clone())
    }

    pub fn cast<U: Real>(&self) -> Discriminator<U> {
        Discriminator {
            store: self.store.cast(),
            stem: self.stem,
            blocks: self.blocks.clone(),
            final_norm: self.final_norm,
            attention: self.attention,
            filter_bank: self.filter_bank,
            stride: self.stride,
            channels: self.channels,
            image_size: self.image_size,
            feature_channels: self.feature_channels,
            maps: self.maps,
            filters: self.filters,
        }
    }
}

/// What augmentation was applied to one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Augmentation {
    /// Bounding box `(y0, x0, h, w)` cropped and resized to full frame.
    Crop {
        map: usize,
        bbox: (usize, usize, usize, usize),
    },
    /// Pixels above threshold set to zero.
    Drop { map: usize, pixels: usize },
    /// The selected map was all zero; the sample is unchanged.
    Degenerate { map: usize },
}

/// Fraction of the map maximum above which a pixel belongs to the part.
pub const AUGMENT_THRESHOLD: f64 = 0.5;

/// Attention-guided cropping / dropping of a batch `[n, c, h, w]` using
/// critic maps `[n, M, h', w']`. Per sample one map is chosen uniformly and
/// cropping or dropping with probability 1/2 each.
pub fn attention_augment(
    x: &Tensor<f32>,
    maps: &Tensor<f32>,
    rng: &mut Rng,
) -> Result<(Tensor<f32>, Vec<Augmentation>)> {
    let (n, c, h, w) = x.dims4()?;
    let (nm, m, mh, mw) = maps.dims4()?;
    if nm != n || m == 0 {
        return Err(Error::shape(
            "attention maps",
            &[n, m.max(1), mh, mw],
            maps.shape(),
        ));
    }
    let plane = h * w;
    let mut out = x.clone();
    let mut kinds = Vec::with_capacity(n);
    for i in 0..n {
        let k = rng.random_range(0..m);
        let crop = rng.random_bool(0.5);
        let src = &maps.data()[(i * m + k) * mh * mw..(i * m + k + 1) * mh * mw];
        let up = resize_plane(src, mh, mw, h, w);
        let peak = up.iter().copied().fold(0.0f32, f32::max);
        if peak <= 0.0 {
            kinds.push(Augmentation::Degenerate { map: k });
            continue;
        }
        let thr = (AUGMENT_THRESHOLD * f64::from(peak)) as f32;
        let sample = &mut out.data_mut()[i * c * plane..(i + 1) * c * plane];
        if crop {
            let (mut y0, mut y1, mut x0, mut x1) = (h, 0, w, 0);
            for (p, &v) in up.iter().enumerate() {
                if v >= thr {
                    let (y, xx) = (p / w, p % w);
                    y0 = y0.min(y);
                    y1 = y1.max(y);
                    x0 = x0.min(xx);
                    x1 = x1.max(xx);
                }
            }
            let bbox = (y0, x0, y1 - y0 + 1, x1 - x0 + 1);
            for ch in 0..c {
                let orig = sample[ch * plane..(ch + 1) * plane].to_vec();
                let r = resize_window(&orig, h, w, bbox, h, w);
                sample[ch * plane..(ch + 1) * plane].copy_from_slice(&r);
            }
            kinds.push(Augmentation::Crop { map: k, bbox });
        } else {
            let mut pixels = 0;
            for (p, &v) in up.iter().enumerate() {
                if v >= thr {
                    pixels += 1;
                    for ch in 0..c {
                        sample[ch * plane + p] = 0.0;
                    }
                }
            }
            kinds.push(Augmentation::Drop { map: k, pixels });
        }
    }
    Ok((out, kinds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zero_params;
    use crate::rng::{normal_tensor, seeded_rng};

    fn small() -> RunConfig {
        RunConfig {
            image_size: 32,
            disc_width: 4,
            attention_maps: 3,
            filter_bank: 5,
            ..RunConfig::default()
        }
    }

    #[test]
    fn feature_shape_follows_stride() {
        let cfg = RunConfig::default();
        let d = Discriminator::<f32>::new(&cfg, &mut seeded_rng(0));
        let mut g = Graph::new();
        let x = g.constant(normal_tensor(&mut seeded_rng(1), &[2, 3, 64, 64]));
        let f = d.backbone_features(&mut g, x).unwrap();
        assert_eq!(g.shape(f), [2, d.feature_channels(), 4, 4]);
        let v = d.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(v.maps), [2, 8, 4, 4]);
        assert_eq!(g.shape(v.pooled), [2, 8, d.feature_channels()]);
    }

    #[test]
    fn full_depth_layout() {
        let cfg = RunConfig {
            backbone_full: true,
            ..small()
        };
        let d = Discriminator::<f32>::new(&cfg, &mut seeded_rng(0));
        assert_eq!(d.num_blocks(), 16);
    }

    #[test]
    fn zero_branch_is_identity_block() {
        let cfg = RunConfig {
            backbone_stages: 1,
            ..small()
        };
        let mut d = Discriminator::<f64>::new(&cfg, &mut seeded_rng(0));
        zero_params(&mut d.store, "stage0.block0.conv2");
        let mut g = Graph::new();
        let x = g.constant(normal_tensor(&mut seeded_rng(1), &[1, 3, 32, 32]));
        let stem = d.stem.forward(&mut g, &d.store, x).unwrap();
        let out = d.blocks[0].forward(&mut g, &d.store, stem).unwrap();
        assert_eq!(g.value(out), g.value(stem));
    }

    #[test]
    fn probabilities_and_locations() {
        let d = Discriminator::<f32>::new(&small(), &mut seeded_rng(3));
        let x = normal_tensor::<f32>(&mut seeded_rng(4), &[3, 3, 32, 32]);
        let out = d.discriminate(&x).unwrap();
        assert!(out.probs.iter().all(|&p| p > 0.0 && p < 1.0));
        assert!(out.maps.data().iter().all(|&v| v >= 0.0));
        for loc in &out.locations {
            assert!(loc.map < 3 && loc.filter < 5);
            assert!(loc.pixel.0 < 32 && loc.pixel.1 < 32);
        }
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn degenerate_and_full_support_augmentation() {
        let x = normal_tensor::<f32>(&mut seeded_rng(0), &[2, 1, 8, 8]);
        let zero = Tensor::zeros(&[2, 2, 2, 2]);
        let (y, kinds) = attention_augment(&x, &zero, &mut seeded_rng(1)).unwrap();
        assert_eq!(y, x);
        assert!(kinds
            .iter()
            .all(|k| matches!(k, Augmentation::Degenerate { .. })));

        let ones = Tensor::ones(&[2, 2, 2, 2]);
        let mut rng = seeded_rng(2);
        let (y, kinds) = attention_augment(&x, &ones, &mut rng).unwrap();
        for (i, k) in kinds.iter().enumerate() {
            match k {
                Augmentation::Crop { bbox, .. } => {
                    assert_eq!(*bbox, (0, 0, 8, 8));
                    assert_eq!(y.row(i), x.row(i));
                }
                Augmentation::Drop { pixels, .. } => {
                    assert_eq!(*pixels, 64);
                    assert!(y.row(i).iter().all(|&v| v == 0.0));
                }
                Augmentation::Degenerate { .. } => panic!("nonzero map"),
            }
        }
        let again = attention_augment(&x, &ones, &mut seeded_rng(2)).unwrap();
        assert_eq!(again.1, kinds);
    }
}
