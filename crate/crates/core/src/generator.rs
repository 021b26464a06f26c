//! Dual-encoder, skip-connected variational generator.
//!
//! Inference path: `E0_low -> E0_high -> D0_high -> (combine with skip) ->
//! D0_low`. In training mode two secondary encoders re-embed the decoded
//! outputs: `E1_low` reads `x'`, `E1_high` reads the `D0_high` feature map.

use alloc::format;
use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::config::{RunConfig, SkipMode};
use crate::error::{Error, Result};
use crate::nn::{Conv, ConvBlock};
use crate::params::ParamStore;
use crate::real::Real;
use crate::rng::{normal_tensor, Rng};
use crate::tensor::Tensor;

/// Initial log-variance of every encoder posterior.
const LOGVAR_INIT: f64 = -4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GenMode {
    Train,
    Infer,
}

/// Posterior parameters. A missing `logvar` is the deterministic case.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianLatent<T> {
    pub mean: Tensor<T>,
    pub logvar: Tensor<T>,
}

/// `mean + exp(logvar / 2) * eps`, or `mean` when `rng` is `None`.
pub fn reparameterize<T: Real>(
    latent: &GaussianLatent<T>,
    rng: Option<&mut Rng>,
) -> Result<Tensor<T>> {
    if latent.mean.shape() != latent.logvar.shape() {
        return Err(Error::shape(
            "latent logvar",
            latent.mean.shape(),
            latent.logvar.shape(),
        ));
    }
    if !latent.mean.is_finite()
        || latent
            .logvar
            .data()
            .iter()
            .any(|v| v.is_nan() || *v == T::infinity())
    {
        return Err(Error::NonFiniteLatent);
    }
    let Some(rng) = rng else {
        return Ok(latent.mean.clone());
    };
    let eps: Tensor<T> = normal_tensor(rng, latent.mean.shape());
    let half = T::of(0.5);
    let mut out = latent.mean.clone();
    for ((o, &lv), &e) in out
        .data_mut()
        .iter_mut()
        .zip(latent.logvar.data())
        .zip(eps.data())
    {
        *o += (lv * half).exp() * e;
    }
    Ok(out)
}

/// Latent handles on a graph.
#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    pub mean: Var,
    pub logvar: Option<Var>,
}

/// Every intermediate of one generator pass that later stages need.
#[derive(Clone, Debug)]
pub struct GenVars {
    pub x_prime: Var,
    pub z_low: LatentVars,
    pub z_low_sample: Var,
    pub skip: Var,
    pub z_high: Option<LatentVars>,
    pub z_high_sample: Option<Var>,
    pub high_decoded: Option<Var>,
    pub z_prime_low: Option<Var>,
    pub z_prime_high: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenOutput<T> {
    pub x_prime: Tensor<T>,
    pub z_low: GaussianLatent<T>,
    pub z_high: Option<GaussianLatent<T>>,
    pub z_low_sample: Tensor<T>,
    pub z_high_sample: Option<Tensor<T>>,
    pub z_prime_low: Option<Tensor<T>>,
    pub z_prime_high: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
struct Encoder {
    stages: Vec<ConvBlock>,
    mean: Conv,
    logvar: Option<Conv>,
}

impl Encoder {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        c_in: usize,
        widths: &[usize],
        z_channels: usize,
        with_logvar: bool,
    ) -> Self {
        let mut stages = Vec::with_capacity(widths.len());
        let mut c = c_in;
        for (i, &w) in widths.iter().enumerate() {
            stages.push(ConvBlock::new(
                store,
                rng,
                &format!("{name}.stage{i}"),
                c,
                w,
                4,
                2,
                1,
            ));
            c = w;
        }
        let mean = Conv::new(store, rng, &format!("{name}.mean"), c, z_channels, 1, 1, 0);
        let logvar = with_logvar.then(|| {
            let conv = Conv::new(
                store,
                rng,
                &format!("{name}.logvar"),
                c,
                z_channels,
                1,
                1,
                0,
            );
            store.value_mut(conv.weight).data_mut().fill(T::zero());
            store
                .value_mut(conv.bias)
                .data_mut()
                .fill(T::of(LOGVAR_INIT));
            conv
        });
        Self {
            stages,
            mean,
            logvar,
        }
    }

    /// Returns `(last stage activation, latent)`.
    fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<(Var, LatentVars)> {
        let mut h = x;
        for s in &self.stages {
            h = s.forward(g, store, h)?;
        }
        let mean = self.mean.forward(g, store, h)?;
        let logvar = match &self.logvar {
            Some(c) => Some(c.forward(g, store, h)?),
            None => None,
        };
        Ok((h, LatentVars { mean, logvar }))
    }
}

#[derive(Clone, Debug)]
struct HighDecoder {
    block: ConvBlock,
    out: Conv,
}

#[derive(Clone, Debug)]
struct LowDecoder {
    stages: Vec<ConvBlock>,
    out: Conv,
}

/// Generator weights plus the architecture needed to run them.
#[derive(Clone, Debug)]
pub struct Generator<T> {
    pub store: ParamStore<T>,
    e0_low: Encoder,
    e0_high: Option<Encoder>,
    d0_high: Option<HighDecoder>,
    d0_low: LowDecoder,
    e1_low: Option<Encoder>,
    e1_high: Option<Encoder>,
    skip_mode: SkipMode,
    channels: usize,
    image_size: usize,
    z_low: [usize; 2],
    z_high: [usize; 2],
    skip_channels: usize,
}

impl<T: Real> Generator<T> {
    pub fn new(cfg: &RunConfig, rng: &mut Rng) -> Self {
        let mut store = ParamStore::new();
        let s = cfg.low_stages();
        let widths: Vec<usize> = (0..s).map(|i| cfg.gen_width << i).collect();
        let skip_channels = widths[s - 1];
        let high_width = cfg.gen_width << s;

        let e0_low = Encoder::new(
            &mut store,
            rng,
            "e0_low",
            cfg.channels,
            &widths,
            cfg.z_low_channels,
            true,
        );
        let (e0_high, d0_high) = if cfg.enable_high_path {
            let enc = Encoder::new(
                &mut store,
                rng,
                "e0_high",
                cfg.z_low_channels,
                &[high_width],
                cfg.z_high_channels,
                true,
            );
            let dec = HighDecoder {
                block: ConvBlock::new(
                    &mut store,
                    rng,
                    "d0_high.stage0",
                    cfg.z_high_channels,
                    skip_channels,
                    3,
                    1,
                    1,
                ),
                out: Conv::new(
                    &mut store,
                    rng,
                    "d0_high.out",
                    skip_channels,
                    skip_channels,
                    3,
                    1,
                    1,
                ),
            };
            (Some(enc), Some(dec))
        } else {
            (None, None)
        };

        let mut c = match (cfg.enable_high_path, cfg.skip_mode) {
            (false, _) => cfg.z_low_channels,
            (true, SkipMode::Multiply) => skip_channels,
            (true, SkipMode::Concat) => 2 * skip_channels,
        };
        let mut stages = Vec::with_capacity(s);
        for j in 0..s {
            let w = cfg.gen_width << (s - 1 - j);
            stages.push(ConvBlock::new(
                &mut store,
                rng,
                &format!("d0_low.stage{j}"),
                c,
                w,
                3,
                1,
                1,
            ));
            c = w;
        }
        let d0_low = LowDecoder {
            stages,
            out: Conv::new(&mut store, rng, "d0_low.out", c, cfg.channels, 3, 1, 1),
        };

        let e1_low = cfg.enable_e1_low.then(|| {
            Encoder::new(
                &mut store,
                rng,
                "e1_low",
                cfg.channels,
                &widths,
                cfg.z_low_channels,
                false,
            )
        });
        let e1_high = (cfg.enable_e1_high && cfg.enable_high_path).then(|| {
            Encoder::new(
                &mut store,
                rng,
                "e1_high",
                skip_channels,
                &[high_width],
                cfg.z_high_channels,
                false,
            )
        });

        Self {
            store,
            e0_low,
            e0_high,
            d0_high,
            d0_low,
            e1_low,
            e1_high,
            skip_mode: cfg.skip_mode,
            channels: cfg.channels,
            image_size: cfg.image_size,
            z_low: [cfg.z_low_channels, cfg.z_low_size],
            z_high: [cfg.z_high_channels, cfg.z_low_size / 2],
            skip_channels,
        }
    }

    pub fn skip_mode(&self) -> SkipMode {
        self.skip_mode
    }

    pub fn has_high_path(&self) -> bool {
        self.e0_high.is_some()
    }

    /// `[channels, size]` of the low latent.
    pub fn z_low_dims(&self) -> [usize; 2] {
        self.z_low
    }

    pub fn z_high_dims(&self) -> [usize; 2] {
        self.z_high
    }

    pub fn skip_channels(&self) -> usize {
        self.skip_channels
    }

    fn check4(&self, g: &Graph<T>, v: Var, c: usize, s: usize, ctx: &str) -> Result<()> {
        let shape = g.shape(v);
        if shape.len() != 4 || shape[1..] != [c, s, s] {
            let n = shape.first().copied().unwrap_or(0);
            return Err(Error::shape(ctx, &[n, c, s, s], shape));
        }
        Ok(())
    }

    /// `E0_low`: returns the low latent and the skip feature map.
    pub fn encode_low(&self, g: &mut Graph<T>, x: Var) -> Result<(LatentVars, Var)> {
        self.check4(g, x, self.channels, self.image_size, "generator input")?;
        let (skip, z) = self.e0_low.forward(g, &self.store, x)?;
        Ok((z, skip))
    }

    /// `E0_high` applied to a low-latent sample.
    pub fn encode_high(&self, g: &mut Graph<T>, z_low_sample: Var) -> Result<LatentVars> {
        let enc = self
            .e0_high
            .as_ref()
            .ok_or_else(|| Error::range("ablation.high_path", "high path disabled"))?;
        self.check4(
            g,
            z_low_sample,
            self.z_low[0],
            self.z_low[1],
            "high encoder input",
        )?;
        Ok(enc.forward(g, &self.store, z_low_sample)?.1)
    }

    /// Draws `mean + exp(logvar / 2) * eps` on the graph; `None` returns the mean.
    pub fn sample(&self, g: &mut Graph<T>, z: LatentVars, rng: Option<&mut Rng>) -> Result<Var> {
        if !g.value(z.mean).is_finite() {
            return Err(Error::NonFiniteLatent);
        }
        let (Some(lv), Some(rng)) = (z.logvar, rng) else {
            return Ok(z.mean);
        };
        if g.value(lv)
            .data()
            .iter()
            .any(|v| v.is_nan() || *v == T::infinity())
        {
            return Err(Error::NonFiniteLatent);
        }
        let eps = g.constant(normal_tensor(rng, g.shape(z.mean)));
        let half = g.scale(lv, T::of(0.5));
        let std = g.exp(half);
        let noise = g.mul(std, eps)?;
        g.add(z.mean, noise)
    }

    /// `D0_high`: decoded high latent at skip resolution.
    pub fn decode_high(&self, g: &mut Graph<T>, z_high_sample: Var) -> Result<Var> {
        let dec = self
            .d0_high
            .as_ref()
            .ok_or_else(|| Error::range("ablation.high_path", "high path disabled"))?;
        self.check4(
            g,
            z_high_sample,
            self.z_high[0],
            self.z_high[1],
            "high decoder input",
        )?;
        let up = g.upsample2x(z_high_sample)?;
        let h = dec.block.forward(g, &self.store, up)?;
        dec.out.forward(g, &self.store, h)
    }

    /// Skip combination of the decoded high features with `E0_low` features.
    pub fn combine(&self, g: &mut Graph<T>, high: Var, skip: Var) -> Result<Var> {
        match self.skip_mode {
            SkipMode::Multiply => g.mul(high, skip),
            SkipMode::Concat => g.concat_channels(high, skip),
        }
    }

    /// `D0_low`: upsampling stack ending in `tanh`.
    pub fn decode_low(&self, g: &mut Graph<T>, h: Var) -> Result<Var> {
        let mut h = h;
        for s in &self.d0_low.stages {
            let up = g.upsample2x(h)?;
            h = s.forward(g, &self.store, up)?;
        }
        let out = self.d0_low.out.forward(g, &self.store, h)?;
        Ok(g.tanh(out))
    }

    /// Full decode. With the high path, `z` is the high-latent sample and
    /// `skip` (if any) is combined after `D0_high`; without it, `z` is the
    /// low-latent sample fed straight to `D0_low`. Returns `(x', D0_high
    /// output)`.
    pub fn decode(
        &self,
        g: &mut Graph<T>,
        z: Var,
        skip: Option<Var>,
    ) -> Result<(Var, Option<Var>)> {
        if !self.has_high_path() {
            self.check4(g, z, self.z_low[0], self.z_low[1], "low decoder input")?;
            return Ok((self.decode_low(g, z)?, None));
        }
        let high = self.decode_high(g, z)?;
        let h = match skip {
            Some(s) => self.combine(g, high, s)?,
            None => high,
        };
        Ok((self.decode_low(g, h)?, Some(high)))
    }

    /// Secondary encoders: `E1_low(x')` and `E1_high(D0_high output)`.
    pub fn reencode(
        &self,
        g: &mut Graph<T>,
        x_prime: Var,
        high_decoded: Option<Var>,
    ) -> Result<(Option<Var>, Option<Var>)> {
        let low = match &self.e1_low {
            Some(e) => {
                self.check4(
                    g,
                    x_prime,
                    self.channels,
                    self.image_size,
                    "low re-encoder input",
                )?;
                Some(e.forward(g, &self.store, x_prime)?.1.mean)
            }
            None => None,
        };
        let high = match (&self.e1_high, high_decoded) {
            (Some(e), Some(h)) => {
                self.check4(
                    g,
                    h,
                    self.skip_channels,
                    self.z_low[1],
                    "high re-encoder input",
                )?;
                Some(e.forward(g, &self.store, h)?.1.mean)
            }
            _ => None,
        };
        Ok((low, high))
    }

    /// Full generator pass. Infer mode uses posterior means and never binds
    /// a secondary-encoder parameter.
    pub fn generate(
        &self,
        g: &mut Graph<T>,
        x: Var,
        mode: GenMode,
        rng: &mut Rng,
    ) -> Result<GenVars> {
        let train = mode == GenMode::Train;
        let (z_low, skip) = self.encode_low(g, x)?;
        let z_low_sample = self.sample(g, z_low, train.then_some(&mut *rng))?;
        let (x_prime, z_high, z_high_sample, high_decoded) = if self.has_high_path() {
            let z_high = self.encode_high(g, z_low_sample)?;
            let zs = self.sample(g, z_high, train.then_some(&mut *rng))?;
            let (xp, hd) = self.decode(g, zs, Some(skip))?;
            (xp, Some(z_high), Some(zs), hd)
        } else {
            let (xp, _) = self.decode(g, z_low_sample, None)?;
            (xp, None, None, None)
        };
        let (z_prime_low, z_prime_high) = if train {
            self.reencode(g, x_prime, high_decoded)?
        } else {
            (None, None)
        };
        Ok(GenVars {
            x_prime,
            z_low,
            z_low_sample,
            skip,
            z_high,
            z_high_sample,
            high_decoded,
            z_prime_low,
            z_prime_high,
        })
    }

    /// Runs [`Generator::generate`] on a detached graph and returns values.
    pub fn run(&self, x: &Tensor<T>, mode: GenMode, rng: &mut Rng) -> Result<GenOutput<T>> {
        let mut g = Graph::new();
        g.freeze(&self.store);
        let xv = g.constant(x.clone());
        let v = self.generate(&mut g, xv, mode, rng)?;
        let latent = |g: &Graph<T>, z: LatentVars| GaussianLatent {
            mean: g.value(z.mean).clone(),
            logvar: z
                .logvar
                .map(|l| g.value(l).clone())
                .unwrap_or_else(|| Tensor::full(g.shape(z.mean), T::neg_infinity())),
        };
        Ok(GenOutput {
            x_prime: g.value(v.x_prime).clone(),
            z_low: latent(&g, v.z_low),
            z_high: v.z_high.map(|z| latent(&g, z)),
            z_low_sample: g.value(v.z_low_sample).clone(),
            z_high_sample: v.z_high_sample.map(|z| g.value(z).clone()),
            z_prime_low: v.z_prime_low.map(|z| g.value(z).clone()),
            z_prime_high: v.z_prime_high.map(|z| g.value(z).clone()),
        })
    }

    /// Reconstruction only (infer mode).
    pub fn reconstruct(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut rng = crate::rng::seeded_rng(0);
        Ok(self.run(x, GenMode::Infer, &mut rng)?.x_prime)
    }

    pub fn cast<U: Real>(&self) -> Generator<U> {
        Generator {
            store: self.store.cast(),
            e0_low: self.e0_low.clone(),
            e0_high: self.e0_high.clone(),
            d0_high: self.d0_high.clone(),
            d0_low: self.d0_low.clone(),
            e1_low: self.e1_low.clone(),
            e1_high: self.e1_high.clone(),
            skip_mode: self.skip_mode,
            channels: self.channels,
            image_size: self.image_size,
            z_low: self.z_low,
            z_high: self.z_high,
            skip_channels: self.skip_channels,
        }
    }
}
