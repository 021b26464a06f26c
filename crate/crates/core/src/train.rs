//! Adversarial training: one critic update then one generator update per
//! batch, resumable from a [`Checkpoint`].

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::checkpoint::{push_config, read_config, Checkpoint, MetaValue};
use crate::config::RunConfig;
use crate::data::{batch_iter, DatasetHandle, Split};
use crate::discriminator::{attention_augment, Discriminator};
use crate::error::{Error, Result};
use crate::generator::{GenMode, GenVars, Generator};
use crate::image::{ImageBatch, Label};
use crate::losses::{
    adversarial_loss, critic_loss, latent_loss, reconstruction_loss, LossBreakdown,
};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::perceptual::FeatureExtractor;
use crate::rng::{substream, Rng, RngState};
use crate::tensor::Tensor;

/// Sub-networks whose gradient flow is tracked.
pub const COMPONENTS: [&str; 7] = [
    "e0_low", "e0_high", "d0_high", "d0_low", "e1_low", "e1_high", "critic",
];

/// Stream used for weight initialisation.
pub const INIT_STREAM: u64 = 1;
/// Stream used for sampling noise and augmentation during training.
pub const TRAIN_STREAM: u64 = 2;

pub struct TrainState {
    config: RunConfig,
    pub generator: Generator<f32>,
    pub critic: Discriminator<f32>,
    pub opt_g: Adam<f32>,
    pub opt_d: Adam<f32>,
    pub step: u64,
    pub epoch: u64,
    /// Batches of the current epoch already consumed.
    pub batch_in_epoch: u64,
    pub rng: Rng,
    /// Per component of [`COMPONENTS`], the number of steps in which it
    /// received a nonzero gradient.
    pub gradient_steps: [u64; COMPONENTS.len()],
}

/// Outcome of [`TrainState::fit`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FitStatus {
    Finished,
    StepLimit,
}

fn component_index(param: &str) -> Option<usize> {
    let head = param.split('.').next()?;
    COMPONENTS.iter().position(|c| *c == head)
}

fn record_gradients(
    counts: &mut [u64],
    store: &ParamStore<f32>,
    grads: &[Option<Tensor<f32>>],
    fixed: Option<usize>,
) {
    let mut hit = [false; COMPONENTS.len()];
    for (id, g) in store.ids().zip(grads) {
        let Some(g) = g else { continue };
        let Some(c) = fixed.or_else(|| component_index(store.name(id))) else {
            continue;
        };
        if g.data().iter().any(|&v| v != 0.0) {
            hit[c] = true;
        }
    }
    for (n, h) in counts.iter_mut().zip(hit) {
        *n += u64::from(h);
    }
}

fn scalar(g: &Graph<f32>, v: Var) -> f64 {
    f64::from(g.value(v).data()[0])
}

impl TrainState {
    /// Fresh state with weights drawn from the config seed.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut init = substream(config.seed, INIT_STREAM);
        let generator = Generator::new(&config, &mut init);
        let critic = Discriminator::new(&config, &mut init);
        let opt_g = Adam::new(
            &generator.store,
            config.lr_generator,
            config.adam_beta1,
            config.adam_beta2,
        );
        let opt_d = Adam::new(
            &critic.store,
            config.lr_discriminator,
            config.adam_beta1,
            config.adam_beta2,
        );
        Ok(Self {
            rng: substream(config.seed, TRAIN_STREAM),
            config,
            generator,
            critic,
            opt_g,
            opt_d,
            step: 0,
            epoch: 0,
            batch_in_epoch: 0,
            gradient_steps: [0; COMPONENTS.len()],
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    /// `(component, steps with nonzero gradient)` pairs.
    pub fn gradient_report(&self) -> Vec<(&'static str, u64)> {
        COMPONENTS
            .iter()
            .copied()
            .zip(self.gradient_steps)
            .collect()
    }

    fn check_normal(batch: &ImageBatch) -> Result<()> {
        match batch.labels().iter().position(|l| *l == Label::Anomalous) {
            Some(i) => Err(Error::AnomalousTrainingSample(batch.ids()[i].clone())),
            None => Ok(()),
        }
    }

    /// One critic phase and one generator phase on a normal-only batch.
    pub fn train_step(
        &mut self,
        batch: &ImageBatch,
        extractor: Option<&FeatureExtractor<f32>>,
    ) -> Result<LossBreakdown> {
        Self::check_normal(batch)?;
        let x = batch.data();
        let mut gg = Graph::new();
        gg.freeze(&self.critic.store);
        let xv = gg.constant(x.clone());
        let gv = self
            .generator
            .generate(&mut gg, xv, GenMode::Train, &mut self.rng)?;
        let x_prime = gg.value(gv.x_prime).clone();
        let mut l_d = 0.0;
        for _ in 0..self.config.d_steps {
            l_d = self.critic_update(x, &x_prime)?;
        }
        self.generator_phase(gg, xv, &gv, extractor, l_d)
    }

    /// Generator phase only, against the current frozen critic. `l_d` of
    /// the returned row is zero.
    pub fn generator_step(
        &mut self,
        batch: &ImageBatch,
        extractor: Option<&FeatureExtractor<f32>>,
    ) -> Result<LossBreakdown> {
        Self::check_normal(batch)?;
        let mut gg = Graph::new();
        gg.freeze(&self.critic.store);
        let xv = gg.constant(batch.data().clone());
        let gv = self
            .generator
            .generate(&mut gg, xv, GenMode::Train, &mut self.rng)?;
        self.generator_phase(gg, xv, &gv, extractor, 0.0)
    }

    /// One critic update on real `x` (augmented if configured) and detached
    /// reconstructions. Returns the critic loss. Never reads generator weights.
    pub fn critic_update(&mut self, x: &Tensor<f32>, x_prime: &Tensor<f32>) -> Result<f64> {
        let step = self.step + 1;
        let real = if self.config.attention_augment {
            let maps = self.critic.maps(x)?;
            attention_augment(x, &maps, &mut self.rng)?.0
        } else {
            x.clone()
        };
        let mut gd = Graph::new();
        let rv = gd.constant(real);
        let fv = gd.constant(x_prime.clone());
        let lr = self.critic.forward(&mut gd, rv)?.logits;
        let lf = self.critic.forward(&mut gd, fv)?.logits;
        let loss = critic_loss(&mut gd, lr, lf)?;
        let l_d = scalar(&gd, loss);
        if !l_d.is_finite() {
            return Err(Error::NonFiniteLoss { step, term: "l_d" });
        }
        let grads = gd.backward(loss)?.for_store(&self.critic.store);
        record_gradients(
            &mut self.gradient_steps,
            &self.critic.store,
            &grads,
            Some(COMPONENTS.len() - 1),
        );
        self.opt_d.step(&mut self.critic.store, &grads);
        Ok(l_d)
    }

    fn generator_phase(
        &mut self,
        mut gg: Graph<f32>,
        xv: Var,
        gv: &GenVars,
        extractor: Option<&FeatureExtractor<f32>>,
        l_d: f64,
    ) -> Result<LossBreakdown> {
        let step = self.step + 1;
        let cfg = &self.config;
        let l_rec = reconstruction_loss(&mut gg, xv, gv.x_prime, cfg.loss_mode, extractor)?;
        let fake = self.critic.forward(&mut gg, gv.x_prime)?.logits;
        let l_adv = adversarial_loss(&mut gg, fake, cfg.adversarial);
        let mut total = gg.add(l_rec, l_adv)?;
        let mut l_z_low = 0.0;
        if let Some(z1) = gv.z_prime_low {
            let l = latent_loss(&mut gg, gv.z_low_sample, z1)?;
            l_z_low = scalar(&gg, l);
            total = gg.add(total, l)?;
        }
        let mut l_z_high = 0.0;
        if let (Some(z0), Some(z1)) = (gv.z_high_sample, gv.z_prime_high) {
            let l = latent_loss(&mut gg, z0, z1)?;
            l_z_high = scalar(&gg, l);
            total = gg.add(total, l)?;
        }
        let row = LossBreakdown {
            step,
            l_rec: scalar(&gg, l_rec),
            l_adv_g: scalar(&gg, l_adv),
            l_z_low,
            l_z_high,
            l_total_g: scalar(&gg, total),
            l_d,
        };
        for (term, v) in [
            ("l_rec", row.l_rec),
            ("l_adv_g", row.l_adv_g),
            ("l_z", l_z_low + l_z_high),
            ("l_total_g", row.l_total_g),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { step, term });
            }
        }
        let grads = gg.backward(total)?.for_store(&self.generator.store);
        record_gradients(
            &mut self.gradient_steps,
            &self.generator.store,
            &grads,
            None,
        );
        self.opt_g.step(&mut self.generator.store, &grads);
        self.step = step;
        Ok(row)
    }

    /// Runs the remaining epochs, stopping early once `max_steps` total steps
    /// are reached. `on_step` sees the state after each step and may save it.
    pub fn fit<E, F>(
        &mut self,
        data: &DatasetHandle,
        extractor: Option<&FeatureExtractor<f32>>,
        max_steps: Option<u64>,
        mut on_step: F,
    ) -> core::result::Result<FitStatus, E>
    where
        E: From<Error>,
        F: FnMut(&TrainState, &LossBreakdown) -> core::result::Result<(), E>,
    {
        if self.config.loss_mode.needs_extractor() && extractor.is_none() {
            return Err(Error::MissingExtractor(self.config.loss_mode.as_str()).into());
        }
        data.validate()?;
        let epochs = self.config.epochs as u64;
        while self.epoch < epochs {
            let batches = batch_iter(
                data,
                Split::Train,
                self.config.batch_size,
                true,
                self.config.seed,
                self.epoch,
                self.config.channels,
            )?;
            for batch in batches.skip(self.batch_in_epoch as usize) {
                if max_steps.is_some_and(|m| self.step >= m) {
                    return Ok(FitStatus::StepLimit);
                }
                let row = self.train_step(&batch?, extractor)?;
                self.batch_in_epoch += 1;
                on_step(self, &row)?;
            }
            self.epoch += 1;
            self.batch_in_epoch = 0;
        }
        Ok(FitStatus::Finished)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push_meta("kind", MetaValue::Str("panda-train".into()));
        push_config(&mut ck, &self.config);
        ck.push_meta("step", MetaValue::U64(self.step));
        ck.push_meta("epoch", MetaValue::U64(self.epoch));
        ck.push_meta("batch_in_epoch", MetaValue::U64(self.batch_in_epoch));
        let rs = RngState::capture(&self.rng);
        ck.push_meta("rng.key", MetaValue::Bytes(rs.key.to_vec()));
        ck.push_meta("rng.stream", MetaValue::U64(rs.stream));
        ck.push_meta(
            "rng.word_pos",
            MetaValue::Bytes(rs.word_pos.to_le_bytes().to_vec()),
        );
        ck.push_meta("adam.gen.t", MetaValue::U64(self.opt_g.t));
        ck.push_meta("adam.disc.t", MetaValue::U64(self.opt_d.t));
        for (c, n) in self.gradient_report() {
            ck.push_meta(format!("grad_steps.{c}"), MetaValue::U64(n));
        }
        let mut push_store = |prefix: &str, store: &ParamStore<f32>, opt: &Adam<f32>| {
            for (i, (name, t)) in store.named().enumerate() {
                ck.push_tensor(format!("{prefix}/{name}"), t.clone());
                ck.push_tensor(format!("adam.{prefix}.m/{name}"), opt.m[i].clone());
                ck.push_tensor(format!("adam.{prefix}.v/{name}"), opt.v[i].clone());
            }
        };
        push_store("gen", &self.generator.store, &self.opt_g);
        push_store("disc", &self.critic.store, &self.opt_d);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut s = Self::new(read_config(ck)?)?;
        s.step = ck.meta_u64("step")?;
        s.epoch = ck.meta_u64("epoch")?;
        s.batch_in_epoch = ck.meta_u64("batch_in_epoch")?;
        let bytes = |k: &str| match ck.meta(k) {
            Some(MetaValue::Bytes(b)) => Ok(b.clone()),
            _ => Err(Error::CorruptCheckpoint(format!("missing `{k}`"))),
        };
        let key: [u8; 32] = bytes("rng.key")?
            .try_into()
            .map_err(|_| Error::CorruptCheckpoint("rng key length".into()))?;
        let pos: [u8; 16] = bytes("rng.word_pos")?
            .try_into()
            .map_err(|_| Error::CorruptCheckpoint("rng position length".into()))?;
        s.rng = RngState {
            key,
            stream: ck.meta_u64("rng.stream")?,
            word_pos: u128::from_le_bytes(pos),
        }
        .restore();
        s.opt_g.t = ck.meta_u64("adam.gen.t")?;
        s.opt_d.t = ck.meta_u64("adam.disc.t")?;
        for (i, c) in COMPONENTS.iter().enumerate() {
            s.gradient_steps[i] = ck.meta_u64(&format!("grad_steps.{c}"))?;
        }
        load_store(ck, "gen", &mut s.generator.store, &mut s.opt_g)?;
        load_store(ck, "disc", &mut s.critic.store, &mut s.opt_d)?;
        Ok(s)
    }

    pub fn save(&self) -> Vec<u8> {
        self.to_checkpoint().encode()
    }

    pub fn load(bytes: &[u8]) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::decode(bytes)?)
    }
}

fn load_store(
    ck: &Checkpoint,
    prefix: &str,
    store: &mut ParamStore<f32>,
    opt: &mut Adam<f32>,
) -> Result<()> {
    let weights: Vec<(String, Tensor<f32>)> = ck
        .tensors_with_prefix(prefix)
        .filter_map(|(n, t)| Some((n.strip_prefix('/')?.to_string(), t.clone())))
        .collect();
    store.load_named(weights.iter().map(|(n, t)| (n.as_str(), t.clone())))?;
    let names: Vec<String> = store.named().map(|(n, _)| n.to_string()).collect();
    for (i, name) in names.iter().enumerate() {
        let get = |kind: &str| {
            ck.tensor(&format!("adam.{prefix}.{kind}/{name}"))
                .cloned()
                .ok_or_else(|| {
                    Error::CorruptCheckpoint(format!(
                        "missing optimizer state for `{prefix}/{name}`"
                    ))
                })
        };
        opt.m[i] = get("m")?;
        opt.v[i] = get("v")?;
    }
    Ok(())
}

/// Generator and critic from a training checkpoint, ready for inference.
pub fn load_models(ck: &Checkpoint) -> Result<(RunConfig, Generator<f32>, Discriminator<f32>)> {
    let s = TrainState::from_checkpoint(ck)?;
    Ok((s.config, s.generator, s.critic))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_batch, synth_anomaly_dataset};

    fn tiny() -> RunConfig {
        RunConfig {
            image_size: 16,
            z_low_size: 4,
            gen_width: 2,
            disc_width: 4,
            backbone_stages: 2,
            attention_maps: 2,
            filter_bank: 4,
            z_low_channels: 4,
            z_high_channels: 4,
            batch_size: 4,
            epochs: 1,
            ..RunConfig::default()
        }
    }

    #[test]
    fn step_updates_both_networks() {
        let cfg = tiny();
        let data = synth_anomaly_dataset(0, 10, 2, 16);
        let mut st = TrainState::new(cfg).unwrap();
        let g0 = st.generator.store.clone();
        let d0 = st.critic.store.clone();
        let b: Vec<_> = data.split(Split::Train);
        let batch = make_batch(&b[..4], 3).unwrap();
        let row = st.train_step(&batch, None).unwrap();
        assert_eq!(row.step, 1);
        assert!(!st.generator.store.bitwise_eq(&g0));
        assert!(!st.critic.store.bitwise_eq(&d0));
    }

    #[test]
    fn anomalous_sample_rejected() {
        let data = synth_anomaly_dataset(0, 2, 2, 16);
        let mut st = TrainState::new(tiny()).unwrap();
        let t = data.split(Split::Test);
        let batch = make_batch(&t, 3).unwrap();
        assert!(matches!(
            st.train_step(&batch, None),
            Err(Error::AnomalousTrainingSample(_))
        ));
    }

    #[test]
    fn one_epoch_step_count() {
        let mut cfg = tiny();
        cfg.batch_size = 15;
        // 30 training normals out of 38.
        let data = synth_anomaly_dataset(0, 38, 1, 16);
        assert_eq!(data.train_normal.len(), 30);
        let mut st = TrainState::new(cfg).unwrap();
        let mut rows = 0;
        let status = st.fit::<Error, _>(&data, None, None, |_, _| {
            rows += 1;
            Ok(())
        });
        assert_eq!(status.unwrap(), FitStatus::Finished);
        assert_eq!(rows, 2);
    }
}
