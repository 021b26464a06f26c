//! Training objectives.
//!
//! Generator: `L = L_rec + L_adv + L_z_low + L_z_high` with no weighting.
//! Critic: `L_C = -ln C(x) - ln(1 - C(x'))`. Probabilities are clamped to
//! `[eps, 1 - eps]` before logarithms.

use alloc::format;
use alloc::string::String;

use crate::autograd::{Graph, Var};
use crate::config::{AdversarialForm, LossMode};
use crate::error::{Error, Result};
use crate::perceptual::{perceptual_loss, FeatureExtractor};
use crate::real::Real;

pub const PROB_EPS: f64 = 1e-7;

/// `-ln(eps)`, the largest value any clamped log-probability term can take.
pub fn log_cap() -> f64 {
    -libm::log(PROB_EPS)
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Per-sample L2 norm of `a - b`, batch-averaged, on the graph.
pub fn batch_l2<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let n = g.row_l2_norm(d);
    Ok(g.mean(n))
}

/// `L_rec`: pixel-wise L2 or perceptual distance, batch-averaged.
pub fn reconstruction_loss<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    x_prime: Var,
    mode: LossMode,
    extractor: Option<&FeatureExtractor<T>>,
) -> Result<Var> {
    match (mode, extractor) {
        (LossMode::Pwl, _) => batch_l2(g, x, x_prime),
        (_, Some(ex)) => perceptual_loss(g, ex, x, x_prime),
        (m, None) => Err(Error::MissingExtractor(m.as_str())),
    }
}

/// `L_z`: batch-averaged L2 distance between a latent and its re-encoding.
pub fn latent_loss<T: Real>(g: &mut Graph<T>, z0: Var, z1: Var) -> Result<Var> {
    batch_l2(g, z0, z1)
}

/// Generator adversarial term from critic logits on `x'`, batch-averaged.
pub fn adversarial_loss<T: Real>(g: &mut Graph<T>, logits_fake: Var, form: AdversarialForm) -> Var {
    let cap = T::of(log_cap());
    match form {
        AdversarialForm::NonSaturating => {
            let t = g.neg_log_sigmoid(logits_fake, cap);
            g.mean(t)
        }
        AdversarialForm::Minimax => {
            let t = g.neg_log_1m_sigmoid(logits_fake, cap);
            let m = g.mean(t);
            g.scale(m, -T::one())
        }
    }
}

/// Critic objective from logits on real and generated samples.
pub fn critic_loss<T: Real>(g: &mut Graph<T>, logits_real: Var, logits_fake: Var) -> Result<Var> {
    let cap = T::of(log_cap());
    let r = g.neg_log_sigmoid(logits_real, cap);
    let r = g.mean(r);
    let f = g.neg_log_1m_sigmoid(logits_fake, cap);
    let f = g.mean(f);
    g.add(r, f)
}

/// Scalar form of the generator objective for one critic probability.
pub fn generator_objective(l_rec: f64, c_x_prime: f64, l_z_low: f64, l_z_high: f64) -> Result<f64> {
    generator_objective_with(
        l_rec,
        c_x_prime,
        l_z_low,
        l_z_high,
        AdversarialForm::NonSaturating,
    )
}

pub fn generator_objective_with(
    l_rec: f64,
    c_x_prime: f64,
    l_z_low: f64,
    l_z_high: f64,
    form: AdversarialForm,
) -> Result<f64> {
    if !(c_x_prime > 0.0 && c_x_prime < 1.0) {
        return Err(Error::DomainError {
            what: "critic probability",
            value: c_x_prime,
        });
    }
    let c = clamp_prob(c_x_prime);
    let adv = match form {
        AdversarialForm::NonSaturating => -libm::log(c),
        AdversarialForm::Minimax => libm::log(1.0 - c),
    };
    Ok(l_rec + adv + l_z_low + l_z_high)
}

/// Scalar critic objective, batch-averaged over paired probabilities.
pub fn discriminator_objective(c_x: &[f64], c_x_prime: &[f64]) -> f64 {
    let real: f64 =
        c_x.iter().map(|&c| -libm::log(clamp_prob(c))).sum::<f64>() / c_x.len().max(1) as f64;
    let fake: f64 = c_x_prime
        .iter()
        .map(|&c| -libm::log(1.0 - clamp_prob(c)))
        .sum::<f64>()
        / c_x_prime.len().max(1) as f64;
    real + fake
}

/// Per-sample pixel-wise L2 distances.
pub fn pixel_distances<T: Real>(
    x: &crate::tensor::Tensor<T>,
    x_prime: &crate::tensor::Tensor<T>,
) -> Result<alloc::vec::Vec<f64>> {
    if x.shape() != x_prime.shape() {
        return Err(Error::shape("reconstruction", x.shape(), x_prime.shape()));
    }
    Ok((0..x.batch())
        .map(|i| {
            libm::sqrt(
                x.row(i)
                    .iter()
                    .zip(x_prime.row(i))
                    .map(|(a, b)| {
                        let d = a.as_f64() - b.as_f64();
                        d * d
                    })
                    .sum::<f64>(),
            )
        })
        .collect())
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub step: u64,
    pub l_rec: f64,
    pub l_adv_g: f64,
    pub l_z_low: f64,
    pub l_z_high: f64,
    pub l_total_g: f64,
    pub l_d: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "step,l_rec,l_adv_g,l_z_low,l_z_high,l_total_g,l_d";

    /// Values are written with round-trip precision.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.step,
            self.l_rec,
            self.l_adv_g,
            self.l_z_low,
            self.l_z_high,
            self.l_total_g,
            self.l_d
        )
    }

    pub fn parse_csv_row(line: &str) -> Option<Self> {
        let mut it = line.trim().split(',');
        let step = it.next()?.parse().ok()?;
        let mut f = || it.next()?.parse::<f64>().ok();
        let row = Self {
            step,
            l_rec: f()?,
            l_adv_g: f()?,
            l_z_low: f()?,
            l_z_high: f()?,
            l_total_g: f()?,
            l_d: f()?,
        };
        Some(row)
    }

    /// Largest relative difference over the loss fields.
    pub fn max_rel_diff(&self, other: &Self) -> f64 {
        let pairs = [
            (self.l_rec, other.l_rec),
            (self.l_adv_g, other.l_adv_g),
            (self.l_z_low, other.l_z_low),
            (self.l_z_high, other.l_z_high),
            (self.l_total_g, other.l_total_g),
            (self.l_d, other.l_d),
        ];
        pairs
            .iter()
            .map(|&(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-12))
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use alloc::vec;

    #[test]
    fn critic_objective_points() {
        let two_ln2 = 2.0 * core::f64::consts::LN_2;
        assert!((discriminator_objective(&[0.5], &[0.5]) - two_ln2).abs() < 1e-12);
        let oracle = -2.0 * libm::log(0.99);
        assert!((discriminator_objective(&[0.99], &[0.01]) - oracle).abs() < 1e-12);
        assert!((oracle - 0.0201).abs() < 1e-4);
        let perfect = discriminator_objective(&[1.0], &[0.0]);
        assert!(perfect >= 0.0 && perfect <= 2.0 * -libm::log(1.0 - PROB_EPS) + 1e-15);
    }

    #[test]
    fn generator_objective_points() {
        assert!(
            (generator_objective(0.0, 0.5, 0.0, 0.0).unwrap() - core::f64::consts::LN_2).abs()
                < 1e-12
        );
        let near_one = generator_objective(0.0, 1.0 - 1e-12, 0.0, 0.0).unwrap();
        assert!(near_one.abs() < 2e-7);
        let a = generator_objective(0.3, 0.4, 0.1, 0.2).unwrap();
        let b = generator_objective(1.3, 0.4, 0.1, 0.2).unwrap();
        assert!((b - a - 1.0).abs() < 1e-12);
        assert!(matches!(
            generator_objective(0.0, 1.0, 0.0, 0.0),
            Err(Error::DomainError { .. })
        ));
        assert!(matches!(
            generator_objective(0.0, 0.0, 0.0, 0.0),
            Err(Error::DomainError { .. })
        ));
    }

    #[test]
    fn graph_losses_match_scalar_forms() {
        let mut g = Graph::<f64>::new();
        let lr = g.constant(Tensor::from_vec(&[2], vec![0.3, -1.2]).unwrap());
        let lf = g.constant(Tensor::from_vec(&[2], vec![-0.4, 2.0]).unwrap());
        let c = critic_loss(&mut g, lr, lf).unwrap();
        let s = crate::discriminator::sigmoid;
        let oracle = discriminator_objective(&[s(0.3), s(-1.2)], &[s(-0.4), s(2.0)]);
        assert!((g.value(c).data()[0] - oracle).abs() < 1e-12);

        let adv = adversarial_loss(&mut g, lf, AdversarialForm::NonSaturating);
        let o = (-libm::log(s(-0.4)) - libm::log(s(2.0))) / 2.0;
        assert!((g.value(adv).data()[0] - o).abs() < 1e-12);
        let mm = adversarial_loss(&mut g, lf, AdversarialForm::Minimax);
        let o = (libm::log(1.0 - s(-0.4)) + libm::log(1.0 - s(2.0))) / 2.0;
        assert!((g.value(mm).data()[0] - o).abs() < 1e-12);
    }

    #[test]
    fn pwl_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap());
        let y = g.constant(Tensor::zeros(&[1, 2]));
        let l = reconstruction_loss(&mut g, x, y, LossMode::Pwl, None).unwrap();
        assert_eq!(g.value(l).data()[0], 1.0);
        let l0 = reconstruction_loss(&mut g, x, x, LossMode::Pwl, None).unwrap();
        assert_eq!(g.value(l0).data()[0], 0.0);
        assert_eq!(
            reconstruction_loss(&mut g, x, y, LossMode::PlProblemSpecific, None),
            Err(Error::MissingExtractor("pl-ps"))
        );
    }

    #[test]
    fn csv_round_trip() {
        let r = LossBreakdown {
            step: 3,
            l_rec: 0.1,
            l_adv_g: 0.7,
            l_z_low: 1.0 / 3.0,
            l_z_high: 2e-9,
            l_total_g: 1.1333,
            l_d: 1.38,
        };
        assert_eq!(LossBreakdown::parse_csv_row(&r.csv_row()), Some(r));
    }
}
