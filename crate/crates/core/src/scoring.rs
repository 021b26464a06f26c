//! Anomaly scores, normalisation, decision boundary and pixel masks.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::config::LossMode;
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::image::{ImageBatch, Label};
use crate::losses::pixel_distances;
use crate::perceptual::{perceptual_distances, FeatureExtractor};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRecord {
    pub id: String,
    pub recon_err: f64,
    pub c_x: f64,
    pub c_x_prime: f64,
    pub combined: f64,
    pub normalized: f64,
    pub label: Label,
}

impl ScoreRecord {
    /// Components oriented so larger means more anomalous.
    pub fn components(&self) -> [f64; 3] {
        [self.recon_err, 1.0 - self.c_x, 1.0 - self.c_x_prime]
    }
}

/// Reconstruction error and critic scores of every sample, with frozen
/// models. `combined` and `normalized` are left at zero.
pub fn raw_scores(
    batch: &ImageBatch,
    generator: &Generator<f32>,
    critic: &Discriminator<f32>,
    mode: LossMode,
    extractor: Option<&FeatureExtractor<f32>>,
) -> Result<Vec<ScoreRecord>> {
    let x = batch.data();
    let x_prime = generator.reconstruct(x)?;
    let recon = match (mode, extractor) {
        (LossMode::Pwl, _) => pixel_distances(x, &x_prime)?,
        (_, Some(ex)) => perceptual_distances(ex, x, &x_prime)?,
        (m, None) => return Err(Error::MissingExtractor(m.as_str())),
    };
    let cx = critic.discriminate(x)?.probs;
    let cxp = critic.discriminate(&x_prime)?.probs;
    Ok((0..batch.len())
        .map(|i| ScoreRecord {
            id: batch.ids()[i].clone(),
            recon_err: recon[i],
            c_x: cx[i],
            c_x_prime: cxp[i],
            combined: 0.0,
            normalized: 0.0,
            label: batch.labels()[i],
        })
        .collect())
}

/// `combined = w0 * recon_err + w1 * (1 - c_x) + w2 * (1 - c_x')`.
pub fn combine_scores(records: &mut [ScoreRecord], weights: [f64; 3]) {
    for r in records {
        let c = r.components();
        r.combined = weights[0] * c[0] + weights[1] * c[1] + weights[2] * c[2];
    }
}

/// Min / max of a calibration population, reusable for streaming scores.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyList);
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self { min, max })
    }

    /// `(v - min) / (max - min)` clamped to `[0, 1]`; a degenerate range maps to 0.5.
    pub fn apply(&self, v: f64) -> f64 {
        if self.max > self.min {
            if v == self.min {
                0.0
            } else if v == self.max {
                1.0
            } else {
                ((v - self.min) / (self.max - self.min)).clamp(0.0, 1.0)
            }
        } else {
            0.5
        }
    }
}

pub fn minmax_normalize(values: &[f64]) -> Result<Vec<f64>> {
    let mm = MinMax::fit(values)?;
    Ok(values.iter().map(|&v| mm.apply(v)).collect())
}

/// Normalises `combined` over the given population and stores it in
/// `normalized`. Returns the fitted range.
pub fn normalize_records(records: &mut [ScoreRecord]) -> Result<MinMax> {
    let values: Vec<f64> = records.iter().map(|r| r.combined).collect();
    let mm = MinMax::fit(&values)?;
    for r in records {
        r.normalized = mm.apply(r.combined);
    }
    Ok(mm)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, libm::sqrt(var))
}

/// Point where the densities `N(m0, s0)` and `N(m1, s1)` are equal: the real
/// root in `[0, 1]` closest to the midpoint of the means.
pub fn equal_likelihood_boundary(m0: f64, s0: f64, m1: f64, s1: f64) -> f64 {
    let s0 = s0.max(1e-9);
    let s1 = s1.max(1e-9);
    let (v0, v1) = (s0 * s0, s1 * s1);
    let a = 0.5 / v0 - 0.5 / v1;
    let b = m1 / v1 - m0 / v0;
    let c = m0 * m0 / (2.0 * v0) - m1 * m1 / (2.0 * v1) + libm::log(s0 / s1);
    let mid = 0.5 * (m0 + m1);
    let roots: Vec<f64> = if a.abs() <= 1e-12 * (0.5 / v0).max(0.5 / v1) {
        if b == 0.0 {
            vec![]
        } else {
            vec![-c / b]
        }
    } else {
        let disc = b * b - 4.0 * a * c;
        if disc < 0.0 {
            vec![]
        } else {
            let q = -0.5 * (b + b.signum() * libm::sqrt(disc));
            let mut r = vec![q / a];
            if q != 0.0 {
                r.push(c / q);
            }
            r
        }
    };
    let by_mid = |a: &&f64, b: &&f64| (**a - mid).abs().total_cmp(&(**b - mid).abs());
    roots
        .iter()
        .filter(|r| (0.0..=1.0).contains(*r))
        .min_by(by_mid)
        .copied()
        .unwrap_or_else(|| {
            roots
                .iter()
                .min_by(by_mid)
                .copied()
                .unwrap_or(mid)
                .clamp(0.0, 1.0)
        })
}

/// Decision boundary on normalised scores. With both labels present, the
/// equal-likelihood point of one Gaussian per label; with normal samples
/// only, `mean + 3 sigma` of the normal scores. Unknown labels are ignored.
pub fn decide_threshold(scores: &[f64], labels: &[Label]) -> Result<f64> {
    let pick = |l: Label| -> Vec<f64> {
        scores
            .iter()
            .zip(labels)
            .filter(|(_, &k)| k == l)
            .map(|(&s, _)| s)
            .collect()
    };
    let normal = pick(Label::Normal);
    let anomalous = pick(Label::Anomalous);
    if normal.len() < 2 {
        return Err(Error::InsufficientData(alloc::format!(
            "need at least 2 normal calibration scores, got {}",
            normal.len()
        )));
    }
    let (m0, s0) = mean_std(&normal);
    if anomalous.is_empty() {
        return Ok((m0 + 3.0 * s0).clamp(0.0, 1.0));
    }
    if anomalous.len() < 2 {
        return Err(Error::InsufficientData(alloc::format!(
            "need at least 2 anomalous calibration scores, got {}",
            anomalous.len()
        )));
    }
    let (m1, s1) = mean_std(&anomalous);
    Ok(equal_likelihood_boundary(m0, s0, m1, s1))
}

/// Default Gaussian smoothing of residual maps, in pixels.
pub const MASK_SIGMA: f64 = 2.0;

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = libm::ceil(3.0 * sigma) as isize;
    (-r..=r)
        .map(|d| libm::exp(-((d * d) as f64) / (2.0 * sigma * sigma)))
        .collect()
}

/// Separable Gaussian blur with the kernel renormalised at the border.
pub fn gaussian_smooth(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (mut acc, mut wsum) = (0.0, 0.0);
                for (j, &kv) in k.iter().enumerate() {
                    let d = j as isize - r;
                    let (yy, xx) = if horizontal {
                        (y as isize, x as isize + d)
                    } else {
                        (y as isize + d, x as isize)
                    };
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    acc += kv * src[yy as usize * w + xx as usize];
                    wsum += kv;
                }
                out[y * w + x] = acc / wsum;
            }
        }
        out
    };
    let tmp = pass(plane, true);
    pass(&tmp, false)
}

/// Channel-summed absolute residual `|x - x'|` per sample, smoothed:
/// `[n, c, h, w]` to `[n, 1, h, w]`. This is the unthresholded heatmap.
pub fn residual_map(x: &Tensor<f32>, x_prime: &Tensor<f32>, sigma: f64) -> Result<Tensor<f32>> {
    if x.shape() != x_prime.shape() {
        return Err(Error::shape("anomaly mask", x.shape(), x_prime.shape()));
    }
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let mut out = Vec::with_capacity(n * plane);
    for i in 0..n {
        let (a, b) = (x.row(i), x_prime.row(i));
        let mut r = vec![0.0f64; plane];
        for ch in 0..c {
            for p in 0..plane {
                r[p] += (f64::from(a[ch * plane + p]) - f64::from(b[ch * plane + p])).abs();
            }
        }
        out.extend(
            gaussian_smooth(&r, h, w, sigma)
                .into_iter()
                .map(|v| v as f32),
        );
    }
    Tensor::from_vec(&[n, 1, h, w], out)
}

/// Binarises each map at `fraction * max`; only strictly positive pixels
/// can be set, so `fraction = 0` yields the support of the map.
pub fn binarize(maps: &Tensor<f32>, fraction: f64) -> Tensor<f32> {
    let n = maps.batch();
    let mut out = maps.clone();
    for i in 0..n {
        let row = maps.row(i);
        let peak = row.iter().copied().fold(0.0f32, f32::max);
        let thr = (fraction * f64::from(peak)) as f32;
        let len = row.len();
        for (o, &v) in out.data_mut()[i * len..(i + 1) * len].iter_mut().zip(row) {
            *o = if v > 0.0 && v >= thr { 1.0 } else { 0.0 };
        }
    }
    out
}

/// Binary anomaly masks `[n, 1, h, w]` from a reconstruction.
pub fn anomaly_mask(
    x: &Tensor<f32>,
    x_prime: &Tensor<f32>,
    threshold_fraction: f64,
    sigma: f64,
) -> Result<Tensor<f32>> {
    Ok(binarize(
        &residual_map(x, x_prime, sigma)?,
        threshold_fraction,
    ))
}

/// Intersection over union of two binary planes; two empty masks score 1.
pub fn mask_iou(pred: &[f32], truth: &[f32]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        let (p, t) = (p > 0.5, t > 0.5);
        inter += usize::from(p && t);
        union += usize::from(p || t);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(r: f64, cx: f64, cxp: f64) -> ScoreRecord {
        ScoreRecord {
            id: String::new(),
            recon_err: r,
            c_x: cx,
            c_x_prime: cxp,
            combined: 0.0,
            normalized: 0.0,
            label: Label::Unknown,
        }
    }

    #[test]
    fn combination_examples() {
        // components (0.2, 0.3, 0.1)
        let mut rs = vec![rec(0.2, 0.7, 0.9)];
        combine_scores(&mut rs, [1.0, 1.0, 1.0]);
        assert!((rs[0].combined - 0.6).abs() < 1e-12);
        combine_scores(&mut rs, [1.0, 0.0, 0.0]);
        assert_eq!(rs[0].combined, 0.2);
    }

    #[test]
    fn minmax_examples() {
        assert_eq!(
            minmax_normalize(&[2.0, 4.0, 6.0]).unwrap(),
            vec![0.0, 0.5, 1.0]
        );
        assert_eq!(minmax_normalize(&[5.0, 5.0, 5.0]).unwrap(), vec![0.5; 3]);
        assert_eq!(minmax_normalize(&[0.0, 1.0]).unwrap(), vec![0.0, 1.0]);
        assert_eq!(minmax_normalize(&[]), Err(Error::EmptyList));
    }

    #[test]
    fn threshold_examples() {
        assert!((equal_likelihood_boundary(0.2, 0.1, 0.8, 0.1) - 0.5).abs() < 1e-12);
        // normal-only: mean 0.1, sample std 0.05
        let h = 0.05 / libm::sqrt(2.0);
        let t = decide_threshold(&[0.1 - h, 0.1 + h], &[Label::Normal, Label::Normal]).unwrap();
        assert!((t - 0.25).abs() < 1e-12, "{t}");
        assert!(matches!(
            decide_threshold(&[0.3], &[Label::Normal]),
            Err(Error::InsufficientData(_))
        ));
        let t = decide_threshold(
            &[0.1, 0.3, 0.7, 0.9],
            &[
                Label::Normal,
                Label::Normal,
                Label::Anomalous,
                Label::Anomalous,
            ],
        )
        .unwrap();
        assert!((t - 0.5).abs() < 1e-12);
    }

    #[test]
    fn unequal_variance_boundary_equalises_densities() {
        let (m0, s0, m1, s1) = (0.2, 0.05, 0.7, 0.2);
        let t = equal_likelihood_boundary(m0, s0, m1, s1);
        let pdf = |x: f64, m: f64, s: f64| libm::exp(-(x - m) * (x - m) / (2.0 * s * s)) / s;
        assert!(t > m0 && t < m1);
        assert!((pdf(t, m0, s0) - pdf(t, m1, s1)).abs() < 1e-9);
    }

    #[test]
    fn impulse_mask_support() {
        let (h, w) = (21, 21);
        let x = Tensor::<f32>::zeros(&[1, 1, h, w]);
        let mut xp = x.clone();
        xp.data_mut()[10 * w + 10] = 1.0;
        let m = anomaly_mask(&x, &xp, 0.5, 2.0).unwrap();
        // smoothed impulse exceeds half its peak where dx^2 + dy^2 <= 2 sigma^2 ln 2
        let r2 = 2.0 * 4.0 * core::f64::consts::LN_2;
        for y in 0..h {
            for xx in 0..w {
                let d2 = (y as f64 - 10.0).powi(2) + (xx as f64 - 10.0).powi(2);
                let on = m.data()[y * w + xx] == 1.0;
                assert_eq!(on, d2 <= r2, "({y}, {xx})");
            }
        }
        let support = anomaly_mask(&x, &xp, 0.0, 2.0).unwrap();
        for y in 0..h {
            for xx in 0..w {
                let inside = y.abs_diff(10) <= 6 && xx.abs_diff(10) <= 6;
                assert_eq!(support.data()[y * w + xx] == 1.0, inside);
            }
        }
        let none = anomaly_mask(&x, &x, 0.5, 2.0).unwrap();
        assert!(none.data().iter().all(|&v| v == 0.0));
    }
}
