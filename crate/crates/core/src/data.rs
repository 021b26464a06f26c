//! Datasets: split handles, leave-one-out wrapping, a synthetic defect
//! generator and deterministic batching.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::image::{convert_channels, normalize_value, ImageBatch, Label};
use crate::rng::{substream, Rng};
use crate::tensor::Tensor;

/// Decoded 8-bit image, `[channels, height, width]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl RawImage {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != channels * height * width {
            return Err(Error::shape(
                "raw image",
                &[channels, height, width],
                &[pixels.len()],
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            pixels,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub label: Label,
    pub image: RawImage,
    /// Ground-truth mask `[height, width]`, 1 = anomalous pixel.
    pub mask: Option<Vec<u8>>,
}

/// The splits of one semi-supervised task. Training data is normal only.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetHandle {
    pub train_normal: Vec<Sample>,
    pub valid_normal: Vec<Sample>,
    pub valid_anomalous: Vec<Sample>,
    pub test_normal: Vec<Sample>,
    pub test_anomalous: Vec<Sample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl DatasetHandle {
    /// Checks the semi-supervised contract and id uniqueness.
    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self
            .train_normal
            .iter()
            .find(|s| s.label == Label::Anomalous)
        {
            return Err(Error::SemiSupervisedViolation(s.id.clone()));
        }
        if self.train_normal.is_empty() {
            return Err(Error::EmptyTrainSplit);
        }
        let mut seen = BTreeSet::new();
        for s in self.all() {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::DuplicateId(s.id.clone()));
            }
        }
        Ok(())
    }

    pub fn all(&self) -> impl Iterator<Item = &Sample> {
        self.train_normal
            .iter()
            .chain(&self.valid_normal)
            .chain(&self.valid_anomalous)
            .chain(&self.test_normal)
            .chain(&self.test_anomalous)
    }

    /// `(train, test normal, test anomalous)` counts.
    pub fn counts(&self) -> (usize, usize, usize) {
        (
            self.train_normal.len(),
            self.test_normal.len(),
            self.test_anomalous.len(),
        )
    }

    /// Samples of a split in lexicographic id order.
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        let mut v: Vec<&Sample> = match split {
            Split::Train => self.train_normal.iter().collect(),
            Split::Valid => self
                .valid_normal
                .iter()
                .chain(&self.valid_anomalous)
                .collect(),
            Split::Test => self
                .test_normal
                .iter()
                .chain(&self.test_anomalous)
                .collect(),
        };
        v.sort_by(|a, b| a.id.cmp(&b.id));
        v
    }
}

/// Sample of a multi-class labelled dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledSample {
    pub id: String,
    pub class: u32,
    pub image: RawImage,
}

/// Fraction of each normal class used for training.
pub const TRAIN_FRACTION: f64 = 0.8;

/// One class is anomalous and goes entirely to test; every other class is
/// split 80:20 (by id order) into train and test normal.
pub fn make_leave_one_out(
    samples: &[LabeledSample],
    anomalous_class: u32,
) -> Result<DatasetHandle> {
    if !samples.iter().any(|s| s.class == anomalous_class) {
        return Err(Error::UnknownClass(anomalous_class));
    }
    let classes: BTreeSet<u32> = samples.iter().map(|s| s.class).collect();
    let mut h = DatasetHandle::default();
    let to_sample = |s: &LabeledSample, label| Sample {
        id: s.id.clone(),
        label,
        image: s.image.clone(),
        mask: None,
    };
    for c in classes {
        let mut members: Vec<&LabeledSample> = samples.iter().filter(|s| s.class == c).collect();
        members.sort_by(|a, b| a.id.cmp(&b.id));
        if c == anomalous_class {
            h.test_anomalous
                .extend(members.iter().map(|s| to_sample(s, Label::Anomalous)));
            continue;
        }
        let n_train = libm::floor(members.len() as f64 * TRAIN_FRACTION) as usize;
        for (i, s) in members.iter().enumerate() {
            if i < n_train {
                h.train_normal.push(to_sample(s, Label::Normal));
            } else {
                h.test_normal.push(to_sample(s, Label::Normal));
            }
        }
    }
    h.validate()?;
    Ok(h)
}

/// Half peak-to-peak amplitude of the defect checkerboard, in grey levels.
pub const DEFECT_CONTRAST: i32 = 30;

/// Bounds on the defect area as a fraction of the image.
pub const DEFECT_AREA: (f64, f64) = (0.05, 0.15);

fn synth_background(rng: &mut Rng, s: usize) -> Vec<u8> {
    let tau = core::f64::consts::TAU;
    let mut px = Vec::with_capacity(3 * s * s);
    let fx: f64 = rng.random_range(0.5..1.5);
    let fy: f64 = rng.random_range(0.5..1.5);
    let p1: f64 = rng.random_range(0.0..tau);
    let p2: f64 = rng.random_range(0.0..tau);
    for _ in 0..3 {
        let base: f64 = rng.random_range(110.0..170.0);
        let amp: f64 = rng.random_range(15.0..35.0);
        for y in 0..s {
            for x in 0..s {
                let u = x as f64 / s as f64;
                let v = y as f64 / s as f64;
                let val = base + amp * libm::sin(tau * fx * u + p1) * libm::cos(tau * fy * v + p2);
                px.push(val.clamp(0.0, 255.0) as u8);
            }
        }
    }
    px
}

/// Draws the fixed L-shaped object with a small random offset.
fn draw_object(rng: &mut Rng, px: &mut [u8], s: usize) {
    let j = (s / 16).max(1) as i64;
    let dy = rng.random_range(-j..=j) as isize;
    let dx = rng.random_range(-j..=j) as isize;
    let f = |a: f64| (a * s as f64) as isize;
    let colour = [40u8, 45, 70];
    let rects = [
        (f(0.25), f(0.75), f(0.25), f(0.36)),
        (f(0.64), f(0.75), f(0.25), f(0.62)),
    ];
    for (y0, y1, x0, x1) in rects {
        for y in (y0 + dy).max(0)..(y1 + dy).min(s as isize) {
            for x in (x0 + dx).max(0)..(x1 + dx).min(s as isize) {
                for (c, &col) in colour.iter().enumerate() {
                    px[c * s * s + y as usize * s + x as usize] = col;
                }
            }
        }
    }
}

/// Rectangle `(y0, x0, h, w)` whose area fraction lies within [`DEFECT_AREA`].
fn defect_rect(rng: &mut Rng, s: usize) -> (usize, usize, usize, usize) {
    let total = (s * s) as f64;
    loop {
        let a: f64 = rng.random_range(0.06..0.14);
        let r: f64 = rng.random_range(0.7..1.4);
        let w = (libm::round(libm::sqrt(a * total * r)) as usize).clamp(1, s);
        let h = (libm::round(a * total / w as f64) as usize).clamp(1, s);
        let frac = (w * h) as f64 / total;
        if (DEFECT_AREA.0..=DEFECT_AREA.1).contains(&frac) {
            let y0 = rng.random_range(0..=s - h);
            let x0 = rng.random_range(0..=s - w);
            return (y0, x0, h, w);
        }
    }
}

/// Seeded synthetic task: smooth textured backgrounds with a fixed object;
/// anomalies add a high-frequency checkerboard patch covering 5-15% of the
/// image. 80% of the normal images form the training split, the remaining
/// normals and all anomalies the test split.
pub fn synth_anomaly_dataset(
    seed: u64,
    n_normal: usize,
    n_anomalous: usize,
    image_size: usize,
) -> DatasetHandle {
    let s = image_size;
    let n_train = libm::floor(n_normal as f64 * TRAIN_FRACTION) as usize;
    let mut h = DatasetHandle::default();
    for i in 0..n_normal {
        let mut rng = substream(seed, i as u64);
        let mut px = synth_background(&mut rng, s);
        draw_object(&mut rng, &mut px, s);
        let sample = Sample {
            id: format!("normal_{i:05}"),
            label: Label::Normal,
            image: RawImage::new(3, s, s, px).expect("sized"),
            mask: Some(alloc::vec![0; s * s]),
        };
        if i < n_train {
            h.train_normal.push(sample);
        } else {
            h.test_normal.push(sample);
        }
    }
    for i in 0..n_anomalous {
        let mut rng = substream(seed, (1 << 32) + i as u64);
        let mut px = synth_background(&mut rng, s);
        draw_object(&mut rng, &mut px, s);
        let (y0, x0, bh, bw) = defect_rect(&mut rng, s);
        let mut mask = alloc::vec![0u8; s * s];
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                let sign = if (x + y) % 2 == 0 { 1 } else { -1 };
                for c in 0..3 {
                    let p = &mut px[c * s * s + y * s + x];
                    *p = (i32::from(*p) + sign * DEFECT_CONTRAST).clamp(0, 255) as u8;
                }
                mask[y * s + x] = 1;
            }
        }
        h.test_anomalous.push(Sample {
            id: format!("anomalous_{i:05}"),
            label: Label::Anomalous,
            image: RawImage::new(3, s, s, px).expect("sized"),
            mask: Some(mask),
        });
    }
    h
}

/// Stream index for the shuffle of `epoch`, disjoint from model streams.
pub fn shuffle_stream(epoch: u64) -> u64 {
    (1 << 48) + epoch
}

/// Index batches over `n` items. Shuffled order is a pure function of
/// `(seed, epoch)`; otherwise items keep their given order.
pub fn batch_order(
    n: usize,
    batch_size: usize,
    shuffle: bool,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::range("train.batch_size", "must be >= 1"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    if shuffle {
        idx.shuffle(&mut substream(seed, shuffle_stream(epoch)));
    }
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Normalises samples into a batch with `channels` channels. Masks are
/// included only when every sample has one.
pub fn make_batch(samples: &[&Sample], channels: usize) -> Result<ImageBatch> {
    let first = samples
        .first()
        .ok_or_else(|| Error::EmptySplit("batch".into()))?;
    let (h, w) = (first.image.height, first.image.width);
    let plane = h * w;
    let mut data = Vec::with_capacity(samples.len() * channels * plane);
    let mut masks = Vec::new();
    let with_masks = samples.iter().all(|s| s.mask.is_some());
    for s in samples {
        if (s.image.height, s.image.width) != (h, w) {
            return Err(Error::shape(
                &format!("sample `{}`", s.id),
                &[h, w],
                &[s.image.height, s.image.width],
            ));
        }
        let px = convert_channels(&s.image.pixels, s.image.channels, channels, plane);
        data.extend(px.iter().map(|&v| normalize_value(v) as f32));
        if with_masks {
            masks.extend(
                s.mask
                    .as_ref()
                    .unwrap()
                    .iter()
                    .map(|&m| f32::from(u8::from(m > 0))),
            );
        }
    }
    let n = samples.len();
    let data = Tensor::from_vec(&[n, channels, h, w], data)?;
    let masks = if with_masks {
        Some(Tensor::from_vec(&[n, 1, h, w], masks)?)
    } else {
        None
    };
    ImageBatch::new(
        data,
        samples.iter().map(|s| s.label).collect(),
        samples.iter().map(|s| s.id.clone()).collect(),
        masks,
    )
}

/// One epoch of batches over a split.
pub fn batch_iter<'a>(
    handle: &'a DatasetHandle,
    split: Split,
    batch_size: usize,
    shuffle: bool,
    seed: u64,
    epoch: u64,
    channels: usize,
) -> Result<impl Iterator<Item = Result<ImageBatch>> + 'a> {
    let samples = handle.split(split);
    if samples.is_empty() {
        return Err(Error::EmptySplit(split.as_str().into()));
    }
    let order = batch_order(samples.len(), batch_size, shuffle, seed, epoch)?;
    Ok(order.into_iter().map(move |b| {
        let picked: Vec<&Sample> = b.iter().map(|&i| samples[i]).collect();
        make_batch(&picked, channels)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_sizes() {
        let o = batch_order(10, 3, false, 0, 0).unwrap();
        assert_eq!(o.iter().map(Vec::len).collect::<Vec<_>>(), [3, 3, 3, 1]);
        assert_eq!(o.concat(), (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn shuffles_differ_by_epoch_and_replay() {
        let a0 = batch_order(50, 7, true, 3, 0).unwrap().concat();
        let a1 = batch_order(50, 7, true, 3, 1).unwrap().concat();
        assert_ne!(a0, a1);
        assert_eq!(a0, batch_order(50, 7, true, 3, 0).unwrap().concat());
        assert_eq!(a1, batch_order(50, 7, true, 3, 1).unwrap().concat());
        let mut s = a0.clone();
        s.sort();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn synthetic_defects_have_bounded_area() {
        let h = synth_anomaly_dataset(1, 10, 30, 64);
        for s in &h.test_anomalous {
            let area = s.mask.as_ref().unwrap().iter().filter(|&&m| m == 1).count() as f64 / 4096.0;
            assert!((0.05..=0.15).contains(&area), "{area}");
        }
        for s in h.train_normal.iter().chain(&h.test_normal) {
            assert!(s.mask.as_ref().unwrap().iter().all(|&m| m == 0));
        }
        assert_eq!(h.counts(), (8, 2, 30));
        h.validate().unwrap();
    }
}
