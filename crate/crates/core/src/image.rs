//! Image normalisation and the batch type fed to every network.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Normal,
    Anomalous,
    Unknown,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Anomalous => "anomalous",
            Label::Unknown => "unknown",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "normal" => Some(Label::Normal),
            "anomalous" => Some(Label::Anomalous),
            "unknown" => Some(Label::Unknown),
            _ => None,
        }
    }
}

/// Maps 8-bit pixels to `[-1, 1]`: `v -> (v/255 - 0.5) / 0.5`.
pub fn normalize_image(raw: &[u8], shape: [usize; 3]) -> Result<Tensor<f32>> {
    let data = raw.iter().map(|&v| normalize_value(v) as f32).collect();
    Tensor::from_vec(&shape, data)
}

pub fn normalize_value(v: u8) -> f64 {
    (f64::from(v) / 255.0 - 0.5) / 0.5
}

/// Inverse of [`normalize_value`], rounded and saturated to 8 bits.
pub fn denormalize_value(v: f64) -> u8 {
    let p = (v * 0.5 + 0.5) * 255.0;
    if p.is_nan() {
        return 0;
    }
    let r = libm::round(p);
    r.clamp(0.0, 255.0) as u8
}

pub fn denormalize_image(t: &Tensor<f32>) -> Vec<u8> {
    t.data()
        .iter()
        .map(|&v| denormalize_value(f64::from(v)))
        .collect()
}

/// Converts a `[c_in, h, w]` 8-bit image to `c_out` channels: grayscale is
/// replicated, colour collapses to the channel mean.
pub fn convert_channels(raw: &[u8], c_in: usize, c_out: usize, plane: usize) -> Vec<u8> {
    if c_in == c_out {
        return raw.to_vec();
    }
    if c_in == 1 {
        let mut out = Vec::with_capacity(plane * c_out);
        for _ in 0..c_out {
            out.extend_from_slice(&raw[..plane]);
        }
        return out;
    }
    let mut mean = Vec::with_capacity(plane);
    for p in 0..plane {
        let s: u32 = (0..c_in).map(|c| u32::from(raw[c * plane + p])).sum();
        mean.push(((s + c_in as u32 / 2) / c_in as u32) as u8);
    }
    convert_channels(&mean, 1, c_out, plane)
}

/// Normalised image batch with per-sample provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    data: Tensor<f32>,
    labels: Vec<Label>,
    ids: Vec<String>,
    masks: Option<Tensor<f32>>,
}

impl ImageBatch {
    pub fn new(
        data: Tensor<f32>,
        labels: Vec<Label>,
        ids: Vec<String>,
        masks: Option<Tensor<f32>>,
    ) -> Result<Self> {
        let (n, _, h, w) = data.dims4()?;
        if n == 0 {
            return Err(Error::shape("image batch", &[1], &[0]));
        }
        if labels.len() != n || ids.len() != n {
            return Err(Error::shape(
                "batch labels/ids",
                &[n, n],
                &[labels.len(), ids.len()],
            ));
        }
        if let Some(m) = &masks {
            if m.shape() != [n, 1, h, w] {
                return Err(Error::shape("batch masks", &[n, 1, h, w], m.shape()));
            }
        }
        if let Some(&v) = data.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::DomainError {
                what: "normalized pixel",
                value: f64::from(v),
            });
        }
        Ok(Self {
            data,
            labels,
            ids,
            masks,
        })
    }

    /// Batch of unlabelled images.
    pub fn unlabeled(data: Tensor<f32>) -> Result<Self> {
        let n = data.batch();
        let ids = (0..n).map(|i| alloc::format!("{i}")).collect();
        Self::new(data, alloc::vec![Label::Unknown; n], ids, None)
    }

    pub fn data(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn masks(&self) -> Option<&Tensor<f32>> {
        self.masks.as_ref()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Bilinear sample of a `[h, w]` plane at fractional `(y, x)`, clamped to
/// the border.
pub fn sample_bilinear(plane: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = libm::floor(y) as usize;
    let x0 = libm::floor(x) as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |r: usize, c: usize| f64::from(plane[r * w + c]);
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    (top * (1.0 - fy) + bot * fy) as f32
}

/// Resizes the `[y0, y0 + bh) x [x0, x0 + bw)` window of a plane to
/// `[out_h, out_w]` with half-pixel-centre bilinear sampling.
#[allow(clippy::too_many_arguments)]
pub fn resize_window(
    plane: &[f32],
    h: usize,
    w: usize,
    (y0, x0, bh, bw): (usize, usize, usize, usize),
    out_h: usize,
    out_w: usize,
) -> Vec<f32> {
    let sy = bh as f64 / out_h as f64;
    let sx = bw as f64 / out_w as f64;
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let y = (y0 as f64 + (oy as f64 + 0.5) * sy - 0.5).clamp(y0 as f64, (y0 + bh - 1) as f64);
        for ox in 0..out_w {
            let x =
                (x0 as f64 + (ox as f64 + 0.5) * sx - 0.5).clamp(x0 as f64, (x0 + bw - 1) as f64);
            out.push(sample_bilinear(plane, h, w, y, x));
        }
    }
    out
}

/// Whole-plane bilinear resize.
pub fn resize_plane(plane: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    resize_window(plane, h, w, (0, 0, h, w), out_h, out_w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn normalisation_endpoints() {
        assert_eq!(normalize_value(0), -1.0);
        assert_eq!(normalize_value(255), 1.0);
        let oracle = (128.0 / 255.0 - 0.5) / 0.5;
        assert!((normalize_value(128) - oracle).abs() < 1e-15);
        assert!((normalize_value(128) - 0.003_921_568_627_45).abs() < 1e-12);
    }

    #[test]
    fn round_trip_all_bytes() {
        for v in 0..=255u8 {
            assert_eq!(denormalize_value(normalize_value(v)), v);
            let f = normalize_value(v) as f32;
            assert_eq!(denormalize_value(f64::from(f)), v);
        }
    }

    #[test]
    fn channel_conversion() {
        assert_eq!(convert_channels(&[1, 2], 1, 3, 2), vec![1, 2, 1, 2, 1, 2]);
        assert_eq!(
            convert_channels(&[0, 30, 3, 30, 6, 31], 3, 1, 2),
            vec![3, 30]
        );
    }

    #[test]
    fn resize_identity_and_constant() {
        let p: Vec<f32> = (0..12).map(|v| v as f32).collect();
        assert_eq!(resize_plane(&p, 3, 4, 3, 4), p);
        let c = vec![0.25f32; 16];
        assert!(resize_plane(&c, 4, 4, 9, 7).iter().all(|&v| v == 0.25));
        assert_eq!(
            resize_plane(&[1.0, 3.0], 1, 2, 1, 4),
            vec![1.0, 1.5, 2.5, 3.0]
        );
    }

    #[test]
    fn batch_invariants() {
        let t = Tensor::<f32>::zeros(&[2, 1, 4, 4]);
        let ids = vec!["a".into(), "b".into()];
        assert!(ImageBatch::new(t.clone(), vec![Label::Normal], ids.clone(), None).is_err());
        let bad = Tensor::<f32>::zeros(&[2, 1, 4, 3]);
        assert!(
            ImageBatch::new(t.clone(), vec![Label::Normal; 2], ids.clone(), Some(bad)).is_err()
        );
        let out = Tensor::<f32>::full(&[2, 1, 4, 4], 1.5);
        assert!(ImageBatch::new(out, vec![Label::Normal; 2], ids.clone(), None).is_err());
        assert!(ImageBatch::new(t, vec![Label::Normal; 2], ids, None).is_ok());
    }
}
