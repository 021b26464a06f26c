//! Per-sample anomaly masks and residual heatmaps as 8-bit PNGs.

use std::path::{Path, PathBuf};

use panda_core::data::{make_batch, RawImage, Sample};
use panda_core::generator::Generator;
use panda_core::scoring::{binarize, residual_map};
use panda_core::tensor::Tensor;

use crate::dataset::write_png;
use crate::error::Result;

/// File-system friendly form of a sample id.
pub fn file_stem(id: &str) -> String {
    id.replace(['/', '\\'], "_")
}

fn plane_png(plane: &[f32], h: usize, w: usize, scale: f32) -> Result<RawImage> {
    let px = plane
        .iter()
        .map(|&v| (v * scale).round().clamp(0.0, 255.0) as u8)
        .collect();
    Ok(RawImage::new(1, h, w, px)?)
}

/// Residual maps and binary masks of `samples`.
pub struct MaskSet {
    pub ids: Vec<String>,
    /// Smoothed residual maps `[n, 1, h, w]`.
    pub maps: Tensor<f32>,
    /// Binary masks `[n, 1, h, w]`.
    pub masks: Tensor<f32>,
}

pub fn compute_masks(
    generator: &Generator<f32>,
    samples: &[&Sample],
    channels: usize,
    fraction: f64,
    sigma: f64,
) -> Result<MaskSet> {
    let batch = make_batch(samples, channels)?;
    let x = batch.data();
    let x_prime = generator.reconstruct(x)?;
    let maps = residual_map(x, &x_prime, sigma)?;
    let masks = binarize(&maps, fraction);
    Ok(MaskSet {
        ids: batch.ids().to_vec(),
        maps,
        masks,
    })
}

/// Writes `<stem>_mask.png` (0/255) and, with `heatmaps`, `<stem>_heat.png`
/// scaled so each map's maximum is 255. Returns the written paths.
pub fn write_masks(set: &MaskSet, dir: &Path, heatmaps: bool) -> Result<Vec<PathBuf>> {
    let (_, _, h, w) = set.masks.dims4()?;
    let mut written = Vec::new();
    for (i, id) in set.ids.iter().enumerate() {
        let stem = file_stem(id);
        let mask = &set.masks.data()[i * h * w..(i + 1) * h * w];
        let p = dir.join(format!("{stem}_mask.png"));
        write_png(&plane_png(mask, h, w, 255.0)?, &p)?;
        written.push(p);
        if heatmaps {
            let map = &set.maps.data()[i * h * w..(i + 1) * h * w];
            let peak = map.iter().copied().fold(0.0f32, f32::max);
            let scale = if peak > 0.0 { 255.0 / peak } else { 0.0 };
            let p = dir.join(format!("{stem}_heat.png"));
            write_png(&plane_png(map, h, w, scale)?, &p)?;
            written.push(p);
        }
    }
    Ok(written)
}
