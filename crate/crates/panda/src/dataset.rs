//! Folder datasets: `train/normal`, `test/normal`, `test/anomalous`,
//! optional `valid/{normal,anomalous}` and `test/masks/<name>.png`.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, RgbImage};
use panda_core::data::{DatasetHandle, RawImage, Sample};
use panda_core::image::Label;
use panda_core::Error;

use crate::error::{io_err, PandaError, Result};

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn decode(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| PandaError::UndecodableImage {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Decodes an image, resizes it to `size` x `size` and keeps one channel
/// for greyscale sources, three otherwise.
pub fn read_image(path: &Path, size: usize) -> Result<RawImage> {
    let img = decode(path)?;
    let img = if (img.width() as usize, img.height() as usize) != (size, size) {
        img.resize_exact(size as u32, size as u32, FilterType::Triangle)
    } else {
        img
    };
    let plane = size * size;
    if img.color().channel_count() <= 2 {
        let g = img.to_luma8();
        return Ok(RawImage::new(1, size, size, g.into_raw())?);
    }
    let rgb = img.to_rgb8().into_raw();
    let mut px = vec![0u8; 3 * plane];
    for (p, chunk) in rgb.chunks_exact(3).enumerate() {
        for c in 0..3 {
            px[c * plane + p] = chunk[c];
        }
    }
    Ok(RawImage::new(3, size, size, px)?)
}

/// Reads a single-channel mask; nonzero pixels are anomalous.
pub fn read_mask(path: &Path, size: usize) -> Result<Vec<u8>> {
    let img = decode(path)?.to_luma8();
    let img = if (img.width() as usize, img.height() as usize) != (size, size) {
        image::imageops::resize(&img, size as u32, size as u32, FilterType::Nearest)
    } else {
        img
    };
    Ok(img
        .into_raw()
        .into_iter()
        .map(|v| u8::from(v > 0))
        .collect())
}

fn load_split(
    root: &Path,
    split: &str,
    class: &str,
    label: Label,
    size: usize,
    masks: Option<&Path>,
) -> Result<Vec<Sample>> {
    let dir = root.join(split).join(class);
    let mut out = Vec::new();
    for path in image_files(&dir)? {
        let name = stem(&path);
        let mask = match masks {
            Some(m) => {
                let file = m.join(format!("{name}.png"));
                if file.is_file() {
                    Some(read_mask(&file, size)?)
                } else if label == Label::Normal {
                    Some(vec![0; size * size])
                } else {
                    None
                }
            }
            None => None,
        };
        out.push(Sample {
            id: format!("{split}/{class}/{name}"),
            label,
            image: read_image(&path, size)?,
            mask,
        });
    }
    Ok(out)
}

/// Loads a folder dataset, resizing every image to `image_size`.
pub fn load_folder_dataset(root: &Path, image_size: usize) -> Result<DatasetHandle> {
    for d in ["train/normal", "test/normal", "test/anomalous"] {
        let p = root.join(d);
        if !p.is_dir() {
            return Err(PandaError::MissingDirectory(p));
        }
    }
    let bad = root.join("train/anomalous");
    if bad.is_dir() {
        if let Some(f) = image_files(&bad)?.first() {
            return Err(Error::SemiSupervisedViolation(f.display().to_string()).into());
        }
    }
    let masks = root.join("test/masks");
    let masks = masks.is_dir().then_some(masks.as_path());
    let mut h = DatasetHandle {
        train_normal: load_split(root, "train", "normal", Label::Normal, image_size, None)?,
        test_normal: load_split(root, "test", "normal", Label::Normal, image_size, masks)?,
        test_anomalous: load_split(
            root,
            "test",
            "anomalous",
            Label::Anomalous,
            image_size,
            masks,
        )?,
        ..Default::default()
    };
    if root.join("valid/normal").is_dir() {
        h.valid_normal = load_split(root, "valid", "normal", Label::Normal, image_size, None)?;
    }
    if root.join("valid/anomalous").is_dir() {
        h.valid_anomalous = load_split(
            root,
            "valid",
            "anomalous",
            Label::Anomalous,
            image_size,
            None,
        )?;
    }
    h.validate()?;
    Ok(h)
}

/// Loads every decodable image of a directory as unlabeled samples.
pub fn load_image_dir(dir: &Path, image_size: usize) -> Result<Vec<Sample>> {
    if !dir.is_dir() {
        return Err(PandaError::MissingDirectory(dir.to_path_buf()));
    }
    image_files(dir)?
        .iter()
        .map(|p| {
            Ok(Sample {
                id: stem(p),
                label: Label::Unknown,
                image: read_image(p, image_size)?,
                mask: None,
            })
        })
        .collect()
}

fn to_dynamic(img: &RawImage) -> DynamicImage {
    let (w, h) = (img.width as u32, img.height as u32);
    if img.channels == 1 {
        return DynamicImage::ImageLuma8(
            GrayImage::from_raw(w, h, img.pixels.clone()).expect("sized"),
        );
    }
    let plane = img.width * img.height;
    let mut rgb = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            rgb.push(img.pixels[c * plane + p]);
        }
    }
    DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, rgb).expect("sized"))
}

pub fn write_png(img: &RawImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    to_dynamic(img)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| PandaError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e),
        })
}

/// Writes a dataset in the folder layout; masks of anomalous test samples
/// go to `test/masks` as 0/255 PNGs.
pub fn write_folder_dataset(h: &DatasetHandle, root: &Path) -> Result<()> {
    let groups = [
        ("train/normal", &h.train_normal),
        ("valid/normal", &h.valid_normal),
        ("valid/anomalous", &h.valid_anomalous),
        ("test/normal", &h.test_normal),
        ("test/anomalous", &h.test_anomalous),
    ];
    for (dir, samples) in groups {
        if samples.is_empty() && dir.starts_with("valid") {
            continue;
        }
        let d = root.join(dir);
        fs::create_dir_all(&d).map_err(io_err(&d))?;
        for s in samples {
            let name = s.id.rsplit('/').next().unwrap_or(&s.id);
            write_png(&s.image, &d.join(format!("{name}.png")))?;
            if let (Some(m), true) = (&s.mask, dir == "test/anomalous") {
                let px = m.iter().map(|&v| if v > 0 { 255 } else { 0 }).collect();
                let mask = RawImage::new(1, s.image.height, s.image.width, px)?;
                write_png(&mask, &root.join("test/masks").join(format!("{name}.png")))?;
            }
        }
    }
    Ok(())
}
