//! Dataset ingestion, preprocessing, augmentation, and a deterministic
//! synthetic dataset generator for desk-scale runs.
//!
//! On-disk layout: `<root>/images/*.{jpg,png}` and `<root>/masks/*.png`,
//! stems matching one-to-one.

use crate::error::{Result, SodError};
use crate::losses::{alpha_weights, edge_map};
use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, RgbImage};
use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Per-channel normalization constants (pretrained-backbone convention).
pub const CHANNEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const CHANNEL_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// One training/eval record. All planes share the target resolution; `gt`
/// and `edge` are binary, `alpha = 1 + sigmoid(edge)`.
#[derive(Debug, Clone)]
pub struct Sample {
    pub stem: String,
    pub image: Array3<f64>,
    pub gt: Array2<f64>,
    pub edge: Array2<f64>,
    pub alpha: Array2<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub image_subdir: String,
    pub mask_subdir: String,
    /// (H, W)
    pub target_size: (usize, usize),
    /// Random horizontal flips (training only).
    pub augment: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            root: PathBuf::from("."),
            image_subdir: "images".into(),
            mask_subdir: "masks".into(),
            target_size: (352, 352),
            augment: false,
        }
    }
}

/// Scale an 8-bit RGB image to [0,1] and normalize per channel.
pub fn preprocess(rgb: &RgbImage) -> Array3<f64> {
    let (w, h) = rgb.dimensions();
    let mut out = Array3::<f64>::zeros((3, h as usize, w as usize));
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] =
                (px.0[c] as f64 / 255.0 - CHANNEL_MEAN[c]) / CHANNEL_STD[c];
        }
    }
    out
}

fn mask_to_binary(gray: &GrayImage) -> Array2<f64> {
    let (w, h) = gray.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        if gray.get_pixel(j as u32, i as u32).0[0] > 127 {
            1.0
        } else {
            0.0
        }
    })
}

fn list_stems(dir: &Path, exts: &[&str]) -> Result<BTreeMap<String, PathBuf>> {
    if !dir.is_dir() {
        return Err(SodError::Data(format!("missing directory: {}", dir.display())));
    }
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(ext) = path.extension().and_then(|e| e.to_str()) else {
            continue;
        };
        if !exts.contains(&ext.to_ascii_lowercase().as_str()) {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| SodError::Data(format!("bad filename: {}", path.display())))?;
        out.insert(stem.to_string(), path.clone());
    }
    Ok(out)
}

fn build_sample(stem: &str, image_path: &Path, mask_path: &Path, size: (usize, usize)) -> Result<Sample> {
    let (h, w) = size;
    let img = image::open(image_path)
        .map_err(|e| SodError::Data(format!("undecodable image {}: {e}", image_path.display())))?
        .to_rgb8();
    let img = DynamicImage::ImageRgb8(img)
        .resize_exact(w as u32, h as u32, FilterType::Triangle)
        .to_rgb8();
    let mask = image::open(mask_path)
        .map_err(|e| SodError::Data(format!("undecodable mask {}: {e}", mask_path.display())))?
        .to_luma8();
    // nearest keeps labels binary
    let mask = DynamicImage::ImageLuma8(mask)
        .resize_exact(w as u32, h as u32, FilterType::Nearest)
        .to_luma8();
    let gt = mask_to_binary(&mask);
    let edge = edge_map(&gt.view())?;
    let alpha = alpha_weights(&edge.view());
    Ok(Sample {
        stem: stem.to_string(),
        image: preprocess(&img),
        gt,
        edge,
        alpha,
    })
}

/// Load matched image/mask pairs in stable lexicographic stem order.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    let images = list_stems(&spec.root.join(&spec.image_subdir), &["jpg", "jpeg", "png"])?;
    let masks = list_stems(&spec.root.join(&spec.mask_subdir), &["png", "jpg", "jpeg"])?;
    let unpaired: Vec<&String> = images.keys().filter(|s| !masks.contains_key(*s)).collect();
    if !unpaired.is_empty() {
        return Err(SodError::Data(format!(
            "images without masks: {unpaired:?}"
        )));
    }
    let orphans: Vec<&String> = masks.keys().filter(|s| !images.contains_key(*s)).collect();
    if !orphans.is_empty() {
        return Err(SodError::Data(format!("masks without images: {orphans:?}")));
    }
    if images.is_empty() {
        return Err(SodError::Data(format!(
            "empty dataset under {}",
            spec.root.display()
        )));
    }
    images
        .iter()
        .map(|(stem, img_path)| build_sample(stem, img_path, &masks[stem], spec.target_size))
        .collect()
}

/// Mirror all planes horizontally.
pub fn hflip(sample: &Sample) -> Sample {
    let flip2 = |a: &Array2<f64>| {
        let w = a.shape()[1];
        Array2::from_shape_fn((a.shape()[0], w), |(i, j)| a[[i, w - 1 - j]])
    };
    let w = sample.image.shape()[2];
    let image = Array3::from_shape_fn(sample.image.raw_dim(), |(c, i, j)| {
        sample.image[[c, i, w - 1 - j]]
    });
    Sample {
        stem: sample.stem.clone(),
        image,
        gt: flip2(&sample.gt),
        edge: flip2(&sample.edge),
        alpha: flip2(&sample.alpha),
    }
}

/// Horizontal flip with probability 0.5, applied to all planes at once.
pub fn augment(sample: &Sample, rng: &mut ChaCha8Rng) -> Sample {
    if rng.gen::<bool>() {
        hflip(sample)
    } else {
        sample.clone()
    }
}

/// Stack samples into an (N,3,H,W) image batch plus (N,1,H,W) mask planes.
pub fn batch(samples: &[&Sample]) -> (ArrayD<f64>, crate::losses::MaskBatch) {
    let n = samples.len();
    let (h, w) = (samples[0].gt.shape()[0], samples[0].gt.shape()[1]);
    let mut images = ArrayD::<f64>::zeros(IxDyn(&[n, 3, h, w]));
    let mut gt = ArrayD::<f64>::zeros(IxDyn(&[n, 1, h, w]));
    let mut edge = ArrayD::<f64>::zeros(IxDyn(&[n, 1, h, w]));
    let mut alpha = ArrayD::<f64>::zeros(IxDyn(&[n, 1, h, w]));
    for (k, s) in samples.iter().enumerate() {
        images
            .index_axis_mut(Axis(0), k)
            .assign(&s.image.view().into_dyn());
        gt.index_axis_mut(Axis(0), k)
            .index_axis_move(Axis(0), 0)
            .assign(&s.gt);
        edge.index_axis_mut(Axis(0), k)
            .index_axis_move(Axis(0), 0)
            .assign(&s.edge);
        alpha
            .index_axis_mut(Axis(0), k)
            .index_axis_move(Axis(0), 0)
            .assign(&s.alpha);
    }
    (images, crate::losses::MaskBatch { gt, edge, alpha })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthManifest {
    pub seed: u64,
    pub n: usize,
    pub size: usize,
}

#[derive(Clone, Copy)]
enum Shape {
    Rect { y0: usize, x0: usize, y1: usize, x1: usize },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
}

impl Shape {
    fn contains(&self, y: usize, x: usize) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Ellipse { cy, cx, ry, rx } => {
                let dy = (y as f64 - cy) / ry;
                let dx = (x as f64 - cx) / rx;
                dy * dy + dx * dx <= 1.0
            }
        }
    }
}

fn random_shapes(rng: &mut ChaCha8Rng, size: usize) -> Array2<f64> {
    // rejection-sample until the foreground fraction lands in [0.05, 0.6]
    loop {
        let count = rng.gen_range(1..=2);
        let mut shapes = Vec::new();
        for _ in 0..count {
            let s = size as f64;
            if rng.gen::<bool>() {
                let h = rng.gen_range(size / 6..size / 2);
                let w = rng.gen_range(size / 6..size / 2);
                let y0 = rng.gen_range(0..size - h);
                let x0 = rng.gen_range(0..size - w);
                shapes.push(Shape::Rect { y0, x0, y1: y0 + h, x1: x0 + w });
            } else {
                shapes.push(Shape::Ellipse {
                    cy: rng.gen_range(0.2 * s..0.8 * s),
                    cx: rng.gen_range(0.2 * s..0.8 * s),
                    ry: rng.gen_range(0.08 * s..0.3 * s),
                    rx: rng.gen_range(0.08 * s..0.3 * s),
                });
            }
        }
        let mask = Array2::from_shape_fn((size, size), |(y, x)| {
            if shapes.iter().any(|sh| sh.contains(y, x)) {
                1.0
            } else {
                0.0
            }
        });
        let frac = mask.sum() / (size * size) as f64;
        if (0.05..=0.6).contains(&frac) {
            return mask;
        }
    }
}

/// Write `n` deterministic synthetic image/mask pairs (textured noise
/// background, 1-2 bright filled shapes) in the standard layout, plus a
/// `manifest.json` recording the generator parameters.
pub fn synth_dataset(root: &Path, seed: u64, n: usize, size: usize) -> Result<SynthManifest> {
    if n == 0 {
        return Err(SodError::Data("synth_dataset: n must be >= 1".into()));
    }
    if size % 32 != 0 {
        return Err(SodError::Data("synth_dataset: size must be a multiple of 32".into()));
    }
    let img_dir = root.join("images");
    let mask_dir = root.join("masks");
    std::fs::create_dir_all(&img_dir)?;
    std::fs::create_dir_all(&mask_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..n {
        let mask = random_shapes(&mut rng, size);
        // dark textured background, bright foreground: contrast guaranteed
        let bg: [f64; 3] = [
            rng.gen_range(20.0..110.0),
            rng.gen_range(20.0..110.0),
            rng.gen_range(20.0..110.0),
        ];
        let fg: [f64; 3] = [
            rng.gen_range(160.0..250.0),
            rng.gen_range(160.0..250.0),
            rng.gen_range(160.0..250.0),
        ];
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let freq = rng.gen_range(0.1..0.4);
        let mut img = RgbImage::new(size as u32, size as u32);
        let mut out_mask = GrayImage::new(size as u32, size as u32);
        for y in 0..size {
            for x in 0..size {
                let texture = 12.0 * ((x as f64 * freq + phase).sin() + (y as f64 * freq).cos());
                let noise: f64 = rng.gen_range(-10.0..10.0);
                let base = if mask[[y, x]] > 0.0 { fg } else { bg };
                let px = [
                    (base[0] + texture + noise).clamp(0.0, 255.0) as u8,
                    (base[1] + texture + noise).clamp(0.0, 255.0) as u8,
                    (base[2] + texture + noise).clamp(0.0, 255.0) as u8,
                ];
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
                out_mask.put_pixel(
                    x as u32,
                    y as u32,
                    image::Luma([if mask[[y, x]] > 0.0 { 255 } else { 0 }]),
                );
            }
        }
        img.save(img_dir.join(format!("synth_{k:04}.png")))?;
        out_mask.save(mask_dir.join(format!("synth_{k:04}.png")))?;
    }
    let manifest = SynthManifest { seed, n, size };
    std::fs::write(
        root.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).map_err(|e| SodError::Data(e.to_string()))?,
    )?;
    Ok(manifest)
}
