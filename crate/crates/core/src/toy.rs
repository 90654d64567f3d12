//! Built-in two-class synthetic dataset: 8x8 grayscale "disk" and "stripe".

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;

use crate::captioner::{aio_caption, stub_caption};
use crate::error::{Error, Result};
use crate::manifest::{CaptionKind, CaptionRecord, DatasetManifest, ImageRecord};
use crate::raster::Raster;
use crate::rng::{lane, SplitMix64};

pub const TOY_SIZE: usize = 8;
pub const TOY_CLASSES: [&str; 2] = ["disk", "stripe"];

const DARK: f64 = -0.8;
const BRIGHT: f64 = 0.8;

/// One toy image of class `class` (index into `TOY_CLASSES`).
///
/// Disk: bright disk of radius in `[2.0, 2.6]` around a center jittered by
/// up to half a pixel. Stripe: vertical band of half-width in `[0.9, 1.3]`
/// around a column jittered by up to one pixel. Both get a brightness offset
/// in `±0.1` and per-pixel noise in `±0.05`, then go through 8-bit
/// quantization so in-memory pixels equal what a PNG round trip yields.
pub fn toy_image(class: usize, seed: u64) -> Result<Raster> {
    if class >= TOY_CLASSES.len() {
        return Err(Error::Argument(format!("toy class {class} does not exist")));
    }
    let mut rng = SplitMix64::derive(seed, &[lane::JITTER]);
    let offset = rng.random_range(-0.1..0.1);
    let c = (TOY_SIZE as f64 - 1.0) / 2.0;
    let inside: Box<dyn Fn(f64, f64) -> bool> = if class == 0 {
        let cx = c + rng.random_range(-0.5..0.5);
        let cy = c + rng.random_range(-0.5..0.5);
        let r = rng.random_range(2.0..2.6);
        Box::new(move |x, y| (x - cx).hypot(y - cy) <= r)
    } else {
        let cx = c + rng.random_range(-1.0..1.0);
        let hw = rng.random_range(0.9..1.3);
        Box::new(move |x, _| (x - cx).abs() <= hw)
    };
    let mut bytes = Vec::with_capacity(TOY_SIZE * TOY_SIZE);
    for y in 0..TOY_SIZE {
        for x in 0..TOY_SIZE {
            let level = if inside(x as f64, y as f64) { BRIGHT } else { DARK };
            let v = level + offset + rng.random_range(-0.05..0.05);
            bytes.push(crate::raster::to_u8(v as f32));
        }
    }
    Raster::from_u8(TOY_SIZE, TOY_SIZE, 1, &bytes)
}

pub fn toy_id(class: usize, index: usize) -> String {
    format!("{}-{index:04}", TOY_CLASSES[class])
}

/// Manifest and pixels of `n_per_class` images per class. Each record gets
/// an AIO caption and a stub TA caption.
pub fn toy_dataset(n_per_class: usize, seed: u64) -> Result<(DatasetManifest, HashMap<String, Raster>)> {
    if n_per_class < 2 {
        return Err(Error::Argument(format!(
            "n_per_class must be at least 2, got {n_per_class}"
        )));
    }
    let mut manifest = DatasetManifest::new(seed);
    let mut images = HashMap::new();
    for (class, name) in TOY_CLASSES.iter().enumerate() {
        for i in 0..n_per_class {
            let id = toy_id(class, i);
            let img_seed = crate::rng::split_path(seed, &[lane::JITTER, class as u64, i as u64]);
            let img = toy_image(class, img_seed)?;
            let record = ImageRecord::original(
                id.clone(),
                format!("images/{id}.png"),
                TOY_SIZE as u32,
                TOY_SIZE as u32,
                Some(name.to_string()),
            );
            manifest.captions.push(CaptionRecord {
                image_id: id.clone(),
                text: aio_caption(name)?,
                kind: CaptionKind::Aio,
                generator: "template".into(),
            });
            manifest.captions.push(CaptionRecord {
                image_id: id.clone(),
                text: stub_caption(&record, seed)?,
                kind: CaptionKind::Ta,
                generator: "stub".into(),
            });
            manifest.records.push(record);
            images.insert(id, img);
        }
    }
    manifest.canonicalize();
    Ok((manifest, images))
}

/// Writes the toy dataset under `out_dir` (`images/*.png` plus
/// `manifest.jsonl`) and returns its manifest.
pub fn write_toy_dataset(out_dir: &Path, n_per_class: usize, seed: u64) -> Result<DatasetManifest> {
    let (manifest, images) = toy_dataset(n_per_class, seed)?;
    for record in &manifest.records {
        images[&record.id].save_png(&out_dir.join(&record.path))?;
    }
    manifest.write_to_path(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// Mean image of each class.
pub fn class_centroids(n_per_class: usize, seed: u64) -> Result<[Vec<f64>; 2]> {
    let (manifest, images) = toy_dataset(n_per_class, seed)?;
    let mut sums = [vec![0.0; TOY_SIZE * TOY_SIZE], vec![0.0; TOY_SIZE * TOY_SIZE]];
    for r in &manifest.records {
        let class = TOY_CLASSES
            .iter()
            .position(|c| Some(*c) == r.class_label.as_deref())
            .expect("toy labels");
        for (s, v) in sums[class].iter_mut().zip(images[&r.id].data()) {
            *s += *v as f64;
        }
    }
    for s in &mut sums {
        s.iter_mut().for_each(|v| *v /= n_per_class as f64);
    }
    Ok(sums)
}

/// Index of the centroid closest to `pixels` in Euclidean distance.
pub fn nearest_centroid(pixels: &[f64], centroids: &[Vec<f64>]) -> usize {
    let dist = |c: &Vec<f64>| c.iter().zip(pixels).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    (0..centroids.len())
        .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
        .expect("at least one centroid")
}
