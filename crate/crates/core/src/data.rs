//! Turns manifest records into in-memory training sets.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{CaptionKind, DatasetManifest, ImageRecord, ImageSource};
use crate::par;
use crate::raster::Raster;
use crate::schedule::{ImageShape, InMemoryDataset};

/// Which captions condition original images. CutMix images always use their
/// descriptive caption.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionChoice {
    Aio,
    Ta,
}

impl std::str::FromStr for CaptionChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "aio" => Ok(CaptionChoice::Aio),
            "ta" => Ok(CaptionChoice::Ta),
            _ => Err(Error::Argument(format!("unknown caption choice `{s}` (aio | ta)"))),
        }
    }
}

fn wanted_kind(source: ImageSource, choice: CaptionChoice) -> CaptionKind {
    match (source, choice) {
        (ImageSource::Original, CaptionChoice::Aio) => CaptionKind::Aio,
        (ImageSource::Original, CaptionChoice::Ta) => CaptionKind::Ta,
        (ImageSource::Cutmix, _) => CaptionKind::CutmixTa,
        (ImageSource::Crop, _) => CaptionKind::CropTa,
    }
}

/// Pixels as f64 at `shape`, resized bilinearly if needed.
pub fn to_pixels(img: &Raster, shape: &ImageShape) -> Result<Vec<f64>> {
    if img.channels() != shape.channels {
        return Err(Error::Argument(format!(
            "image has {} channels, expected {}",
            img.channels(),
            shape.channels
        )));
    }
    let resized = img.resize_bilinear(shape.width, shape.height)?;
    Ok(resized.data().iter().map(|&v| v as f64).collect())
}

/// One example per (record of `source`, caption of the matching kind), in
/// canonical record and caption order. Pixels come from `images` when present
/// there, otherwise from `images_root/record.path`.
pub fn build_dataset(
    manifest: &DatasetManifest,
    images: Option<&HashMap<String, Raster>>,
    images_root: &Path,
    source: ImageSource,
    choice: CaptionChoice,
    shape: ImageShape,
) -> Result<InMemoryDataset> {
    let kind = wanted_kind(source, choice);
    let mut records: Vec<&ImageRecord> = manifest.records.iter().filter(|r| r.source == source).collect();
    records.sort_by(|a, b| a.id.cmp(&b.id));
    let mut by_id: HashMap<&str, Vec<&str>> = HashMap::new();
    for c in manifest.captions.iter().filter(|c| c.kind == kind) {
        by_id.entry(c.image_id.as_str()).or_default().push(c.text.as_str());
    }
    if let Some(r) = records.iter().find(|r| !by_id.contains_key(r.id.as_str())) {
        return Err(Error::Config(format!(
            "record `{}` has no {kind:?} caption; run the caption command first",
            r.id
        )));
    }
    let pixels = par::try_map_range(records.len(), |i| {
        let r = records[i];
        let img = match images.and_then(|m| m.get(&r.id)) {
            Some(img) => img.clone(),
            None => Raster::load(&images_root.join(&r.path), shape.channels)?,
        };
        to_pixels(&img, &shape).map(Arc::new)
    })?;
    let mut out = InMemoryDataset::new(shape);
    for (r, px) in records.iter().zip(pixels) {
        let mut texts = by_id[r.id.as_str()].clone();
        texts.sort_unstable();
        for text in texts {
            out.push(Arc::clone(&px), text)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::Dataset;

    #[test]
    fn toy_originals_with_aio_captions() {
        let (m, images) = crate::toy::toy_dataset(3, 1).unwrap();
        let shape = ImageShape { width: 8, height: 8, channels: 1 };
        let d = build_dataset(&m, Some(&images), Path::new("."), ImageSource::Original, CaptionChoice::Aio, shape)
            .unwrap();
        assert_eq!(d.len(), 6);
        assert_eq!(d.example(0, 0).unwrap().caption, "An image of disk");
        assert_eq!(d.example(5, 0).unwrap().caption, "An image of stripe");
    }

    #[test]
    fn missing_captions_are_reported() {
        let (mut m, images) = crate::toy::toy_dataset(2, 1).unwrap();
        m.captions.retain(|c| c.kind != CaptionKind::Ta);
        let shape = ImageShape { width: 8, height: 8, channels: 1 };
        let r = build_dataset(&m, Some(&images), Path::new("."), ImageSource::Original, CaptionChoice::Ta, shape);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn resizes_to_shape() {
        let img = Raster::filled(16, 16, 1, 0.5).unwrap();
        let px = to_pixels(&img, &ImageShape { width: 8, height: 8, channels: 1 }).unwrap();
        assert_eq!(px.len(), 64);
        assert!(px.iter().all(|&v| v == 0.5));
        assert!(to_pixels(&img, &ImageShape { width: 8, height: 8, channels: 3 }).is_err());
    }
}
