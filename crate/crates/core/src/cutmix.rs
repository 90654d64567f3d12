//! Structured CutMix: placement geometry for the four overlay patterns,
//! compositing, and dataset curation.
//!
//! | pattern     | donor size          | position                                   |
//! |-------------|---------------------|--------------------------------------------|
//! | `Half`      | full side x ⌊side/2⌋ | one half, split along width or height      |
//! | `Quarter`   | ⌊w/2⌋ x ⌊h/2⌋        | one of the four corners                    |
//! | `Ninth`     | ⌊w/3⌋ x ⌊h/3⌋        | centered on one edge midpoint, flush to it |
//! | `Sixteenth` | ⌊w/4⌋ x ⌊h/4⌋        | uniform, disjoint from the central square  |
//!
//! The central square used by `Sixteenth` is axis-aligned, centered on the
//! image and has area 10% of the image (side `⌈√(0.1·w·h)⌉`).

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{AugmentationProvenance, DatasetManifest, ImageRecord, ImageSource};
use crate::par;
use crate::raster::Raster;
use crate::rng::{lane, split, SplitMix64};

pub const MIN_SIDE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CutMixPattern {
    Half,
    Quarter,
    Ninth,
    Sixteenth,
    /// Curation-level mixture of the four patterns in equal proportion.
    All,
}

impl CutMixPattern {
    /// The four single-plan patterns, in round-robin order for `All`.
    pub const SINGLE: [CutMixPattern; 4] = [
        CutMixPattern::Half,
        CutMixPattern::Quarter,
        CutMixPattern::Ninth,
        CutMixPattern::Sixteenth,
    ];

    pub const ALL_SETTINGS: [CutMixPattern; 5] = [
        CutMixPattern::Half,
        CutMixPattern::Quarter,
        CutMixPattern::Ninth,
        CutMixPattern::Sixteenth,
        CutMixPattern::All,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            CutMixPattern::Half => "half",
            CutMixPattern::Quarter => "quarter",
            CutMixPattern::Ninth => "ninth",
            CutMixPattern::Sixteenth => "sixteenth",
            CutMixPattern::All => "all",
        }
    }

    /// Nominal donor coverage (1/2, 1/4, 1/9, 1/16).
    pub fn nominal_fraction(self) -> Option<f64> {
        match self {
            CutMixPattern::Half => Some(0.5),
            CutMixPattern::Quarter => Some(0.25),
            CutMixPattern::Ninth => Some(1.0 / 9.0),
            CutMixPattern::Sixteenth => Some(0.0625),
            CutMixPattern::All => None,
        }
    }

    /// Pattern used for output item `index` under this curation setting.
    pub fn for_index(self, index: usize) -> CutMixPattern {
        match self {
            CutMixPattern::All => Self::SINGLE[index % 4],
            p => p,
        }
    }
}

impl fmt::Display for CutMixPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for CutMixPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "half" | "1/2" => Ok(CutMixPattern::Half),
            "quarter" | "1/4" => Ok(CutMixPattern::Quarter),
            "ninth" | "1/9" => Ok(CutMixPattern::Ninth),
            "sixteenth" | "1/16" => Ok(CutMixPattern::Sixteenth),
            "all" => Ok(CutMixPattern::All),
            other => Err(Error::Argument(format!("unknown cutmix setting `{other}`"))),
        }
    }
}

/// Donor rectangle inside the base image, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Placement {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Placement {
    pub fn fits(&self, base_w: usize, base_h: usize) -> bool {
        self.w >= 1
            && self.h >= 1
            && (self.x as usize + self.w as usize) <= base_w
            && (self.y as usize + self.h as usize) <= base_h
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    #[inline]
    pub fn contains_pixel(&self, px: usize, py: usize) -> bool {
        let (x, y) = (self.x as usize, self.y as usize);
        px >= x && px < x + self.w as usize && py >= y && py < y + self.h as usize
    }

    /// Whether the continuous image center lies strictly inside the rectangle.
    pub fn covers_center_point(&self, base_w: usize, base_h: usize) -> bool {
        // Doubled coordinates keep everything integral.
        let (x2, y2) = (2 * self.x as usize, 2 * self.y as usize);
        let (xe2, ye2) = (x2 + 2 * self.w as usize, y2 + 2 * self.h as usize);
        x2 < base_w && base_w < xe2 && y2 < base_h && base_h < ye2
    }

    /// Whether any of the (one, two or four) pixels touching the image center
    /// is covered.
    pub fn covers_center_pixels(&self, base_w: usize, base_h: usize) -> bool {
        center_pixels(base_w, base_h)
            .iter()
            .any(|&(px, py)| self.contains_pixel(px, py))
    }

    pub fn covers_corner_pixels(&self, base_w: usize, base_h: usize) -> bool {
        [(0, 0), (base_w - 1, 0), (0, base_h - 1), (base_w - 1, base_h - 1)]
            .iter()
            .any(|&(px, py)| self.contains_pixel(px, py))
    }

    pub fn intersects_central_square(&self, base_w: usize, base_h: usize) -> bool {
        let side = central_square_side(base_w, base_h) as i64;
        !(disjoint_axis(self.x as i64, self.w as i64, base_w as i64, side)
            || disjoint_axis(self.y as i64, self.h as i64, base_h as i64, side))
    }
}

/// Pixels whose area touches the image center.
pub fn center_pixels(w: usize, h: usize) -> Vec<(usize, usize)> {
    let axis = |n: usize| if n.is_multiple_of(2) { vec![n / 2 - 1, n / 2] } else { vec![n / 2] };
    let (xs, ys) = (axis(w), axis(h));
    ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect()
}

/// Side of the centered square covering 10% of the image area.
pub fn central_square_side(w: usize, h: usize) -> usize {
    (0.1 * w as f64 * h as f64).sqrt().ceil() as usize
}

/// Whether `[start, start + len)` misses the centered interval of length
/// `side` on an axis of length `axis_len`.
fn disjoint_axis(start: i64, len: i64, axis_len: i64, side: i64) -> bool {
    2 * (start + len) <= axis_len - side || 2 * start >= axis_len + side
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutMixPlan {
    pub base_id: String,
    pub donor_id: String,
    pub pattern: CutMixPattern,
    pub placement: Placement,
    pub seed: u64,
}

/// Donor rectangle for `pattern` on a `base_w` x `base_h` image. A pure
/// function of its arguments.
pub fn plan_placement(pattern: CutMixPattern, base_w: usize, base_h: usize, seed: u64) -> Result<Placement> {
    if base_w < MIN_SIDE || base_h < MIN_SIDE {
        return Err(Error::Geometry(format!(
            "base {base_w}x{base_h} is smaller than {MIN_SIDE}x{MIN_SIDE}"
        )));
    }
    let mut rng = SplitMix64::derive(seed, &[lane::PLACEMENT]);
    let p = |x: usize, y: usize, w: usize, h: usize| Placement {
        x: x as u32,
        y: y as u32,
        w: w as u32,
        h: h as u32,
    };
    let placement = match pattern {
        CutMixPattern::All => {
            return Err(Error::Argument("`all` is a curation setting, not a placement pattern".into()))
        }
        CutMixPattern::Half => {
            let along_width = rng.random::<bool>();
            let far_side = rng.random::<bool>();
            if along_width {
                let dw = base_w / 2;
                p(if far_side { base_w - dw } else { 0 }, 0, dw, base_h)
            } else {
                let dh = base_h / 2;
                p(0, if far_side { base_h - dh } else { 0 }, base_w, dh)
            }
        }
        CutMixPattern::Quarter => {
            let (dw, dh) = (base_w / 2, base_h / 2);
            let corner = rng.random_range(0..4u32);
            let x = if corner & 1 == 1 { base_w - dw } else { 0 };
            let y = if corner & 2 == 2 { base_h - dh } else { 0 };
            p(x, y, dw, dh)
        }
        CutMixPattern::Ninth => {
            let (dw, dh) = (base_w / 3, base_h / 3);
            let (mx, my) = ((base_w - dw) / 2, (base_h - dh) / 2);
            match rng.random_range(0..4u32) {
                0 => p(mx, 0, dw, dh),
                1 => p(base_w - dw, my, dw, dh),
                2 => p(mx, base_h - dh, dw, dh),
                _ => p(0, my, dw, dh),
            }
        }
        CutMixPattern::Sixteenth => {
            let (dw, dh) = (base_w / 4, base_h / 4);
            let side = central_square_side(base_w, base_h) as i64;
            let ok_x = |x: usize| disjoint_axis(x as i64, dw as i64, base_w as i64, side);
            let ok_y = |y: usize| disjoint_axis(y as i64, dh as i64, base_h as i64, side);
            let (max_x, max_y) = (base_w - dw, base_h - dh);
            if !(0..=max_x).any(ok_x) && !(0..=max_y).any(ok_y) {
                return Err(Error::Geometry(format!(
                    "no sixteenth placement avoids the central square on {base_w}x{base_h}"
                )));
            }
            let mut found = None;
            for _ in 0..10_000 {
                let x = rng.random_range(0..=max_x);
                let y = rng.random_range(0..=max_y);
                if ok_x(x) || ok_y(y) {
                    found = Some((x, y));
                    break;
                }
            }
            // Unreachable in practice; keeps the function total.
            let (x, y) = found.unwrap_or_else(|| {
                (0..=max_x)
                    .find(|&x| ok_x(x))
                    .map(|x| (x, 0))
                    .unwrap_or_else(|| (0, (0..=max_y).find(|&y| ok_y(y)).unwrap_or(0)))
            });
            p(x, y, dw, dh)
        }
    };
    debug_assert!(placement.fits(base_w, base_h));
    Ok(placement)
}

/// Fraction of the base covered by the donor rectangle.
pub fn coverage(placement: &Placement, base_w: usize, base_h: usize) -> f64 {
    placement.area() as f64 / (base_w as f64 * base_h as f64)
}

/// Resizes `donor` to the placement size (bilinear) and pastes it opaquely
/// into a copy of `base`.
pub fn composite(base: &Raster, donor: &Raster, placement: &Placement) -> Result<Raster> {
    check_inputs(base, donor, placement)?;
    let resized = donor.resize_bilinear(placement.w as usize, placement.h as usize)?;
    let mut out = base.clone();
    let (x0, y0) = (placement.x as usize, placement.y as usize);
    for y in 0..placement.h as usize {
        for x in 0..placement.w as usize {
            for c in 0..base.channels() {
                out.set(x0 + x, y0 + y, c, resized.get(x, y, c));
            }
        }
    }
    Ok(out)
}

/// Composites according to the pattern. Half-mix keeps both images at full
/// resolution: the donor is brought to the base size and the placement
/// window is copied in place. The other patterns shrink the whole donor into
/// the window.
pub fn composite_for_pattern(
    base: &Raster,
    donor: &Raster,
    pattern: CutMixPattern,
    placement: &Placement,
) -> Result<Raster> {
    if pattern != CutMixPattern::Half {
        return composite(base, donor, placement);
    }
    check_inputs(base, donor, placement)?;
    let full = donor.resize_bilinear(base.width(), base.height())?;
    let mut out = base.clone();
    let (x0, y0) = (placement.x as usize, placement.y as usize);
    for y in y0..y0 + placement.h as usize {
        for x in x0..x0 + placement.w as usize {
            for c in 0..base.channels() {
                out.set(x, y, c, full.get(x, y, c));
            }
        }
    }
    Ok(out)
}

fn check_inputs(base: &Raster, donor: &Raster, placement: &Placement) -> Result<()> {
    if donor.width() == 0 || donor.height() == 0 {
        return Err(Error::Geometry("donor image is empty".into()));
    }
    if !placement.fits(base.width(), base.height()) {
        return Err(Error::Geometry(format!(
            "placement {placement:?} does not fit base {}x{}",
            base.width(),
            base.height()
        )));
    }
    if base.channels() != donor.channels() {
        return Err(Error::Argument(format!(
            "channel mismatch: base {} vs donor {}",
            base.channels(),
            donor.channels()
        )));
    }
    Ok(())
}

/// Bases smaller than `MIN_SIDE` are upsampled by the smallest integer factor
/// that reaches it, so tiny datasets can still be mixed.
fn upscale_to_min_side(img: &Raster) -> Result<std::borrow::Cow<'_, Raster>> {
    let short = img.width().min(img.height());
    if short >= MIN_SIDE {
        return Ok(std::borrow::Cow::Borrowed(img));
    }
    let k = MIN_SIDE.div_ceil(short);
    Ok(std::borrow::Cow::Owned(img.resize_bilinear(img.width() * k, img.height() * k)?))
}

/// One curated CutMix image with its record.
#[derive(Debug, Clone)]
pub struct CutMixItem {
    pub record: ImageRecord,
    pub plan: CutMixPlan,
    pub image: Raster,
}

/// Generates `count` CutMix images from the labelled original records of
/// `manifest`, whose pixels are given in `images` (keyed by record id).
///
/// Item `i` uses its own stream `split(seed, i)`, so the result does not
/// depend on evaluation order. Bases below `MIN_SIDE` are first upsampled by
/// an integer factor; the record carries the composite's size.
pub fn curate_in_memory(
    manifest: &DatasetManifest,
    images: &HashMap<String, Raster>,
    setting: CutMixPattern,
    count: usize,
    seed: u64,
) -> Result<Vec<CutMixItem>> {
    if count == 0 {
        return Err(Error::Argument("count must be at least 1".into()));
    }
    let mut pool: Vec<&ImageRecord> = manifest
        .records
        .iter()
        .filter(|r| r.source == ImageSource::Original && r.class_label.is_some())
        .collect();
    pool.sort_by(|a, b| a.id.cmp(&b.id));
    let classes = manifest.classes();
    if classes.len() < 2 {
        return Err(Error::Curation(format!(
            "cutmix needs at least 2 classes, found {}",
            classes.len()
        )));
    }
    // Donor candidates for each base class: every record of another class.
    let others: HashMap<&str, Vec<&ImageRecord>> = classes
        .iter()
        .map(|c| {
            let v = pool
                .iter()
                .copied()
                .filter(|r| r.class_label.as_deref() != Some(c.as_str()))
                .collect();
            (c.as_str(), v)
        })
        .collect();
    for r in &pool {
        if !images.contains_key(&r.id) {
            return Err(Error::Curation(format!("no pixels loaded for record `{}`", r.id)));
        }
    }

    par::try_map_range(count, |i| {
        let item_seed = split(seed, i as u64);
        let pattern = setting.for_index(i);
        let mut base_rng = SplitMix64::derive(item_seed, &[lane::BASE]);
        let base = pool[base_rng.random_range(0..pool.len())];
        let base_class = base.class_label.as_deref().expect("pool is labelled");
        let candidates = &others[base_class];
        let mut donor_rng = SplitMix64::derive(item_seed, &[lane::DONOR]);
        let donor = candidates[donor_rng.random_range(0..candidates.len())];

        let base_img = &upscale_to_min_side(&images[&base.id])?;
        let donor_img = &images[&donor.id];
        let placement = plan_placement(pattern, base_img.width(), base_img.height(), item_seed)?;
        let image = composite_for_pattern(base_img, donor_img, pattern, &placement)?;

        let id = format!("cm-{}-{:06}", setting.tag(), i);
        let record = ImageRecord {
            path: format!("cutmix/{id}.png"),
            id: id.clone(),
            width: base_img.width() as u32,
            height: base_img.height() as u32,
            class_label: base.class_label.clone(),
            source: ImageSource::Cutmix,
            provenance: Some(AugmentationProvenance {
                base_id: base.id.clone(),
                donor_id: Some(donor.id.clone()),
                donor_label: donor.class_label.clone(),
                pattern: Some(pattern),
                placement: Some(placement),
                seed: item_seed,
            }),
        };
        let plan = CutMixPlan {
            base_id: base.id.clone(),
            donor_id: donor.id.clone(),
            pattern,
            placement,
            seed: item_seed,
        };
        Ok(CutMixItem { record, plan, image })
    })
}

/// Loads the pixels of every labelled original record under `images_root`.
pub fn load_originals(manifest: &DatasetManifest, images_root: &Path) -> Result<HashMap<String, Raster>> {
    let records: Vec<&ImageRecord> = manifest
        .records
        .iter()
        .filter(|r| r.source == ImageSource::Original && r.class_label.is_some())
        .collect();
    let loaded = par::try_map_range(records.len(), |i| {
        let r = records[i];
        let img = Raster::load_auto(&images_root.join(&r.path))?;
        Ok::<_, Error>((r.id.clone(), img))
    })?;
    Ok(loaded.into_iter().collect())
}

/// Curates `count` CutMix images, writes them as PNG under
/// `images_root/cutmix/<id>.png` and returns `manifest` extended with the new
/// records.
pub fn curate_cutmix(
    manifest: &DatasetManifest,
    images_root: &Path,
    setting: CutMixPattern,
    count: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    let images = load_originals(manifest, images_root)?;
    let items = curate_in_memory(manifest, &images, setting, count, seed)?;
    par::try_map_range(items.len(), |i| {
        let item = &items[i];
        item.image.save_png(&images_root.join(&item.record.path))
    })?;
    let mut out = manifest.clone();
    out.seed = seed;
    out.records.extend(items.into_iter().map(|it| it.record));
    out.canonicalize();
    Ok(out)
}
