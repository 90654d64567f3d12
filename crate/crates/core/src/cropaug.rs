//! Online crop augmentation: crop windows, crop-coordinate caption tokens and
//! the patch-token mask a crop induces.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{lane, SplitMix64};

/// Minimum crop side as a fraction of the image side (exclusive).
pub const MIN_SIDE_FRACTION: f64 = 0.5;

/// Normalized crop rectangle `[x0, x1) x [y0, y1)` in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl CropSpec {
    /// A crop with both sides strictly larger than half the image.
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let spec = Self::unchecked(x0, y0, x1, y1)?;
        if spec.width() <= MIN_SIDE_FRACTION || spec.height() <= MIN_SIDE_FRACTION {
            return Err(Error::Argument(format!(
                "crop sides must exceed {MIN_SIDE_FRACTION}: {spec:?}"
            )));
        }
        Ok(spec)
    }

    /// Any non-degenerate rectangle inside the unit square (no side bound).
    pub fn unchecked(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let ok = [x0, y0, x1, y1].iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
            && x0 < x1
            && y0 < y1;
        if !ok {
            return Err(Error::Argument(format!(
                "invalid crop rectangle ({x0}, {y0}, {x1}, {y1})"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn identity() -> Self {
        Self {
            x0: 0.0,
            y0: 0.0,
            x1: 1.0,
            y1: 1.0,
        }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn contains(&self, other: &CropSpec) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && other.x1 <= self.x1 && other.y1 <= self.y1
    }
}

/// Side in `(0.5, 1]` on a 2^-53 grid; every value is exactly representable.
fn draw_side(rng: &mut SplitMix64) -> f64 {
    let k = rng.random_range(1..=(1u64 << 52));
    MIN_SIDE_FRACTION + k as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Crop window for `seed`: per-axis side uniform in `(0.5, 1]`, offset
/// uniform over the positions that keep the window inside the image.
pub fn sample_crop(seed: u64) -> CropSpec {
    let mut rng = SplitMix64::derive(seed, &[lane::CROP]);
    loop {
        let w = draw_side(&mut rng);
        let h = draw_side(&mut rng);
        let x0 = rng.random::<f64>() * (1.0 - w);
        let y0 = rng.random::<f64>() * (1.0 - h);
        let x1 = (x0 + w).min(1.0);
        let y1 = (y0 + h).min(1.0);
        // Rounding of x0 + w can in principle eat the last ulp of margin.
        if let Ok(spec) = CropSpec::new(x0, y0, x1, y1) {
            return spec;
        }
    }
}

/// Caption prefix `"<crop x0 y0 x1 y1> "`, coordinates with two decimals.
/// Rust's float formatting rounds the exact binary value and breaks exact
/// ties to even, and does not depend on locale.
pub fn crop_tokens(spec: &CropSpec) -> String {
    format!(
        "<crop {:.2} {:.2} {:.2} {:.2}> ",
        spec.x0, spec.y0, spec.x1, spec.y1
    )
}

/// Splits a caption produced by `crop_tokens(spec) + caption` back into the
/// crop rectangle (at two-decimal precision) and the remaining caption.
/// Returns `None` if the caption has no crop prefix.
pub fn parse_crop_tokens(caption: &str) -> Option<(CropSpec, &str)> {
    let rest = caption.strip_prefix("<crop ")?;
    let end = rest.find("> ")?;
    let coords: Vec<f64> = rest[..end]
        .split(' ')
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .ok()?;
    if coords.len() != 4 {
        return None;
    }
    let spec = CropSpec::unchecked(coords[0], coords[1], coords[2], coords[3]).ok()?;
    Some((spec, &rest[end + 2..]))
}

/// Per-patch membership mask over a `grid_w` x `grid_h` token grid,
/// row-major, `true` = token inside the crop.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenMask {
    grid_w: usize,
    grid_h: usize,
    bits: Vec<bool>,
}

impl TokenMask {
    pub fn new(grid_w: usize, grid_h: usize, bits: Vec<bool>) -> Result<Self> {
        if grid_w == 0 || grid_h == 0 || bits.len() != grid_w * grid_h {
            return Err(Error::Argument(format!(
                "mask of {} bits does not match grid {grid_w}x{grid_h}",
                bits.len()
            )));
        }
        if !bits.iter().any(|&b| b) {
            return Err(Error::Argument("mask has no active token".into()));
        }
        Ok(Self { grid_w, grid_h, bits })
    }

    pub fn full(grid_w: usize, grid_h: usize) -> Self {
        Self {
            grid_w,
            grid_h,
            bits: vec![true; grid_w * grid_h],
        }
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[j * self.grid_w + i]
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        self.popcount() as f64 / self.bits.len() as f64
    }

    pub fn is_subset_of(&self, other: &TokenMask) -> bool {
        self.grid_w == other.grid_w
            && self.grid_h == other.grid_h
            && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// Expands the mask to a per-pixel weight vector for a `width` x `height`
    /// image with `channels` interleaved channels. Each patch must cover a
    /// whole block of pixels.
    pub fn pixel_mask(&self, width: usize, height: usize, channels: usize) -> Result<Vec<bool>> {
        if !width.is_multiple_of(self.grid_w) || !height.is_multiple_of(self.grid_h) {
            return Err(Error::Argument(format!(
                "grid {}x{} does not divide image {width}x{height}",
                self.grid_w, self.grid_h
            )));
        }
        let (pw, ph) = (width / self.grid_w, height / self.grid_h);
        let mut out = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                let on = self.get(x / pw, y / ph);
                out.extend(std::iter::repeat_n(on, channels));
            }
        }
        Ok(out)
    }
}

/// Token `(i, j)` is inside the crop iff its center
/// `((i + 0.5) / grid_w, (j + 0.5) / grid_h)` lies in `[x0, x1) x [y0, y1)`.
pub fn patch_mask(spec: &CropSpec, grid_w: usize, grid_h: usize) -> Result<TokenMask> {
    if grid_w == 0 || grid_h == 0 {
        return Err(Error::Argument(format!("invalid grid {grid_w}x{grid_h}")));
    }
    let inside = |c: f64, lo: f64, hi: f64| lo <= c && c < hi;
    let mut bits = Vec::with_capacity(grid_w * grid_h);
    for j in 0..grid_h {
        let cy = (j as f64 + 0.5) / grid_h as f64;
        for i in 0..grid_w {
            let cx = (i as f64 + 0.5) / grid_w as f64;
            bits.push(inside(cx, spec.x0, spec.x1) && inside(cy, spec.y0, spec.y1));
        }
    }
    Ok(TokenMask { grid_w, grid_h, bits })
}
