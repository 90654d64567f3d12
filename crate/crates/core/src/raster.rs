//! Float image buffers in the [-1, 1] pixel range, with PNG I/O.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    /// Row-major, interleaved channels.
    data: Vec<f32>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Geometry(format!("empty raster {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Argument(format!("unsupported channel count {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::Argument(format!(
                "raster data length {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Bilinear resampling with half-pixel centers and edge clamping.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Result<Raster> {
        if width == 0 || height == 0 {
            return Err(Error::Geometry(format!("cannot resize to {width}x{height}")));
        }
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let axis = |dst: usize, scale: f64, len: usize| {
            let pos = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(len - 1);
            (lo, hi, pos - lo as f64)
        };
        let mut out = Raster::filled(width, height, self.channels, 0.0)?;
        for y in 0..height {
            let (y0, y1, fy) = axis(y, sy, self.height);
            for x in 0..width {
                let (x0, x1, fx) = axis(x, sx, self.width);
                for c in 0..self.channels {
                    let top = self.get(x0, y0, c) as f64 * (1.0 - fx) + self.get(x1, y0, c) as f64 * fx;
                    let bot = self.get(x0, y1, c) as f64 * (1.0 - fx) + self.get(x1, y1, c) as f64 * fx;
                    out.set(x, y, c, (top * (1.0 - fy) + bot * fy) as f32);
                }
            }
        }
        Ok(out)
    }

    /// Stable 64-bit fingerprint of dimensions and pixel bits.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::with_capacity(24 + self.data.len() * 4);
        for d in [self.width, self.height, self.channels] {
            bytes.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &self.data {
            bytes.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        crate::rng::fnv1a(&bytes)
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_u8(v)).collect()
    }

    pub fn from_u8(width: usize, height: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, channels, bytes.iter().map(|&b| from_u8(b)).collect())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io_at(parent, e))?;
        }
        let (w, h) = (self.width as u32, self.height as u32);
        let bytes = self.to_u8();
        match self.channels {
            1 => ImageBuffer::<Luma<u8>, _>::from_raw(w, h, bytes)
                .expect("buffer length checked at construction")
                .save(path)?,
            _ => ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, bytes)
                .expect("buffer length checked at construction")
                .save(path)?,
        }
        Ok(())
    }

    /// Loads an image keeping grayscale files single-channel and everything
    /// else as RGB.
    pub fn load_auto(path: &Path) -> Result<Self> {
        let img = open(path)?;
        let channels = if img.color().has_color() { 3 } else { 1 };
        let (w, h) = (img.width() as usize, img.height() as usize);
        match channels {
            1 => Self::from_u8(w, h, 1, img.to_luma8().as_raw()),
            _ => Self::from_u8(w, h, 3, img.to_rgb8().as_raw()),
        }
    }

    /// Loads a PNG (or any format the decoder knows) as `channels` (1 or 3).
    pub fn load(path: &Path, channels: usize) -> Result<Self> {
        let img = open(path)?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        match channels {
            1 => Self::from_u8(w, h, 1, img.to_luma8().as_raw()),
            3 => Self::from_u8(w, h, 3, img.to_rgb8().as_raw()),
            c => Err(Error::Argument(format!("unsupported channel count {c}"))),
        }
    }
}

#[inline]
pub fn to_u8(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

#[inline]
pub fn from_u8(b: u8) -> f32 {
    b as f32 / 255.0 * 2.0 - 1.0
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io_at(path, io),
        other => Error::Image(other),
    })
}
