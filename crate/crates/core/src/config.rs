//! Flat `key = value` run configuration with `#` comments.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cutmix::CutMixPattern;
use crate::data::CaptionChoice;
use crate::error::{Error, Result};
use crate::schedule::{GateParams, ImageShape};
use crate::trainer::{TrainConfig, DEFAULT_HIDDEN, DEFAULT_TEXT_DIM};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    /// Root that record paths are relative to; defaults to the manifest's directory.
    pub images: Option<PathBuf>,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub horizon: u32,
    pub tau: u32,
    pub aug_prob: f64,
    pub crop_prob: f64,
    pub patch_size: usize,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub uncond_drop: f64,
    pub hidden: usize,
    pub text_dim: usize,
    pub captions: CaptionChoice,
    pub guidance: f64,
    pub k: usize,
    pub setting: CutMixPattern,
    pub count: usize,
    pub n_per_class: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            manifest: None,
            images: None,
            width: 8,
            height: 8,
            channels: 1,
            horizon: t.horizon,
            tau: t.gate.tau,
            aug_prob: t.gate.aug_prob,
            crop_prob: t.crop_prob,
            patch_size: t.patch_size,
            batch: t.batch,
            steps: t.steps,
            lr: t.lr,
            uncond_drop: t.uncond_drop,
            hidden: DEFAULT_HIDDEN,
            text_dim: DEFAULT_TEXT_DIM,
            captions: CaptionChoice::Aio,
            guidance: 0.0,
            k: crate::metrics::DEFAULT_K,
            setting: CutMixPattern::Quarter,
            count: 64,
            n_per_class: 32,
            seed: 0,
        }
    }
}

pub const KEYS: &[&str] = &[
    "manifest",
    "images",
    "resolution",
    "channels",
    "horizon",
    "tau",
    "aug_prob",
    "crop_prob",
    "patch_size",
    "batch",
    "steps",
    "lr",
    "uncond_drop",
    "hidden",
    "text_dim",
    "captions",
    "guidance",
    "k",
    "setting",
    "count",
    "n_per_class",
    "seed",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("bad value `{value}` for `{key}`: {e}")))
}

/// `"8"` or `"8x12"` (width x height).
fn parse_resolution(value: &str) -> Result<(usize, usize)> {
    let (w, h) = match value.split_once(['x', 'X']) {
        Some((w, h)) => (parse("resolution", w.trim())?, parse("resolution", h.trim())?),
        None => {
            let s = parse("resolution", value)?;
            (s, s)
        }
    };
    if w == 0 || h == 0 {
        return Err(Error::Config(format!("resolution `{value}` has a zero side")));
    }
    Ok((w, h))
}

impl RunConfig {
    /// Sets one key; unknown keys and unparsable values are config errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "manifest" => self.manifest = Some(PathBuf::from(v)),
            "images" => self.images = Some(PathBuf::from(v)),
            "resolution" => (self.width, self.height) = parse_resolution(v)?,
            "channels" => self.channels = parse("channels", v)?,
            "horizon" => self.horizon = parse("horizon", v)?,
            "tau" => self.tau = parse("tau", v)?,
            "aug_prob" => self.aug_prob = parse("aug_prob", v)?,
            "crop_prob" => self.crop_prob = parse("crop_prob", v)?,
            "patch_size" => self.patch_size = parse("patch_size", v)?,
            "batch" => self.batch = parse("batch", v)?,
            "steps" => self.steps = parse("steps", v)?,
            "lr" => self.lr = parse("lr", v)?,
            "uncond_drop" => self.uncond_drop = parse("uncond_drop", v)?,
            "hidden" => self.hidden = parse("hidden", v)?,
            "text_dim" => self.text_dim = parse("text_dim", v)?,
            "captions" => self.captions = parse("captions", v)?,
            "guidance" => self.guidance = parse("guidance", v)?,
            "k" => self.k = parse("k", v)?,
            "setting" => self.setting = parse("setting", v)?,
            "count" => self.count = parse("count", v)?,
            "n_per_class" => self.n_per_class = parse("n_per_class", v)?,
            "seed" => self.seed = parse("seed", v)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown key `{other}`; known keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text` on top of `self`. Relative
    /// paths are resolved against `base_dir`.
    pub fn apply_text(&mut self, text: &str, base_dir: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(key, value).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                e => e,
            })?;
            if matches!(key.trim(), "manifest" | "images") {
                let p = if key.trim() == "manifest" {
                    &mut self.manifest
                } else {
                    &mut self.images
                };
                if let Some(path) = p.as_mut().filter(|p| p.is_relative()) {
                    *path = base_dir.join(&*path);
                }
            }
        }
        Ok(())
    }

    pub fn from_text(text: &str, base_dir: &Path) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text, base_dir)?;
        Ok(c)
    }

    /// Reads a config file and checks that the paths it names exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let c = Self::from_text(&text, base)?;
        c.check_paths()?;
        Ok(c)
    }

    pub fn check_paths(&self) -> Result<()> {
        for p in [&self.manifest, &self.images].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("path {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn manifest_path(&self) -> Result<&Path> {
        self.manifest
            .as_deref()
            .ok_or_else(|| Error::Config("no manifest given (--manifest or `manifest = ...`)".into()))
    }

    pub fn images_root(&self) -> Result<PathBuf> {
        match &self.images {
            Some(p) => Ok(p.clone()),
            None => Ok(self
                .manifest_path()?
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from("."))),
        }
    }

    pub fn shape(&self) -> ImageShape {
        ImageShape {
            width: self.width,
            height: self.height,
            channels: self.channels,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch: self.batch,
            steps: self.steps,
            lr: self.lr,
            horizon: self.horizon,
            gate: GateParams {
                tau: self.tau,
                aug_prob: self.aug_prob,
            },
            crop_prob: self.crop_prob,
            patch_size: self.patch_size,
            uncond_drop: self.uncond_drop,
            hidden: self.hidden,
            text_dim: self.text_dim,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.guidance >= 0.0 && self.guidance.is_finite()) {
            return Err(Error::Config(format!("guidance {} must be >= 0", self.guidance)));
        }
        self.train_config().validate()
    }
}
