//! Noise schedule, forward noising and the timestep-gated batch builder.
//!
//! A batch slot draws `t ~ U{1..T}` and an `(x0, caption)` pair from the
//! original dataset; when `t > tau` a Bernoulli(`aug_prob`) draw may replace
//! the pair by one from the augmented dataset. Augmented images are therefore
//! only ever seen at noise levels above the threshold.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cropaug::{crop_tokens, patch_mask, sample_crop, TokenMask};
use crate::error::{Error, Result};
use crate::par;
use crate::rng::{lane, split, SplitMix64};

pub const DEFAULT_HORIZON: u32 = 1000;
pub const GAMMA_FLOOR: f64 = 1e-5;

/// Cosine variance schedule `γ(t) = cos²((t/T)·π/2)` clamped to `[1e-5, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    horizon: u32,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            horizon: DEFAULT_HORIZON,
        }
    }
}

impl NoiseSchedule {
    pub fn new(horizon: u32) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Argument("horizon must be positive".into()));
        }
        Ok(Self { horizon })
    }

    pub fn horizon(&self) -> u32 {
        self.horizon
    }

    pub fn gamma(&self, t: u32) -> Result<f64> {
        if t > self.horizon {
            return Err(Error::Argument(format!("timestep {t} outside [0, {}]", self.horizon)));
        }
        Ok(self.gamma_unchecked(t))
    }

    #[inline]
    pub(crate) fn gamma_unchecked(&self, t: u32) -> f64 {
        let c = (t as f64 / self.horizon as f64 * std::f64::consts::FRAC_PI_2).cos();
        (c * c).clamp(GAMMA_FLOOR, 1.0)
    }
}

/// `x_t = √γ(t)·x0 + √(1−γ(t))·eps`, elementwise.
pub fn noise(x0: &[f64], t: u32, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    if x0.len() != eps.len() {
        return Err(Error::Argument(format!(
            "x0 has {} elements but eps has {}",
            x0.len(),
            eps.len()
        )));
    }
    let g = schedule.gamma(t)?;
    let (a, b) = (g.sqrt(), (1.0 - g).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub tau: u32,
    pub aug_prob: f64,
}

impl GateParams {
    pub fn new(tau: u32, aug_prob: f64, schedule: &NoiseSchedule) -> Result<Self> {
        let g = Self { tau, aug_prob };
        g.validate(schedule)?;
        Ok(g)
    }

    /// Gate that never admits augmented samples.
    pub fn disabled(schedule: &NoiseSchedule) -> Self {
        Self {
            tau: schedule.horizon(),
            aug_prob: 0.0,
        }
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.tau > schedule.horizon() {
            return Err(Error::Config(format!(
                "tau {} exceeds horizon {}",
                self.tau,
                schedule.horizon()
            )));
        }
        if !(0.0..=1.0).contains(&self.aug_prob) {
            return Err(Error::Config(format!("aug_prob {} outside [0, 1]", self.aug_prob)));
        }
        Ok(())
    }

    /// Probability that a slot is augmented when `t ~ U{1..T}`.
    pub fn expected_aug_fraction(&self, schedule: &NoiseSchedule) -> f64 {
        let t = schedule.horizon() as f64;
        self.aug_prob * (t - self.tau as f64) / t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleOrigin {
    Original,
    Augmented,
}

/// Draws the dataset a slot at timestep `t` reads from.
pub fn sample_source(t: u32, gate: &GateParams, seed: u64) -> SampleOrigin {
    if t <= gate.tau {
        return SampleOrigin::Original;
    }
    let mut rng = SplitMix64::derive(seed, &[lane::GATE]);
    if rng.random_bool(gate.aug_prob) {
        SampleOrigin::Augmented
    } else {
        SampleOrigin::Original
    }
}

/// One `(x0, caption)` pair, optionally with a token mask restricting the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub pixels: Arc<Vec<f64>>,
    pub caption: String,
    pub mask: Option<TokenMask>,
}

/// Indexable source of training pairs. `seed` drives any online augmentation
/// and is derived per slot, so examples are reproducible.
pub trait Dataset: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn example(&self, index: usize, seed: u64) -> Result<Example>;
}

/// Image shape shared by every example of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn pixels(&self) -> usize {
        self.width * self.height * self.channels
    }
}

#[derive(Debug, Clone)]
pub struct InMemoryDataset {
    shape: ImageShape,
    items: Vec<(Arc<Vec<f64>>, String)>,
}

impl InMemoryDataset {
    pub fn new(shape: ImageShape) -> Self {
        Self {
            shape,
            items: Vec::new(),
        }
    }

    pub fn push(&mut self, pixels: Arc<Vec<f64>>, caption: impl Into<String>) -> Result<()> {
        if pixels.len() != self.shape.pixels() {
            return Err(Error::Argument(format!(
                "example has {} values, dataset shape needs {}",
                pixels.len(),
                self.shape.pixels()
            )));
        }
        self.items.push((pixels, caption.into()));
        Ok(())
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn items(&self) -> &[(Arc<Vec<f64>>, String)] {
        &self.items
    }
}

impl Dataset for InMemoryDataset {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn example(&self, index: usize, _seed: u64) -> Result<Example> {
        let (pixels, caption) = self
            .items
            .get(index)
            .ok_or_else(|| Error::Argument(format!("example index {index} out of range")))?;
        Ok(Example {
            pixels: Arc::clone(pixels),
            caption: caption.clone(),
            mask: None,
        })
    }
}

/// Online crop branch over another dataset: same pixels, caption prefixed
/// with crop tokens, loss restricted to the tokens inside a fresh crop.
pub struct CropBranch<'a, D: Dataset> {
    inner: &'a D,
    grid_w: usize,
    grid_h: usize,
}

impl<'a, D: Dataset> CropBranch<'a, D> {
    pub fn new(inner: &'a D, grid_w: usize, grid_h: usize) -> Self {
        Self { inner, grid_w, grid_h }
    }
}

impl<D: Dataset> Dataset for CropBranch<'_, D> {
    fn len(&self) -> usize {
        self.inner.len()
    }

    fn example(&self, index: usize, seed: u64) -> Result<Example> {
        let mut ex = self.inner.example(index, seed)?;
        let crop = sample_crop(split(seed, lane::CROP));
        ex.mask = Some(patch_mask(&crop, self.grid_w, self.grid_h)?);
        ex.caption = format!("{}{}", crop_tokens(&crop), ex.caption);
        Ok(ex)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub x_t: Vec<f64>,
    /// Noise that produced `x_t`; the regression target.
    pub eps: Vec<f64>,
    pub caption: String,
    pub mask: Option<TokenMask>,
    pub t: u32,
    pub source: SampleOrigin,
}

/// Builds `m` training samples following the gated batch construction. Slot
/// `i` only reads streams derived from `split(seed, i)`, so the batch is the
/// same whatever the thread count.
pub fn build_batch(
    original: &dyn Dataset,
    augmented: Option<&dyn Dataset>,
    gate: &GateParams,
    schedule: &NoiseSchedule,
    m: usize,
    seed: u64,
) -> Result<Vec<TrainSample>> {
    if m == 0 {
        return Err(Error::Argument("batch size must be at least 1".into()));
    }
    gate.validate(schedule)?;
    if original.is_empty() {
        return Err(Error::Config("original dataset is empty".into()));
    }
    let augmented = match augmented {
        Some(a) if !a.is_empty() => Some(a),
        _ if gate.aug_prob > 0.0 => {
            return Err(Error::Config(
                "aug_prob > 0 requires a non-empty augmented dataset".into(),
            ))
        }
        _ => None,
    };

    par::try_map_range(m, |i| {
        let slot = split(seed, i as u64);
        let t = SplitMix64::derive(slot, &[lane::TIMESTEP]).random_range(1..=schedule.horizon());
        let orig_index = SplitMix64::derive(slot, &[lane::ORIGINAL]).random_range(0..original.len());
        let source = sample_source(t, gate, slot);
        let ex = match (source, augmented) {
            (SampleOrigin::Augmented, Some(aug)) => {
                let idx = SplitMix64::derive(slot, &[lane::AUGMENTED]).random_range(0..aug.len());
                aug.example(idx, split(slot, lane::AUGMENTED))?
            }
            _ => original.example(orig_index, split(slot, lane::ORIGINAL))?,
        };
        let mut noise_rng = SplitMix64::derive(slot, &[lane::NOISE]);
        let eps: Vec<f64> = (0..ex.pixels.len())
            .map(|_| noise_rng.sample(StandardNormal))
            .collect();
        let x_t = noise(&ex.pixels, t, &eps, schedule)?;
        Ok(TrainSample {
            x_t,
            eps,
            caption: ex.caption,
            mask: ex.mask,
            t,
            source,
        })
    })
}

/// Ungated diffusion batch (original data only).
pub fn build_plain_batch(
    original: &dyn Dataset,
    schedule: &NoiseSchedule,
    m: usize,
    seed: u64,
) -> Result<Vec<TrainSample>> {
    build_batch(original, None, &GateParams::disabled(schedule), schedule, m, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, value: f64) -> InMemoryDataset {
        let shape = ImageShape {
            width: 4,
            height: 4,
            channels: 1,
        };
        let mut d = InMemoryDataset::new(shape);
        for i in 0..n {
            d.push(Arc::new(vec![value + i as f64 * 0.01; 16]), format!("item {i}"))
                .unwrap();
        }
        d
    }

    #[test]
    fn gamma_endpoints() {
        let s = NoiseSchedule::default();
        assert!((s.gamma(0).unwrap() - 1.0).abs() <= 1e-12);
        assert!((s.gamma(500).unwrap() - 0.5).abs() <= 1e-12);
        assert_eq!(s.gamma(1000).unwrap(), GAMMA_FLOOR);
        assert!(s.gamma(1000).unwrap() <= 1e-4);
        assert!(matches!(s.gamma(1001), Err(Error::Argument(_))));
    }

    #[test]
    fn gamma_monotone() {
        let s = NoiseSchedule::default();
        for t in 1..=1000 {
            let (a, b) = (s.gamma_unchecked(t - 1), s.gamma_unchecked(t));
            assert!(b <= a);
            if b > GAMMA_FLOOR {
                assert!(b < a, "not strictly decreasing at {t}");
            }
        }
    }

    #[test]
    fn noise_endpoints_and_shape() {
        let s = NoiseSchedule::default();
        let x0 = vec![0.5, -0.25, 1.0];
        let eps = vec![1.5, 0.1, -2.0];
        assert_eq!(noise(&x0, 0, &eps, &s).unwrap(), x0);
        let xt = noise(&x0, 1000, &eps, &s).unwrap();
        let bound = GAMMA_FLOOR.sqrt() * 1.0 + (1.0 - (1.0 - GAMMA_FLOOR).sqrt()) * 2.0;
        for (a, e) in xt.iter().zip(&eps) {
            assert!((a - e).abs() <= bound + 1e-15);
        }
        assert!(noise(&x0, 3, &eps[..2], &s).is_err());
    }

    #[test]
    fn noising_is_linear_in_x0() {
        let s = NoiseSchedule::default();
        let x0 = [0.3, -0.7, 0.9, 0.0];
        let eps = vec![0.2, -1.1, 0.4, 2.0];
        let zero = vec![0.0; 4];
        for t in [1, 250, 777] {
            let a = 1.7;
            let scaled: Vec<f64> = x0.iter().map(|v| a * v).collect();
            let lhs = noise(&scaled, t, &eps, &s).unwrap();
            let base = noise(&zero, t, &eps, &s).unwrap();
            let g = s.gamma(t).unwrap().sqrt();
            for i in 0..4 {
                assert!((lhs[i] - base[i] - g * a * x0[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn below_threshold_is_always_original() {
        let gate = GateParams { tau: 400, aug_prob: 1.0 };
        for t in 1..=400 {
            assert_eq!(sample_source(t, &gate, t as u64 * 17), SampleOrigin::Original);
        }
        let open = GateParams { tau: 0, aug_prob: 1.0 };
        for t in 1..=1000 {
            assert_eq!(sample_source(t, &open, t as u64), SampleOrigin::Augmented);
        }
    }

    #[test]
    fn tau_at_horizon_gives_only_originals() {
        let s = NoiseSchedule::default();
        let (orig, aug) = (toy(5, 0.0), toy(5, 0.5));
        let gate = GateParams { tau: 1000, aug_prob: 1.0 };
        let batch = build_batch(&orig, Some(&aug), &gate, &s, 500, 3).unwrap();
        assert!(batch.iter().all(|b| b.source == SampleOrigin::Original));
    }

    #[test]
    fn zero_prob_matches_plain_batch() {
        let s = NoiseSchedule::default();
        let (orig, aug) = (toy(5, 0.0), toy(5, 0.5));
        let gate = GateParams { tau: 100, aug_prob: 0.0 };
        let a = build_batch(&orig, Some(&aug), &gate, &s, 64, 11).unwrap();
        let b = build_plain_batch(&orig, &s, 64, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_augmented_with_positive_prob_is_config_error() {
        let s = NoiseSchedule::default();
        let orig = toy(3, 0.0);
        let gate = GateParams { tau: 400, aug_prob: 0.5 };
        assert!(matches!(build_batch(&orig, None, &gate, &s, 4, 0), Err(Error::Config(_))));
        let empty = toy(0, 0.0);
        assert!(matches!(
            build_batch(&orig, Some(&empty), &gate, &s, 4, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn batch_deterministic_across_threads() {
        let s = NoiseSchedule::default();
        let (orig, aug) = (toy(7, 0.0), toy(3, 0.5));
        let gate = GateParams { tau: 400, aug_prob: 0.5 };
        let a = par::with_threads(1, || build_batch(&orig, Some(&aug), &gate, &s, 100, 5).unwrap());
        let b = par::with_threads(4, || build_batch(&orig, Some(&aug), &gate, &s, 100, 5).unwrap());
        assert_eq!(a, b);
        assert!(a.iter().all(|x| x.t >= 1 && x.t <= 1000));
    }

    #[test]
    fn crop_branch_prefixes_and_masks() {
        let orig = toy(2, 0.0);
        let branch = CropBranch::new(&orig, 2, 2);
        let ex = branch.example(1, 99).unwrap();
        assert!(ex.caption.starts_with("<crop ") && ex.caption.ends_with("item 1"));
        assert!(ex.mask.is_some());
        assert_eq!(ex, branch.example(1, 99).unwrap());
    }
}
