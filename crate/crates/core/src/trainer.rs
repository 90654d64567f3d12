//! Desk-scale conditional denoiser and its training and sampling loops.
//!
//! The noise predictor is a two-layer perceptron over
//! `[x_t | time embedding | text embedding]` with a tanh hidden layer. Its
//! gradient is computed analytically. Fixed-size chunks of a batch are
//! differentiated in parallel and their sums are added in chunk order.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cropaug::TokenMask;
use crate::error::{Error, Result};
use crate::par;
use crate::rng::{fnv1a, lane, split, split_path, SplitMix64};
use crate::schedule::{
    build_batch, CropBranch, Dataset, GateParams, ImageShape, NoiseSchedule, SampleOrigin, TrainSample,
};

pub const DEFAULT_TEXT_DIM: usize = 64;
pub const DEFAULT_HIDDEN: usize = 256;
pub const TIME_FREQUENCIES: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    vector: Vec<f64>,
}

impl TextEmbedding {
    pub fn null(dim: usize) -> Self {
        Self {
            vector: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.vector
    }

    pub fn is_null(&self) -> bool {
        self.vector.iter().all(|&v| v == 0.0)
    }

    pub fn cosine(&self, other: &TextEmbedding) -> f64 {
        let dot: f64 = self.vector.iter().zip(&other.vector).map(|(a, b)| a * b).sum();
        let na = self.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = other.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        dot / (na * nb)
    }
}

/// Hashed bag-of-tokens embedding: lowercase, split on anything that is not
/// alphanumeric, hash each token to a signed bucket, L2-normalize. A caption
/// without tokens maps to the all-zero null condition.
pub fn embed_text(caption: &str, dim: usize) -> Result<TextEmbedding> {
    if dim < 8 {
        return Err(Error::Argument(format!("embedding dim {dim} is below 8")));
    }
    let mut v = vec![0.0; dim];
    let lower = caption.to_lowercase();
    for token in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
        let h = fnv1a(token.as_bytes());
        let bucket = (h % dim as u64) as usize;
        v[bucket] += if h >> 63 == 0 { 1.0 } else { -1.0 };
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    Ok(TextEmbedding { vector: v })
}

/// Sinusoidal features of `t / T` at frequencies geometrically spaced in
/// `[1, 100]`: `[sin(ω_k s), cos(ω_k s)]` for each frequency.
pub fn time_embedding(t: u32, horizon: u32, freqs: usize) -> Vec<f64> {
    let s = t as f64 / horizon as f64;
    let mut out = Vec::with_capacity(2 * freqs);
    for k in 0..freqs {
        let omega = if freqs > 1 {
            100f64.powf(k as f64 / (freqs - 1) as f64)
        } else {
            1.0
        };
        out.push((omega * s).sin());
        out.push((omega * s).cos());
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserShape {
    pub image: ImageShape,
    pub hidden: usize,
    pub text_dim: usize,
    pub time_freqs: usize,
    pub horizon: u32,
}

impl DenoiserShape {
    pub fn pixels(&self) -> usize {
        self.image.pixels()
    }

    pub fn input_dim(&self) -> usize {
        self.pixels() + 2 * self.time_freqs + self.text_dim
    }

    /// `W1 (hidden x input) | b1 | W2 (pixels x hidden) | b2`.
    pub fn param_count(&self) -> usize {
        let (i, h, p) = (self.input_dim(), self.hidden, self.pixels());
        h * i + h + p * h + p
    }

    fn offsets(&self) -> [usize; 4] {
        let (i, h, p) = (self.input_dim(), self.hidden, self.pixels());
        let w1 = 0;
        let b1 = w1 + h * i;
        let w2 = b1 + h;
        let b2 = w2 + p * h;
        [w1, b1, w2, b2]
    }
}

/// Dot product with a fixed 4-lane summation order.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    shape: DenoiserShape,
    params: Vec<f64>,
}

struct Forward {
    input: Vec<f64>,
    hidden: Vec<f64>,
    output: Vec<f64>,
}

impl Denoiser {
    pub fn from_params(shape: DenoiserShape, params: Vec<f64>) -> Result<Self> {
        if params.len() != shape.param_count() {
            return Err(Error::Argument(format!(
                "expected {} parameters, got {}",
                shape.param_count(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        Ok(Self { shape, params })
    }

    /// Gaussian init scaled by `1/√fan_in`, zero biases.
    pub fn init(shape: DenoiserShape, seed: u64) -> Self {
        let mut rng = SplitMix64::derive(seed, &[lane::INIT]);
        let [_, b1, w2, b2] = shape.offsets();
        let mut params = vec![0.0; shape.param_count()];
        let s1 = 1.0 / (shape.input_dim() as f64).sqrt();
        let s2 = 1.0 / (shape.hidden as f64).sqrt();
        for p in &mut params[..b1] {
            *p = s1 * rng.sample::<f64, _>(StandardNormal);
        }
        for p in &mut params[w2..b2] {
            *p = s2 * rng.sample::<f64, _>(StandardNormal);
        }
        Self { shape, params }
    }

    pub fn shape(&self) -> &DenoiserShape {
        &self.shape
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn assemble_input(&self, x_t: &[f64], t: u32, text: &[f64]) -> Vec<f64> {
        let mut input = Vec::with_capacity(self.shape.input_dim());
        input.extend_from_slice(x_t);
        input.extend(time_embedding(t, self.shape.horizon, self.shape.time_freqs));
        input.extend_from_slice(text);
        input
    }

    fn forward(&self, x_t: &[f64], t: u32, text: &[f64]) -> Forward {
        let s = &self.shape;
        let [w1, b1, w2, b2] = s.offsets();
        let input = self.assemble_input(x_t, t, text);
        let n_in = input.len();
        let hidden: Vec<f64> = (0..s.hidden)
            .map(|j| {
                let row = &self.params[w1 + j * n_in..w1 + (j + 1) * n_in];
                let z = self.params[b1 + j] + dot(row, &input);
                z.tanh()
            })
            .collect();
        let output = (0..s.pixels())
            .map(|p| {
                let row = &self.params[w2 + p * s.hidden..w2 + (p + 1) * s.hidden];
                self.params[b2 + p] + dot(row, &hidden)
            })
            .collect();
        Forward { input, hidden, output }
    }

    /// Predicted noise for `x_t` at timestep `t` under a text condition.
    pub fn predict(&self, x_t: &[f64], t: u32, text: &TextEmbedding) -> Result<Vec<f64>> {
        if x_t.len() != self.shape.pixels() || text.dim() != self.shape.text_dim {
            return Err(Error::Argument("input does not match denoiser shape".into()));
        }
        Ok(self.forward(x_t, t, text.as_slice()).output)
    }

    /// Accumulates `∂loss/∂θ` for one sample into `grad`, given
    /// `∂loss/∂output`.
    fn backward(&self, fwd: &Forward, d_out: &[f64], grad: &mut [f64]) {
        let s = &self.shape;
        let [w1, b1, w2, b2] = s.offsets();
        let n_in = fwd.input.len();
        let mut d_hidden = vec![0.0; s.hidden];
        for (p, &d) in d_out.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            grad[b2 + p] += d;
            let g_row = &mut grad[w2 + p * s.hidden..w2 + (p + 1) * s.hidden];
            for (g, a) in g_row.iter_mut().zip(&fwd.hidden) {
                *g += d * a;
            }
            let w_row = &self.params[w2 + p * s.hidden..w2 + (p + 1) * s.hidden];
            for (dh, w) in d_hidden.iter_mut().zip(w_row) {
                *dh += d * w;
            }
        }
        for j in 0..s.hidden {
            let a = fwd.hidden[j];
            let dz = d_hidden[j] * (1.0 - a * a);
            if dz == 0.0 {
                continue;
            }
            grad[b1 + j] += dz;
            let g_row = &mut grad[w1 + j * n_in..w1 + (j + 1) * n_in];
            for (g, x) in g_row.iter_mut().zip(&fwd.input) {
                *g += dz * x;
            }
        }
    }
}

/// Per-pixel inclusion flags for a sample: all true without a mask.
fn pixel_flags(mask: Option<&TokenMask>, image: &ImageShape) -> Result<Option<Vec<bool>>> {
    mask.map(|m| m.pixel_mask(image.width, image.height, image.channels))
        .transpose()
}

/// Mean squared error over the pixels whose token is inside `mask`
/// (all pixels when `mask` is `None`).
pub fn masked_loss(eps: &[f64], eps_hat: &[f64], mask: Option<&TokenMask>, image: &ImageShape) -> Result<f64> {
    let flags = check_loss_inputs(eps, eps_hat, mask, image)?;
    let (sum, n) = eps
        .iter()
        .zip(eps_hat)
        .enumerate()
        .filter(|(i, _)| flags.as_ref().is_none_or(|f| f[*i]))
        .fold((0.0, 0usize), |(s, n), (_, (e, h))| (s + (e - h) * (e - h), n + 1));
    Ok(sum / n as f64)
}

/// `∂ masked_loss / ∂ eps_hat`; exactly zero at masked-out pixels.
pub fn masked_loss_grad(
    eps: &[f64],
    eps_hat: &[f64],
    mask: Option<&TokenMask>,
    image: &ImageShape,
) -> Result<Vec<f64>> {
    let flags = check_loss_inputs(eps, eps_hat, mask, image)?;
    Ok(loss_grad_with_flags(eps, eps_hat, flags.as_deref()))
}

fn loss_grad_with_flags(eps: &[f64], eps_hat: &[f64], flags: Option<&[bool]>) -> Vec<f64> {
    let n = flags.map_or(eps.len(), |f| f.iter().filter(|&&b| b).count()) as f64;
    eps.iter()
        .zip(eps_hat)
        .enumerate()
        .map(|(i, (e, h))| {
            if flags.is_none_or(|f| f[i]) {
                2.0 * (h - e) / n
            } else {
                0.0
            }
        })
        .collect()
}

fn check_loss_inputs(
    eps: &[f64],
    eps_hat: &[f64],
    mask: Option<&TokenMask>,
    image: &ImageShape,
) -> Result<Option<Vec<bool>>> {
    if eps.len() != eps_hat.len() || eps.len() != image.pixels() {
        return Err(Error::Argument(format!(
            "loss inputs of length {} and {} do not match image of {} values",
            eps.len(),
            eps_hat.len(),
            image.pixels()
        )));
    }
    pixel_flags(mask, image)
}

/// Samples per work item when accumulating gradients. Fixed, so the
/// summation order does not depend on the thread count.
const GRAD_CHUNK: usize = 4;

/// Batch-mean masked loss and its exact gradient with respect to θ.
pub fn loss_and_grad(denoiser: &Denoiser, batch: &[TrainSample]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Argument("batch is empty".into()));
    }
    let shape = denoiser.shape;
    let chunks = batch.len().div_ceil(GRAD_CHUNK);
    let partial = par::try_map_range(chunks, |c| {
        let mut g = vec![0.0; shape.param_count()];
        let mut loss = 0.0;
        let start = c * GRAD_CHUNK;
        let end = (start + GRAD_CHUNK).min(batch.len());
        for (i, s) in batch.iter().enumerate().take(end).skip(start) {
            let text = embed_text(&s.caption, shape.text_dim)?;
            let fwd = denoiser.forward(&s.x_t, s.t, text.as_slice());
            if fwd.output.iter().chain(&fwd.hidden).any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite activation in sample {i}")));
            }
            let flags = check_loss_inputs(&s.eps, &fwd.output, s.mask.as_ref(), &shape.image)?;
            loss += masked_loss(&s.eps, &fwd.output, s.mask.as_ref(), &shape.image)?;
            let d_out = loss_grad_with_flags(&s.eps, &fwd.output, flags.as_deref());
            denoiser.backward(&fwd, &d_out, &mut g);
        }
        Ok((loss, g))
    })?;
    let scale = 1.0 / batch.len() as f64;
    let mut parts = partial.into_iter();
    let (mut loss, mut grad) = parts.next().expect("batch is non-empty");
    for (l, g) in parts {
        loss += l;
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc += v;
        }
    }
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((loss * scale, grad))
}

pub fn grad(denoiser: &Denoiser, batch: &[TrainSample]) -> Result<Vec<f64>> {
    loss_and_grad(denoiser, batch).map(|(_, g)| g)
}

/// Batch-mean masked loss without the gradient.
pub fn batch_loss(denoiser: &Denoiser, batch: &[TrainSample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Argument("batch is empty".into()));
    }
    let shape = denoiser.shape;
    let losses = par::try_map_range(batch.len(), |i| {
        let s = &batch[i];
        let text = embed_text(&s.caption, shape.text_dim)?;
        let out = denoiser.forward(&s.x_t, s.t, text.as_slice()).output;
        masked_loss(&s.eps, &out, s.mask.as_ref(), &shape.image)
    })?;
    Ok(losses.iter().sum::<f64>() / batch.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub horizon: u32,
    pub gate: GateParams,
    pub crop_prob: f64,
    /// Crop token grid is `width / patch_size` x `height / patch_size`.
    pub patch_size: usize,
    pub uncond_drop: f64,
    pub hidden: usize,
    pub text_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 32,
            steps: 2000,
            lr: 1e-3,
            horizon: crate::schedule::DEFAULT_HORIZON,
            gate: GateParams {
                tau: 400,
                aug_prob: 0.5,
            },
            crop_prob: 0.0,
            patch_size: 2,
            uncond_drop: 0.1,
            hidden: DEFAULT_HIDDEN,
            text_dim: DEFAULT_TEXT_DIM,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if !(0.0..=1.0).contains(&self.uncond_drop) {
            return bad(format!("uncond_drop {} outside [0, 1]", self.uncond_drop));
        }
        if !(0.0..=1.0).contains(&self.crop_prob) {
            return bad(format!("crop_prob {} outside [0, 1]", self.crop_prob));
        }
        if self.patch_size == 0 || self.hidden == 0 || self.text_dim < 8 {
            return bad("patch_size, hidden must be positive and text_dim at least 8".into());
        }
        self.gate.validate(&NoiseSchedule::new(self.horizon)?)
    }

    pub fn denoiser_shape(&self, image: ImageShape) -> DenoiserShape {
        DenoiserShape {
            image,
            hidden: self.hidden,
            text_dim: self.text_dim,
            time_freqs: TIME_FREQUENCIES,
            horizon: self.horizon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub loss: f64,
    pub n_aug: usize,
    pub n_dropped: usize,
    pub batch: usize,
}

/// Applies classifier-free-guidance condition dropout to a batch in place;
/// returns how many captions were replaced by the null condition.
pub fn apply_uncond_drop(batch: &mut [TrainSample], prob: f64, seed: u64) -> usize {
    let mut dropped = 0;
    for (i, s) in batch.iter_mut().enumerate() {
        let mut rng = SplitMix64::derive(seed, &[i as u64, lane::DROP]);
        if rng.random_bool(prob) {
            s.caption.clear();
            dropped += 1;
        }
    }
    dropped
}

/// Trains from a fresh initialization. `original` supplies `(x0, caption)`
/// pairs of shape `image`; `cutmix` is the optional augmented set admitted by
/// the gate. With `crop_prob > 0` the crop branch of `original` is used as the
/// augmented set instead, ungated.
pub fn train(
    config: &TrainConfig,
    image: ImageShape,
    original: &dyn Dataset,
    cutmix: Option<&dyn Dataset>,
) -> Result<(Denoiser, Vec<LossReport>)> {
    let init = Denoiser::init(config.denoiser_shape(image), split(config.seed, lane::INIT));
    train_from(config, init, original, cutmix)
}

pub fn train_from(
    config: &TrainConfig,
    mut model: Denoiser,
    original: &dyn Dataset,
    cutmix: Option<&dyn Dataset>,
) -> Result<(Denoiser, Vec<LossReport>)> {
    config.validate()?;
    let schedule = NoiseSchedule::new(config.horizon)?;
    let image = model.shape.image;
    if model.shape != config.denoiser_shape(image) {
        return Err(Error::Config("model shape does not match config".into()));
    }

    struct Wrap<'a>(&'a dyn Dataset);
    impl Dataset for Wrap<'_> {
        fn len(&self) -> usize {
            self.0.len()
        }
        fn example(&self, index: usize, seed: u64) -> Result<crate::schedule::Example> {
            self.0.example(index, seed)
        }
    }
    let wrapped = Wrap(original);
    let crop_branch;
    let (augmented, gate): (Option<&dyn Dataset>, GateParams) = match (cutmix, config.crop_prob > 0.0) {
        (Some(_), true) => {
            return Err(Error::Config(
                "cutmix data and crop_prob > 0 cannot be combined in one run".into(),
            ))
        }
        (Some(c), false) => (Some(c), config.gate),
        (None, true) => {
            if !image.width.is_multiple_of(config.patch_size) || !image.height.is_multiple_of(config.patch_size) {
                return Err(Error::Config(format!(
                    "patch_size {} does not divide {}x{}",
                    config.patch_size, image.width, image.height
                )));
            }
            crop_branch = CropBranch::new(
                &wrapped,
                image.width / config.patch_size,
                image.height / config.patch_size,
            );
            (
                Some(&crop_branch as &dyn Dataset),
                GateParams {
                    tau: 0,
                    aug_prob: config.crop_prob,
                },
            )
        }
        (None, false) => (None, GateParams::disabled(&schedule)),
    };

    let mut reports = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let step_seed = split_path(config.seed, &[lane::BATCH, step as u64]);
        let mut batch = build_batch(original, augmented, &gate, &schedule, config.batch, step_seed)?;
        let n_aug = batch.iter().filter(|s| s.source == SampleOrigin::Augmented).count();
        let n_dropped = apply_uncond_drop(&mut batch, config.uncond_drop, step_seed);
        let (loss, g) = loss_and_grad(&model, &batch).map_err(|e| Error::Training {
            step,
            message: e.to_string(),
        })?;
        if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training {
                step,
                message: format!("loss is {loss}"),
            });
        }
        for (p, gi) in model.params.iter_mut().zip(&g) {
            *p -= config.lr * gi;
        }
        reports.push(LossReport {
            step,
            loss,
            n_aug,
            n_dropped,
            batch: config.batch,
        });
    }
    Ok((model, reports))
}

/// Ancestral sampling from `x_T ~ N(0, I)` down to `t = 1` with
/// classifier-free guidance `ε̂ = (1+w)·ε(x, c) − w·ε(x, ∅)`.
///
/// Each step forms `x̂0 = (x_t − √(1−γ_t)·ε̂)/√γ_t`, clips it to `[-1, 1]` and
/// draws from the Gaussian posterior `q(x_{t−1} | x_t, x̂0)`. Without clipping
/// this is the usual `ε`-parameterized update.
pub fn sample(
    denoiser: &Denoiser,
    caption: &str,
    schedule: &NoiseSchedule,
    guidance_scale: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if !(guidance_scale >= 0.0 && guidance_scale.is_finite()) {
        return Err(Error::Argument(format!("guidance scale {guidance_scale} must be >= 0")));
    }
    let shape = denoiser.shape;
    if schedule.horizon() != shape.horizon {
        return Err(Error::Argument(format!(
            "schedule horizon {} differs from the model's {}",
            schedule.horizon(),
            shape.horizon
        )));
    }
    let cond = embed_text(caption, shape.text_dim)?;
    let uncond = TextEmbedding::null(shape.text_dim);
    let mut init_rng = SplitMix64::derive(seed, &[lane::NOISE, 0]);
    let mut x: Vec<f64> = (0..shape.pixels())
        .map(|_| init_rng.sample(StandardNormal))
        .collect();

    for t in (1..=schedule.horizon()).rev() {
        let eps_c = denoiser.forward(&x, t, cond.as_slice()).output;
        let eps_hat: Vec<f64> = if guidance_scale > 0.0 {
            let eps_u = denoiser.forward(&x, t, uncond.as_slice()).output;
            eps_c
                .iter()
                .zip(&eps_u)
                .map(|(c, u)| (1.0 + guidance_scale) * c - guidance_scale * u)
                .collect()
        } else {
            eps_c
        };
        let g_t = schedule.gamma_unchecked(t);
        let g_prev = schedule.gamma_unchecked(t - 1);
        let alpha = (g_t / g_prev).min(1.0);
        let beta = (1.0 - alpha).clamp(0.0, 0.999);
        let alpha = 1.0 - beta;
        let coef_x0 = g_prev.sqrt() * beta / (1.0 - g_t);
        let coef_xt = alpha.sqrt() * (1.0 - g_prev) / (1.0 - g_t);
        let sigma = (beta * (1.0 - g_prev) / (1.0 - g_t)).max(0.0).sqrt();
        let mut z_rng = SplitMix64::derive(seed, &[lane::NOISE, t as u64]);
        for (xi, e) in x.iter_mut().zip(&eps_hat) {
            let x0 = ((*xi - (1.0 - g_t).sqrt() * e) / g_t.sqrt()).clamp(-1.0, 1.0);
            let mean = coef_x0 * x0 + coef_xt * *xi;
            *xi = if t > 1 {
                mean + sigma * z_rng.sample::<f64, _>(StandardNormal)
            } else {
                mean
            };
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Sampling(format!("non-finite value at t = {t}")));
        }
    }
    x.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    Ok(x)
}

pub const CHECKPOINT_MAGIC: &[u8] = b"T2IFORGE-CKPT\0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub shape: DenoiserShape,
    pub config: TrainConfig,
}

/// Magic, one JSON line echoing the configuration, then θ as little-endian
/// f32 in declaration order.
pub fn write_checkpoint<W: Write>(mut w: W, meta: &CheckpointMeta, model: &Denoiser) -> Result<()> {
    if meta.shape != model.shape {
        return Err(Error::Argument("checkpoint metadata does not match model".into()));
    }
    w.write_all(CHECKPOINT_MAGIC)?;
    serde_json::to_writer(&mut w, meta)?;
    w.write_all(b"\n")?;
    let mut bytes = Vec::with_capacity(model.params.len() * 4);
    for &p in &model.params {
        bytes.extend_from_slice(&(p as f32).to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<(CheckpointMeta, Denoiser)> {
    let mut r = std::io::BufReader::new(r);
    let mut magic = vec![0u8; CHECKPOINT_MAGIC.len()];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated checkpoint header".into()))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a t2i-forge checkpoint".into()));
    }
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    let meta: CheckpointMeta = serde_json::from_slice(&line)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    let n = meta.shape.param_count();
    if rest.len() != 4 * n {
        return Err(Error::Format(format!(
            "checkpoint holds {} parameter bytes, expected {}",
            rest.len(),
            4 * n
        )));
    }
    let params = rest
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let model = Denoiser::from_params(meta.shape, params)?;
    Ok((meta, model))
}

pub fn save_checkpoint(path: &Path, meta: &CheckpointMeta, model: &Denoiser) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io_at(parent, e))?;
    }
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, meta, model)?;
    std::fs::write(path, buf).map_err(|e| Error::io_at(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, Denoiser)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io_at(path, e))?;
    read_checkpoint(file)
}

/// Loss CSV with columns `step,loss,n_aug`.
pub fn write_loss_csv<W: Write>(mut w: W, reports: &[LossReport]) -> Result<()> {
    writeln!(w, "step,loss,n_aug")?;
    for r in reports {
        writeln!(w, "{},{},{}", r.step, r.loss, r.n_aug)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::InMemoryDataset;
    use std::sync::Arc;

    fn tiny_shape() -> DenoiserShape {
        DenoiserShape {
            image: ImageShape {
                width: 4,
                height: 4,
                channels: 1,
            },
            hidden: 6,
            text_dim: 8,
            time_freqs: 2,
            horizon: 100,
        }
    }

    #[test]
    fn empty_caption_is_null() {
        assert!(embed_text("", 64).unwrap().is_null());
        assert!(embed_text("  ,; ", 64).unwrap().is_null());
        assert!(embed_text("x", 4).is_err());
    }

    #[test]
    fn bag_of_tokens_ignores_order_and_case() {
        let a = embed_text("red cube on a table", 64).unwrap();
        let b = embed_text("Table a on CUBE red", 64).unwrap();
        assert_eq!(a, b);
        let n: f64 = a.as_slice().iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn distinct_words_differ() {
        // Oracle: "red" and "blue" must land in different signed buckets at
        // dim 64, otherwise the embeddings would coincide.
        let (hr, hb) = (fnv1a(b"red"), fnv1a(b"blue"));
        assert!(hr % 64 != hb % 64 || (hr >> 63) != (hb >> 63));
        let a = embed_text("red cube", 64).unwrap();
        let b = embed_text("blue cube", 64).unwrap();
        assert!(a.cosine(&b) < 1.0);
    }

    #[test]
    fn masked_loss_basics() {
        let image = ImageShape { width: 2, height: 2, channels: 1 };
        let eps = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(masked_loss(&eps, &eps, None, &image).unwrap(), 0.0);
        let hat = [0.0, 0.0, 0.0, 1.0];
        let mse = (0.01 + 0.04 + 0.09 + 0.36) / 4.0;
        let full = TokenMask::full(2, 2);
        assert!((masked_loss(&eps, &hat, None, &image).unwrap() - mse).abs() < 1e-15);
        assert!((masked_loss(&eps, &hat, Some(&full), &image).unwrap() - mse).abs() < 1e-15);
        let bad = TokenMask::full(3, 1);
        assert!(matches!(masked_loss(&eps, &hat, Some(&bad), &image), Err(Error::Argument(_))));
    }

    #[test]
    fn masked_out_pixels_do_not_matter() {
        let image = ImageShape { width: 4, height: 4, channels: 1 };
        let eps: Vec<f64> = (0..16).map(|i| i as f64 * 0.1).collect();
        let hat: Vec<f64> = (0..16).map(|i| (i as f64).sin()).collect();
        let mut bits = vec![false; 4];
        bits[0] = true;
        let mask = TokenMask::new(2, 2, bits).unwrap();
        let base = masked_loss(&eps, &hat, Some(&mask), &image).unwrap();
        let inside = [0usize, 1, 4, 5];
        for p in 0..16 {
            let mut h2 = hat.clone();
            h2[p] += 3.0;
            let l = masked_loss(&eps, &h2, Some(&mask), &image).unwrap();
            if inside.contains(&p) {
                assert_ne!(l, base);
            } else {
                assert_eq!(l, base);
            }
        }
        let g = masked_loss_grad(&eps, &hat, Some(&mask), &image).unwrap();
        for p in 0..16 {
            assert_eq!(g[p] == 0.0, !inside.contains(&p) || eps[p] == hat[p]);
        }
    }

    fn random_batch(shape: &DenoiserShape, n: usize, seed: u64, masked: bool) -> Vec<TrainSample> {
        let mut rng = SplitMix64::new(seed);
        (0..n)
            .map(|i| TrainSample {
                x_t: (0..shape.pixels()).map(|_| rng.sample(StandardNormal)).collect(),
                eps: (0..shape.pixels()).map(|_| rng.sample(StandardNormal)).collect(),
                caption: if i % 2 == 0 { format!("a red thing {i}") } else { String::new() },
                mask: masked.then(|| TokenMask::new(2, 2, vec![true, false, i % 2 == 0, true]).unwrap()),
                t: rng.random_range(1..=shape.horizon),
                source: SampleOrigin::Original,
            })
            .collect()
    }

    #[test]
    fn zero_network_output_bias_gradient() {
        let shape = tiny_shape();
        let model = Denoiser::from_params(shape, vec![0.0; shape.param_count()]).unwrap();
        let mut batch = random_batch(&shape, 3, 1, false);
        for s in &mut batch {
            s.eps = vec![0.0; shape.pixels()];
        }
        let g = grad(&model, &batch).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));

        // Non-zero targets: ∂L/∂b2_p = mean_i 2(0 − eps_ip)/P.
        let batch = random_batch(&shape, 3, 2, false);
        let g = grad(&model, &batch).unwrap();
        let [_, _, _, b2] = shape.offsets();
        for p in 0..shape.pixels() {
            let expect = batch.iter().map(|s| -2.0 * s.eps[p] / 16.0).sum::<f64>() / 3.0;
            assert!((g[b2 + p] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn duplicated_batch_has_same_gradient() {
        let shape = tiny_shape();
        let model = Denoiser::init(shape, 3);
        let batch = random_batch(&shape, 3, 4, true);
        let doubled: Vec<_> = batch.iter().chain(batch.iter()).cloned().collect();
        let (a, b) = (grad(&model, &batch).unwrap(), grad(&model, &doubled).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let shape = tiny_shape();
        let mut model = Denoiser::init(shape, 9);
        let batch = random_batch(&shape, 3, 10, true);
        let g = grad(&model, &batch).unwrap();
        let h = 1e-4;
        for (i, &gi) in g.iter().enumerate() {
            let orig = model.params[i];
            model.params[i] = orig + h;
            let lp = batch_loss(&model, &batch).unwrap();
            model.params[i] = orig - h;
            let lm = batch_loss(&model, &batch).unwrap();
            model.params[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let rel = (gi - fd).abs() / gi.abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-4, "param {i}: analytic {gi} vs fd {fd}");
        }
    }

    fn toy_data() -> InMemoryDataset {
        let image = ImageShape { width: 4, height: 4, channels: 1 };
        let mut d = InMemoryDataset::new(image);
        d.push(Arc::new(vec![0.5; 16]), "An image of a").unwrap();
        d.push(Arc::new(vec![-0.5; 16]), "An image of b").unwrap();
        d
    }

    fn small_config(steps: usize) -> TrainConfig {
        TrainConfig {
            batch: 4,
            steps,
            lr: 0.01,
            horizon: 50,
            gate: GateParams { tau: 20, aug_prob: 0.0 },
            hidden: 8,
            text_dim: 8,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_steps_keep_initialization() {
        let data = toy_data();
        let cfg = small_config(0);
        let (model, reports) = train(&cfg, data.shape(), &data, None).unwrap();
        assert!(reports.is_empty());
        let init = Denoiser::init(cfg.denoiser_shape(data.shape()), split(cfg.seed, lane::INIT));
        assert_eq!(model, init);
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy_data();
        let cfg = small_config(20);
        let a = train(&cfg, data.shape(), &data, None).unwrap();
        let b = par::with_threads(3, || train(&cfg, data.shape(), &data, None).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn crop_and_cutmix_are_exclusive() {
        let data = toy_data();
        let mut cfg = small_config(1);
        cfg.crop_prob = 0.5;
        assert!(matches!(
            train(&cfg, data.shape(), &data, Some(&data)),
            Err(Error::Config(_))
        ));
        cfg.patch_size = 3;
        assert!(matches!(train(&cfg, data.shape(), &data, None), Err(Error::Config(_))));
        cfg.patch_size = 2;
        let (_, reports) = train(&cfg, data.shape(), &data, None).unwrap();
        assert_eq!(reports.len(), 1);
    }

    #[test]
    fn divergence_reports_step() {
        let data = toy_data();
        let mut cfg = small_config(50);
        cfg.lr = 1e6;
        match train(&cfg, data.shape(), &data, None) {
            Err(Error::Training { step, .. }) => assert!(step < 50),
            other => panic!("expected divergence, got {:?}", other.map(|r| r.1.len())),
        }
    }

    #[test]
    fn uncond_drop_rate() {
        let mut batch: Vec<TrainSample> = (0..10_000)
            .map(|_| TrainSample {
                x_t: vec![],
                eps: vec![],
                caption: "x".into(),
                mask: None,
                t: 1,
                source: SampleOrigin::Original,
            })
            .collect();
        let dropped = apply_uncond_drop(&mut batch, 0.1, 77);
        assert!((dropped as f64 / 10_000.0 - 0.1).abs() <= 0.01, "{dropped}");
        assert_eq!(batch.iter().filter(|s| s.caption.is_empty()).count(), dropped);
    }

    #[test]
    fn sampling_is_deterministic_and_bounded() {
        let shape = tiny_shape();
        let model = Denoiser::init(shape, 1);
        let s = NoiseSchedule::new(100).unwrap();
        let a = sample(&model, "An image of a", &s, 1.5, 3).unwrap();
        assert_eq!(a, sample(&model, "An image of a", &s, 1.5, 3).unwrap());
        assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_ne!(a, sample(&model, "An image of a", &s, 1.5, 4).unwrap());
        assert!(sample(&model, "x", &s, -1.0, 3).is_err());
        assert!(sample(&model, "x", &NoiseSchedule::new(10).unwrap(), 0.0, 3).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let shape = tiny_shape();
        let model = Denoiser::init(shape, 2);
        let meta = CheckpointMeta {
            shape,
            config: small_config(0),
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &meta, &model).unwrap();
        assert!(buf.starts_with(b"T2IFORGE-CKPT\0{"));
        assert_eq!(buf.len() - buf.iter().position(|&b| b == b'\n').unwrap() - 1, 4 * shape.param_count());
        let (m2, back) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(m2, meta);
        for (a, b) in model.params().iter().zip(back.params()) {
            assert_eq!(*a as f32, *b as f32);
        }
        assert!(read_checkpoint(&buf[..buf.len() - 1]).is_err());
        assert!(read_checkpoint(&b"NOPE"[..]).is_err());
    }
}
