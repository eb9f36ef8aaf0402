//! Noise schedule, forward diffusion and the DDPM / DDIM reverse updates.
//!
//! Timesteps are 0-based indices into a schedule of length `T`; "timestep 400
//! out of 1000" is index 399. The latent space is pixel space mapped
//! affinely from `[0, 1]` to `[-1, 1]`.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::freq::ControlSet;
use crate::guidance::GuidedScorer;
use crate::image::ImageGrid;

/// Unbounded raster with the same layout as [`ImageGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl LatentGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::param("shape", format!("{height}x{width}x{channels} has a zero side")));
        }
        if data.len() != height * width * channels {
            return Err(Error::dims(format!(
                "latent data length {} != {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    /// A `1 x n x 1` latent holding a flat vector.
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(1, n, 1, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn like(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.height, self.width, self.channels, data)
    }

    pub fn ensure_same_shape(&self, other: &LatentGrid, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dims(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// Elementwise `f(self, other)`.
    pub fn zip_with(&self, other: &LatentGrid, f: impl Fn(f64, f64) -> f64) -> Result<LatentGrid> {
        self.ensure_same_shape(other, "elementwise op")?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(self.with_data(data))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> LatentGrid {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    fn with_data(&self, data: Vec<f64>) -> LatentGrid {
        debug_assert_eq!(data.len(), self.data.len());
        Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Maps `[0, 1]` pixels to `[-1, 1]` latents.
pub fn encode(img: &ImageGrid) -> LatentGrid {
    let (h, w, c) = img.shape();
    LatentGrid {
        height: h,
        width: w,
        channels: c,
        data: img.data().iter().map(|&v| 2.0 * v - 1.0).collect(),
    }
}

/// Inverse of [`encode`]; values are not clamped.
pub fn decode(z: &LatentGrid) -> ImageGrid {
    let data = z.data.iter().map(|&v| (v + 1.0) * 0.5).collect();
    ImageGrid::from_parts_unchecked(z.height, z.width, z.channels, data, false)
}

/// Per-timestep variance tables of a linear-beta DDPM schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

pub const DEFAULT_TIMESTEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_schedule(DEFAULT_TIMESTEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule parameters are valid")
    }
}

pub fn make_schedule(t_count: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_count < 2 {
        return Err(Error::param("T", format!("need at least 2 timesteps, got {t_count}")));
    }
    if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::param(
            "beta",
            format!("need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"),
        ));
    }
    let step = (beta_end - beta_start) / (t_count - 1) as f64;
    let betas: Vec<f64> = (0..t_count)
        .map(|t| if t == t_count - 1 { beta_end } else { beta_start + step * t as f64 })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars: Vec<f64> = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    let sigmas = alpha_bars.iter().map(|ab| (1.0 - ab).sqrt()).collect();
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
        sigmas,
    })
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::TimestepOutOfRange { t, len: self.len() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }
}

/// Seeded ChaCha8 stream with Box-Muller normal variates.
///
/// Streams are addressable: `NoiseRng::new(seed).with_stream(k)` gives an
/// independent, reproducible sequence per `k`.
#[derive(Debug, Clone)]
pub struct NoiseRng {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl NoiseRng {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn with_stream(mut self, stream: u64) -> Self {
        self.rng.set_stream(stream);
        self.rng.set_word_pos(0);
        self.spare = None;
        self
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.standard_normal()).collect()
    }

    pub fn normal_like(&mut self, shape: &LatentGrid) -> LatentGrid {
        let (h, w, c) = shape.shape();
        LatentGrid {
            height: h,
            width: w,
            channels: c,
            data: self.normal_vec(h * w * c),
        }
    }
}

/// What a denoiser is conditioned on.
#[derive(Debug, Clone, PartialEq)]
pub enum Condition {
    Unconditional,
    /// Identity, concept `S` or negative concept `S̄`, by id.
    Concept(String),
    Control(Arc<ControlSet>),
}

impl Condition {
    pub fn concept(id: impl Into<String>) -> Self {
        Condition::Concept(id.into())
    }
}

/// Noise predictor `eps(z, t, c)`. Implementations must be stateless so one
/// instance can serve concurrent sampling runs.
pub trait Denoiser: Send + Sync {
    fn predict(&self, z: &LatentGrid, t: usize, cond: &Condition) -> Result<LatentGrid>;
}

pub fn forward_diffuse(z0: &LatentGrid, t: usize, noise: &LatentGrid, s: &NoiseSchedule) -> Result<LatentGrid> {
    s.check(t)?;
    let a = s.alpha_bar(t).sqrt();
    let b = s.sigma(t);
    z0.zip_with(noise, |x, n| a * x + b * n)
}

/// Ancestral update from index `t` to `t - 1`. Fresh noise is added only for
/// `t > 1`; the step out of index 1 returns the mean.
pub fn ddpm_step(
    z: &LatentGrid,
    eps_hat: &LatentGrid,
    t: usize,
    s: &NoiseSchedule,
    rng: &mut NoiseRng,
) -> Result<LatentGrid> {
    if t == 0 {
        return Err(Error::param("t", "ddpm_step needs t >= 1"));
    }
    s.check(t)?;
    let coef = s.beta(t) / s.sigma(t);
    let inv_sqrt_alpha = 1.0 / s.alpha(t).sqrt();
    let mut mean = z.zip_with(eps_hat, |x, e| (x - coef * e) * inv_sqrt_alpha)?;
    if t > 1 {
        let std = s.beta(t).sqrt();
        for v in mean.data_mut() {
            *v += std * rng.standard_normal();
        }
    }
    Ok(mean)
}

/// Deterministic update from `t` to `t_prev`; `None` is the clean limit
/// (`alpha_bar = 1`), which returns the x0 estimate itself.
pub fn ddim_step(
    z: &LatentGrid,
    eps_hat: &LatentGrid,
    t: usize,
    t_prev: Option<usize>,
    s: &NoiseSchedule,
) -> Result<LatentGrid> {
    s.check(t)?;
    if let Some(tp) = t_prev {
        if tp >= t {
            return Err(Error::param("t_prev", format!("must be < t ({tp} >= {t})")));
        }
    }
    let sqrt_ab = s.alpha_bar(t).sqrt();
    let sigma = s.sigma(t);
    let (next_sqrt_ab, next_sigma) = match t_prev {
        Some(tp) => (s.alpha_bar(tp).sqrt(), s.sigma(tp)),
        None => (1.0, 0.0),
    };
    z.zip_with(eps_hat, |x, e| {
        let x0 = (x - sigma * e) / sqrt_ab;
        next_sqrt_ab * x0 + next_sigma * e
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    #[default]
    Ddpm,
    Ddim,
}

impl std::str::FromStr for SamplerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "ddpm" => Ok(SamplerKind::Ddpm),
            "ddim" => Ok(SamplerKind::Ddim),
            other => Err(format!("unknown sampler `{other}` (expected ddpm or ddim)")),
        }
    }
}

/// Every index from `t_start` down to 1; each DDPM step moves one index.
pub fn ddpm_steps(t_start: usize) -> Vec<usize> {
    (1..=t_start).rev().collect()
}

/// `n` evenly spaced indices from `t_start` down; the last DDIM update goes to
/// the clean limit.
pub fn ddim_steps(t_start: usize, n: usize) -> Vec<usize> {
    let mut steps: Vec<usize> = (0..n).map(|i| ((n - i) * t_start) / n.max(1)).collect();
    steps.dedup();
    steps
}

pub fn default_steps(kind: SamplerKind, t_start: usize, ddim_steps_count: usize) -> Vec<usize> {
    match kind {
        SamplerKind::Ddpm => ddpm_steps(t_start),
        SamplerKind::Ddim => ddim_steps(t_start, ddim_steps_count),
    }
}

pub fn validate_steps(kind: SamplerKind, steps: &[usize], s: &NoiseSchedule) -> Result<()> {
    if steps.is_empty() {
        return Err(Error::validation("steps", "must contain at least one timestep"));
    }
    for (i, &t) in steps.iter().enumerate() {
        if t >= s.len() {
            return Err(Error::validation(
                format!("steps[{i}]"),
                format!("timestep {t} outside [0, {})", s.len()),
            ));
        }
    }
    if let Some(i) = steps.windows(2).position(|w| w[1] >= w[0]) {
        return Err(Error::validation(
            format!("steps[{}]", i + 1),
            "timesteps must be strictly decreasing",
        ));
    }
    if kind == SamplerKind::Ddpm {
        if let Some(i) = steps.windows(2).position(|w| w[1] + 1 != w[0]) {
            return Err(Error::validation(
                format!("steps[{}]", i + 1),
                "ddpm steps must be consecutive",
            ));
        }
        if let Some(i) = steps.iter().position(|&t| t == 0) {
            return Err(Error::validation(format!("steps[{i}]"), "ddpm steps must be >= 1"));
        }
    }
    Ok(())
}

/// Runs the reverse process from `init` over `steps`, scoring every step with
/// the guided scorer. `on_step` sees the latent after each update.
pub fn sample_traced(
    scorer: &mut GuidedScorer<'_>,
    s: &NoiseSchedule,
    init: &LatentGrid,
    steps: &[usize],
    kind: SamplerKind,
    rng: &mut NoiseRng,
    mut on_step: impl FnMut(usize, &LatentGrid),
) -> Result<LatentGrid> {
    validate_steps(kind, steps, s)?;
    let mut z = init.clone();
    for (i, &t) in steps.iter().enumerate() {
        let eps = scorer.guided_eps(&z, t)?;
        z = match kind {
            SamplerKind::Ddpm => ddpm_step(&z, &eps, t, s, rng)?,
            SamplerKind::Ddim => ddim_step(&z, &eps, t, steps.get(i + 1).copied(), s)?,
        };
        on_step(t, &z);
    }
    Ok(z)
}

pub fn sample(
    scorer: &mut GuidedScorer<'_>,
    s: &NoiseSchedule,
    init: &LatentGrid,
    steps: &[usize],
    kind: SamplerKind,
    rng: &mut NoiseRng,
) -> Result<LatentGrid> {
    sample_traced(scorer, s, init, steps, kind, rng, |_, _| {})
}
