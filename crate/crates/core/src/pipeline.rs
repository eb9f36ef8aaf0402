//! Split-and-merge portrait flow.
//!
//! 1. Identity stage: the reference is noised to two depths and denoised
//!    with the identity model, giving a reference-like image (shallow start)
//!    and a source-like image (deep start).
//! 2. Controls: light map from the reference-like image, HF-map from the
//!    source-like image.
//! 3. Shading stage: sample from pure noise with a denoiser conditioned on
//!    both controls.
//! 4. Paste the stylized face back onto the reference through a feathered
//!    mask, then harmonize with a partial noise/denoise pass.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffusion::{
    decode, default_steps, encode, forward_diffuse, sample, Condition, Denoiser, LatentGrid, NoiseRng,
    NoiseSchedule, SamplerKind,
};
use crate::error::{Error, Result};
use crate::freq::{extract_controls, gaussian_blur, high_band, low_band, ControlSet, FilterParams};
use crate::guidance::{GuidanceConfig, GuidedScorer};
use crate::image::{ImageGrid, Mask};
use crate::metrics::{cosine_similarity, toy_embed};

/// RNG stream ids; each stage draws from its own stream of the run seed.
const STREAM_IDENTITY: u64 = 1;
const STREAM_SHADING: u64 = 2;
const STREAM_HARMONIZE: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerOptions {
    pub kind: SamplerKind,
    /// Step count for DDIM; DDPM always visits every index.
    pub ddim_steps: usize,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Ddpm,
            ddim_steps: 50,
        }
    }
}

impl SamplerOptions {
    pub fn steps_from(&self, t_start: usize) -> Vec<usize> {
        default_steps(self.kind, t_start, self.ddim_steps)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Start index of the reference-like image (399 = timestep 400 of 1000).
    pub t_ref_like: usize,
    /// Start index of the source-like image (699 = timestep 700 of 1000).
    pub t_src_like: usize,
    pub filter: FilterParams,
    pub feather_px: f64,
    pub t_harmonize: usize,
    pub guidance: GuidanceConfig,
    pub sampler: SamplerOptions,
    pub seed: u64,
    /// Identity condition of the identity and shading models.
    pub identity_condition: Option<String>,
    pub harmonize_condition: Option<String>,
    pub lambda_light: f64,
    pub lambda_hf: f64,
    pub pull: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            t_ref_like: 399,
            t_src_like: 699,
            filter: FilterParams::default(),
            feather_px: 6.0,
            t_harmonize: 249,
            guidance: GuidanceConfig::default(),
            sampler: SamplerOptions::default(),
            seed: 0,
            identity_condition: None,
            harmonize_condition: None,
            lambda_light: 1.0,
            lambda_hf: 1.0,
            pull: 1.0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self, s: &NoiseSchedule) -> Result<()> {
        if self.t_ref_like >= self.t_src_like {
            return Err(Error::validation("t_ref_like", "must be < t_src_like"));
        }
        if self.t_src_like >= s.len() {
            return Err(Error::validation("t_src_like", format!("must be < {}", s.len())));
        }
        if self.t_harmonize == 0 || self.t_harmonize >= s.len() {
            return Err(Error::validation("t_harmonize", format!("must be in (0, {})", s.len())));
        }
        if !(self.feather_px >= 0.0 && self.feather_px.is_finite()) {
            return Err(Error::validation("feather_px", "must be >= 0"));
        }
        for (name, v) in [("lambda_light", self.lambda_light), ("lambda_hf", self.lambda_hf)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(name, "must be in [0, 1]"));
            }
        }
        if !(self.pull.is_finite() && self.pull >= 0.0) {
            return Err(Error::validation("pull", "must be finite and >= 0"));
        }
        if self.sampler.kind == SamplerKind::Ddim && self.sampler.ddim_steps == 0 {
            return Err(Error::validation("ddim_steps", "must be >= 1"));
        }
        self.filter
            .validate()
            .map_err(|e| Error::validation("filter", e.to_string()))?;
        self.guidance.validate()
    }

    fn identity_cond(&self) -> Condition {
        self.identity_condition
            .as_ref()
            .map_or(Condition::Unconditional, |c| Condition::Concept(c.clone()))
    }

    fn harmonize_cond(&self) -> Condition {
        self.harmonize_condition
            .as_ref()
            .map_or(Condition::Unconditional, |c| Condition::Concept(c.clone()))
    }
}

/// Noise `img` to `t`, denoise back to the clean end and decode. `t = 0`
/// is the zero-strength limit and returns `img` untouched.
#[allow(clippy::too_many_arguments)]
pub fn img2img(
    img: &ImageGrid,
    d: &dyn Denoiser,
    g: &GuidanceConfig,
    cond: Condition,
    s: &NoiseSchedule,
    t: usize,
    sampler: &SamplerOptions,
    rng: &mut NoiseRng,
) -> Result<ImageGrid> {
    s.check(t)?;
    if t == 0 {
        return Ok(img.clone());
    }
    let z0 = encode(img);
    let noise = rng.normal_like(&z0);
    let zt = forward_diffuse(&z0, t, &noise, s)?;
    let mut scorer = GuidedScorer::new(d, s, g.clone(), cond)?;
    let z = sample(&mut scorer, s, &zt, &sampler.steps_from(t), sampler.kind, rng)?;
    Ok(decode(&z).clamped())
}

/// Returns `(ref_like, src_like)`.
pub fn identity_stage(
    ref_img: &ImageGrid,
    d: &dyn Denoiser,
    cfg: &PipelineConfig,
    s: &NoiseSchedule,
    rng: &mut NoiseRng,
) -> Result<(ImageGrid, ImageGrid)> {
    let cond = cfg.identity_cond();
    let ref_like = img2img(ref_img, d, &cfg.guidance, cond.clone(), s, cfg.t_ref_like, &cfg.sampler, rng)?;
    let src_like = img2img(ref_img, d, &cfg.guidance, cond, s, cfg.t_src_like, &cfg.sampler, rng)?;
    Ok((ref_like, src_like))
}

/// Stand-in for a control-conditioned network. For `Condition::Control` it
/// corrects the inner noise prediction so that the implied clean image has
/// the control's low band (light map) and high band (HF-map); every other
/// condition passes through to the inner denoiser.
pub struct ToyConditionedDenoiser<'a> {
    pub inner: &'a dyn Denoiser,
    pub inner_condition: Condition,
    pub schedule: &'a NoiseSchedule,
    pub filter: FilterParams,
    pub lambda_light: f64,
    pub lambda_hf: f64,
    /// Gain on both corrections; 1 replaces the band outright.
    pub pull: f64,
}

impl ToyConditionedDenoiser<'_> {
    fn control_eps(&self, z: &LatentGrid, t: usize, cs: &ControlSet) -> Result<LatentGrid> {
        let (h, w, c) = z.shape();
        if cs.light_map.shape() != (h, w, c) || cs.hf_map.shape() != (h, w, c) {
            return Err(Error::dims(format!(
                "controls {:?}/{:?} vs latent {:?}",
                cs.light_map.shape(),
                cs.hf_map.shape(),
                z.shape()
            )));
        }
        let eps = self.inner.predict(z, t, &self.inner_condition)?;
        if (self.lambda_light == 0.0 && self.lambda_hf == 0.0) || self.pull == 0.0 {
            return Ok(eps);
        }
        let s = self.schedule;
        let sqrt_ab = s.alpha_bar(t).sqrt();
        let sigma = s.sigma(t);
        let x0 = z.zip_with(&eps, |zv, e| (zv - sigma * e) / sqrt_ab)?;
        let x0_img = decode(&x0);

        // Residuals are in latent units: a pixel difference of d is 2d.
        let mut residual = vec![0.0; z.len()];
        if self.lambda_light > 0.0 {
            let low = low_band(&x0_img, &self.filter)?;
            for ((r, a), b) in residual.iter_mut().zip(low.data()).zip(cs.light_map.data()) {
                *r += self.lambda_light * 2.0 * (a - b);
            }
        }
        if self.lambda_hf > 0.0 {
            let high = high_band(&x0_img, self.filter.sigma_high)?;
            let offset = self.filter.hf_offset;
            for ((r, a), b) in residual.iter_mut().zip(high.data()).zip(cs.hf_map.data()) {
                *r += self.lambda_hf * 2.0 * (a - (b - offset));
            }
        }
        // Shifting x0 by -residual shifts eps by +sqrt(ab)/sigma * residual.
        let gain = self.pull * sqrt_ab / sigma;
        let data = eps.data().iter().zip(&residual).map(|(e, r)| e + gain * r).collect();
        z.like(data)
    }
}

impl Denoiser for ToyConditionedDenoiser<'_> {
    fn predict(&self, z: &LatentGrid, t: usize, cond: &Condition) -> Result<LatentGrid> {
        match cond {
            Condition::Control(cs) => self.control_eps(z, t, cs),
            other => self.inner.predict(z, t, other),
        }
    }
}

/// Samples from pure noise under the control condition.
pub fn shading_stage(
    controls: &ControlSet,
    d: &ToyConditionedDenoiser<'_>,
    g: &GuidanceConfig,
    s: &NoiseSchedule,
    sampler: &SamplerOptions,
    rng: &mut NoiseRng,
) -> Result<ImageGrid> {
    let (h, w, c) = controls.light_map.shape();
    if controls.hf_map.shape() != (h, w, c) {
        return Err(Error::dims("light map and HF-map differ in shape"));
    }
    let init = rng.normal_like(&LatentGrid::zeros(h, w, c));
    let cond = Condition::Control(Arc::new(controls.clone()));
    let mut scorer = GuidedScorer::new(d, s, g.clone(), cond)?;
    let z = sample(&mut scorer, s, &init, &sampler.steps_from(s.len() - 1), sampler.kind, rng)?;
    Ok(decode(&z).clamped())
}

/// Feathered mask: blur with `sigma = feather_px / 3`, so the transition
/// spans `feather_px` pixels either side of a hard edge.
pub fn feather_mask(face_mask: &Mask, feather_px: f64) -> Result<Mask> {
    let blurred = gaussian_blur(&face_mask.to_image(), feather_px / 3.0)?;
    // Kernel sums are 1 only up to rounding; snap so flat regions stay exact.
    let data = blurred
        .data()
        .iter()
        .map(|&v| {
            let v = v.clamp(0.0, 1.0);
            if v < 1e-9 {
                0.0
            } else if v > 1.0 - 1e-9 {
                1.0
            } else {
                v
            }
        })
        .collect();
    Mask::new(face_mask.height(), face_mask.width(), data)
}

/// `m * stylized + (1 - m) * reference` with the feathered mask `m`.
pub fn paste_back(stylized: &ImageGrid, reference: &ImageGrid, face_mask: &Mask, feather_px: f64) -> Result<ImageGrid> {
    if !stylized.same_shape(reference) {
        return Err(Error::dims(format!(
            "stylized {:?} vs reference {:?}",
            stylized.shape(),
            reference.shape()
        )));
    }
    if !face_mask.matches(reference.height(), reference.width()) {
        return Err(Error::dims(format!(
            "mask {}x{} vs image {}x{}",
            face_mask.height(),
            face_mask.width(),
            reference.height(),
            reference.width()
        )));
    }
    let m = feather_mask(face_mask, feather_px)?;
    let c = reference.channels();
    let data = stylized
        .data()
        .iter()
        .zip(reference.data())
        .enumerate()
        .map(|(i, (&s, &r))| {
            let w = m.data()[i / c];
            w * s + (1.0 - w) * r
        })
        .collect();
    ImageGrid::new(reference.height(), reference.width(), c, data)
}

/// Partial noise/denoise pass of strength `t_h / T` over the composite.
#[allow(clippy::too_many_arguments)]
pub fn harmonize(
    composite: &ImageGrid,
    d: &dyn Denoiser,
    g: &GuidanceConfig,
    cond: Condition,
    s: &NoiseSchedule,
    t_h: usize,
    sampler: &SamplerOptions,
    rng: &mut NoiseRng,
) -> Result<ImageGrid> {
    img2img(composite, d, g, cond, s, t_h, sampler, rng)
}

/// The denoisers used by each stage.
#[derive(Clone, Copy)]
pub struct ModelSet<'a> {
    pub identity: &'a dyn Denoiser,
    /// Inner model wrapped by the control-conditioned shading denoiser.
    pub shading: &'a dyn Denoiser,
    pub harmonizer: &'a dyn Denoiser,
}

impl<'a> ModelSet<'a> {
    pub fn single(d: &'a dyn Denoiser) -> Self {
        Self {
            identity: d,
            shading: d,
            harmonizer: d,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutputs {
    pub ref_like: ImageGrid,
    pub src_like: ImageGrid,
    pub controls: ControlSet,
    pub stylized: ImageGrid,
    pub composite: ImageGrid,
    pub final_image: ImageGrid,
    /// Toy identity similarity of the final image to the source portrait
    /// over the face mask, when a source was given.
    pub id_similarity: Option<f64>,
}

impl PipelineOutputs {
    /// Run-directory file names paired with the images they hold; the
    /// HF-map is clamped at write time.
    pub fn named_images(&self) -> [(&'static str, &ImageGrid); 7] {
        [
            ("00_ref_like.png", &self.ref_like),
            ("01_src_like.png", &self.src_like),
            ("02_light.png", &self.controls.light_map),
            ("03_hf.png", &self.controls.hf_map),
            ("04_stylized.png", &self.stylized),
            ("05_composite.png", &self.composite),
            ("06_final.png", &self.final_image),
        ]
    }
}

pub const STAGE_VALIDATE: &str = "validate";
pub const STAGE_IDENTITY: &str = "identity";
pub const STAGE_CONTROLS: &str = "controls";
pub const STAGE_SHADING: &str = "shading";
pub const STAGE_PASTE: &str = "paste_back";
pub const STAGE_HARMONIZE: &str = "harmonize";

fn at<T>(stage: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage,
        source: Box::new(e),
    })
}

pub const STAGE_METRICS: &str = "metrics";

pub fn run_pipeline(
    source: Option<&ImageGrid>,
    reference: &ImageGrid,
    face_mask: &Mask,
    cfg: &PipelineConfig,
    models: ModelSet<'_>,
    s: &NoiseSchedule,
) -> Result<PipelineOutputs> {
    at(STAGE_VALIDATE, cfg.validate(s))?;
    if !face_mask.matches(reference.height(), reference.width()) {
        return at(
            STAGE_VALIDATE,
            Err(Error::dims("face mask does not match the reference image")),
        );
    }
    if let Some(src) = source {
        if !src.same_shape(reference) {
            return at(
                STAGE_VALIDATE,
                Err(Error::dims(format!("source {:?} vs reference {:?}", src.shape(), reference.shape()))),
            );
        }
    }
    let root = NoiseRng::new(cfg.seed);

    let mut rng = root.clone().with_stream(STREAM_IDENTITY);
    let (ref_like, src_like) = at(STAGE_IDENTITY, identity_stage(reference, models.identity, cfg, s, &mut rng))?;

    let controls = at(STAGE_CONTROLS, extract_controls(&ref_like, &src_like, &cfg.filter))?;

    let toy = ToyConditionedDenoiser {
        inner: models.shading,
        inner_condition: cfg.identity_cond(),
        schedule: s,
        filter: cfg.filter,
        lambda_light: cfg.lambda_light,
        lambda_hf: cfg.lambda_hf,
        pull: cfg.pull,
    };
    let mut rng = root.clone().with_stream(STREAM_SHADING);
    let stylized = at(
        STAGE_SHADING,
        shading_stage(&controls, &toy, &cfg.guidance, s, &cfg.sampler, &mut rng),
    )?;

    let composite = at(STAGE_PASTE, paste_back(&stylized, reference, face_mask, cfg.feather_px))?;

    let mut rng = root.with_stream(STREAM_HARMONIZE);
    let final_image = at(
        STAGE_HARMONIZE,
        harmonize(
            &composite,
            models.harmonizer,
            &cfg.guidance,
            cfg.harmonize_cond(),
            s,
            cfg.t_harmonize,
            &cfg.sampler,
            &mut rng,
        ),
    )?;

    let id_similarity = match source {
        Some(src) => Some(at(
            STAGE_METRICS,
            toy_embed(src, face_mask).and_then(|a| cosine_similarity(&a, &toy_embed(&final_image, face_mask)?)),
        )?),
        None => None,
    };

    Ok(PipelineOutputs {
        ref_like,
        src_like,
        controls,
        stylized,
        composite,
        final_image,
        id_similarity,
    })
}
