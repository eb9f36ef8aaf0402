use std::path::PathBuf;

use portrait_core::diffusion::{Condition, NoiseRng, NoiseSchedule, SamplerKind};
use portrait_core::guidance::{Decay, GuidanceConfig};
use portrait_core::image::load_image;
use portrait_core::oracle::GmmScoreModel;
use portrait_core::pipeline::{harmonize, PipelineConfig, SamplerOptions};

use crate::error::CliError;
use crate::util::{require_path, write_image};
use crate::{command_config, guidance_keys};

command_config! {
    /// Settings of `harmonize`.
    HarmonizeConfig / HarmonizeArgs {
        /// Image to harmonize, usually a pasted-back composite.
        input: PathBuf => PathBuf = PathBuf::new(),
        /// Harmonization model (mixture oracle JSON).
        model_path: PathBuf => PathBuf = PathBuf::new(),
        /// Condition id of the model; unset is unconditional.
        condition: Option<String> => String = None,
        /// Start index of the noise/denoise pass; strength is t_harmonize / 1000.
        t_harmonize: usize => usize = PipelineConfig::default().t_harmonize,
        /// Classifier-free guidance weight.
        w_cfg: f64 => f64 = GuidanceConfig::default().w_cfg,
        /// Concept guidance weight.
        w_concept: f64 => f64 = GuidanceConfig::default().w_concept,
        /// Concept id S.
        concept_s: Option<String> => String = None,
        /// Negative concept id S-bar.
        concept_sbar: Option<String> => String = None,
        /// Mask image limiting the concept term.
        mask_path: Option<PathBuf> => PathBuf = None,
        /// Momentum coefficient of the concept term.
        momentum_beta: f64 => f64 = GuidanceConfig::default().momentum_beta,
        /// Momentum decay: none, linear or alpha_bar.
        decay: Decay => Decay = GuidanceConfig::default().decay,
        /// Add the raw concept score inside the mask.
        literal_eq4: bool => bool = GuidanceConfig::default().literal_eq4,
        /// Sampler: ddpm or ddim.
        sampler: SamplerKind => SamplerKind = SamplerOptions::default().kind,
        /// DDIM step count.
        ddim_steps: usize => usize = SamplerOptions::default().ddim_steps,
        /// Seed of the forward noise and the sampler.
        seed: u64 => u64 = 0,
        /// Output image.
        output: PathBuf => PathBuf = PathBuf::from("harmonized.png"),
    }
}

pub fn run(cfg: &HarmonizeConfig) -> Result<(), CliError> {
    require_path("input", &cfg.input)?;
    require_path("model_path", &cfg.model_path)?;
    let s = NoiseSchedule::default();
    if cfg.t_harmonize == 0 || cfg.t_harmonize >= s.len() {
        return Err(CliError::validation("t_harmonize", format!("must be in (0, {})", s.len())));
    }
    if cfg.sampler == SamplerKind::Ddim && cfg.ddim_steps == 0 {
        return Err(CliError::validation("ddim_steps", "must be >= 1"));
    }
    let guidance = guidance_keys!(cfg).build()?;
    let model = GmmScoreModel::load(&cfg.model_path)?;
    let img = load_image(&cfg.input)?;
    let cond = cfg.condition.clone().map_or(Condition::Unconditional, Condition::Concept);
    let sampler = SamplerOptions {
        kind: cfg.sampler,
        ddim_steps: cfg.ddim_steps,
    };
    let mut rng = NoiseRng::new(cfg.seed);
    let out = harmonize(&img, &model.as_denoiser(&s), &guidance, cond, &s, cfg.t_harmonize, &sampler, &mut rng)?;
    if let Some(dir) = cfg.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        crate::util::create_dir(dir)?;
    }
    let hash = write_image(&out, &cfg.output)?;
    println!("{} {hash}", cfg.output.display());
    Ok(())
}
