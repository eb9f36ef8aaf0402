use std::path::PathBuf;

use portrait_core::diffusion::{
    decode, default_steps, sample_traced, validate_steps, Condition, LatentGrid, NoiseRng, NoiseSchedule,
    SamplerKind,
};
use portrait_core::guidance::{Decay, GuidanceConfig, GuidedScorer};
use portrait_core::oracle::GmmScoreModel;
use serde::Serialize;

use crate::config::canonical;
use crate::error::CliError;
use crate::util::{create_dir, require_path, sha256_f64, write_file, write_image};
use crate::{command_config, guidance_keys};

command_config! {
    /// Settings of `sample`.
    SampleConfig / SampleArgs {
        /// Mixture oracle model (JSON).
        model_path: PathBuf => PathBuf = PathBuf::new(),
        /// Condition id; unset samples the unconditional marginal.
        condition: Option<String> => String = None,
        /// Classifier-free guidance weight.
        w_cfg: f64 => f64 = GuidanceConfig::default().w_cfg,
        /// Concept guidance weight.
        w_concept: f64 => f64 = GuidanceConfig::default().w_concept,
        /// Concept id S; the concept term needs both S and S-bar.
        concept_s: Option<String> => String = None,
        /// Negative concept id S-bar.
        concept_sbar: Option<String> => String = None,
        /// Mask image limiting the concept term (height x width of the latent).
        mask_path: Option<PathBuf> => PathBuf = None,
        /// Momentum coefficient of the concept term.
        momentum_beta: f64 => f64 = GuidanceConfig::default().momentum_beta,
        /// Momentum decay: none, linear or alpha_bar.
        decay: Decay => Decay = GuidanceConfig::default().decay,
        /// Add the raw concept score inside the mask instead of its offset from the unconditional score.
        literal_eq4: bool => bool = GuidanceConfig::default().literal_eq4,
        /// Sampler: ddpm or ddim.
        sampler: SamplerKind => SamplerKind = SamplerKind::Ddpm,
        /// First timestep index (0-based); ignored when `steps` is given.
        t_start: usize => usize = 999,
        /// DDIM step count; DDPM always visits every index below t_start.
        num_steps: usize => usize = 50,
        /// Explicit decreasing timestep list, e.g. 999,500,100.
        #[arg(value_delimiter = ',')]
        steps: Option<Vec<usize>> => Vec<usize> = None,
        /// Number of independent samples.
        num_samples: usize => usize = 1,
        /// Latent height; with width set, samples are also written as PNG.
        height: Option<usize> => usize = None,
        /// Latent width.
        width: Option<usize> => usize = None,
        /// Latent channels.
        channels: usize => usize = 1,
        /// Seed; sample i uses stream i of this seed.
        seed: u64 => u64 = 0,
        /// Output directory.
        out_dir: PathBuf => PathBuf = PathBuf::from("sample"),
    }
}

#[derive(Debug, Serialize)]
struct StepSummary {
    t: usize,
    mean: f64,
    rms: f64,
}

#[derive(Debug, Serialize)]
struct Trajectory {
    index: usize,
    steps: Vec<StepSummary>,
}

#[derive(Debug, Serialize)]
struct SamplesFile<'a> {
    seed: u64,
    shape: [usize; 3],
    steps: &'a [usize],
    sha256: String,
    samples: Vec<Vec<f64>>,
}

impl SampleConfig {
    fn shape(&self, dims: usize) -> Result<(usize, usize, usize), CliError> {
        let c = self.channels;
        if c == 0 {
            return Err(CliError::validation("channels", "must be >= 1"));
        }
        let (h, w) = match (self.height, self.width) {
            (Some(h), Some(w)) => (h, w),
            (Some(h), None) => (h, dims / (h * c).max(1)),
            (None, Some(w)) => (dims / (w * c).max(1), w),
            (None, None) => (1, dims / c),
        };
        if h * w * c != dims {
            return Err(CliError::validation(
                "height",
                format!("{h}x{w}x{c} latent does not match model dims {dims}"),
            ));
        }
        Ok((h, w, c))
    }

    fn steps(&self, s: &NoiseSchedule) -> Result<Vec<usize>, CliError> {
        let steps = match &self.steps {
            Some(list) => list.clone(),
            None => {
                s.check(self.t_start)?;
                if self.sampler == SamplerKind::Ddim && self.num_steps == 0 {
                    return Err(CliError::validation("num_steps", "must be >= 1"));
                }
                default_steps(self.sampler, self.t_start, self.num_steps)
            }
        };
        validate_steps(self.sampler, &steps, s)?;
        Ok(steps)
    }
}

pub fn run(cfg: &SampleConfig) -> Result<(), CliError> {
    require_path("model_path", &cfg.model_path)?;
    if cfg.num_samples == 0 {
        return Err(CliError::validation("num_samples", "must be >= 1"));
    }
    let s = NoiseSchedule::default();
    let steps = cfg.steps(&s)?;
    let guidance = guidance_keys!(cfg).build()?;
    let model = GmmScoreModel::load(&cfg.model_path)?;
    let (h, w, c) = cfg.shape(model.dims())?;
    if let Some(m) = &guidance.mask {
        if !m.matches(h, w) {
            return Err(CliError::validation("mask_path", format!("mask must be {h}x{w}")));
        }
    }
    let cond = cfg.condition.clone().map_or(Condition::Unconditional, Condition::Concept);
    let d = model.as_denoiser(&s);

    let mut samples = Vec::with_capacity(cfg.num_samples);
    let mut trajectories = Vec::with_capacity(cfg.num_samples);
    for index in 0..cfg.num_samples {
        let mut rng = NoiseRng::new(cfg.seed).with_stream(index as u64);
        let init = rng.normal_like(&LatentGrid::zeros(h, w, c));
        let mut scorer = GuidedScorer::new(&d, &s, guidance.clone(), cond.clone())?;
        let mut trace = Vec::with_capacity(steps.len());
        let z = sample_traced(&mut scorer, &s, &init, &steps, cfg.sampler, &mut rng, |t, z| {
            let n = z.len() as f64;
            trace.push(StepSummary {
                t,
                mean: z.data().iter().sum::<f64>() / n,
                rms: (z.data().iter().map(|v| v * v).sum::<f64>() / n).sqrt(),
            });
        })?;
        trajectories.push(Trajectory { index, steps: trace });
        samples.push(z);
    }

    create_dir(&cfg.out_dir)?;
    write_file(&cfg.out_dir.join("config.json"), canonical(cfg).as_bytes())?;
    let flat: Vec<f64> = samples.iter().flat_map(|z| z.data().iter().copied()).collect();
    let hash = sha256_f64(&flat);
    let file = SamplesFile {
        seed: cfg.seed,
        shape: [h, w, c],
        steps: &steps,
        sha256: hash.clone(),
        samples: samples.iter().map(|z| z.data().to_vec()).collect(),
    };
    write_file(&cfg.out_dir.join("samples.json"), canonical(&file).as_bytes())?;
    write_file(&cfg.out_dir.join("trajectory.json"), canonical(&trajectories).as_bytes())?;
    if cfg.height.is_some() && cfg.width.is_some() && (c == 1 || c == 3) {
        for (i, z) in samples.iter().enumerate() {
            write_image(&decode(z), &cfg.out_dir.join(format!("sample_{i:03}.png")))?;
        }
    }
    println!("samples {} sha256 {hash}", samples.len());
    Ok(())
}
