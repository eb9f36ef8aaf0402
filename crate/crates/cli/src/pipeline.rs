use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use portrait_core::diffusion::{NoiseSchedule, SamplerKind};
use portrait_core::freq::FilterParams;
use portrait_core::guidance::{Decay, GuidanceConfig};
use portrait_core::image::{load_image, load_mask};
use portrait_core::oracle::GmmScoreModel;
use portrait_core::pipeline::{run_pipeline, ModelSet, PipelineConfig, SamplerOptions};
use portrait_core::Error as CoreError;
use serde::Serialize;

use crate::config::canonical;
use crate::error::CliError;
use crate::util::{create_dir, file_sha256, require_path, write_file, write_image};
use crate::{command_config, guidance_keys};

command_config! {
    /// Settings of `pipeline`; written back into `run.json`.
    PipelineRunConfig / PipelineArgs {
        /// Reference portrait (supplies pose, hair and background).
        reference: PathBuf => PathBuf = PathBuf::new(),
        /// Source portrait; when set, run.json records its identity similarity to the final image.
        source: Option<PathBuf> => PathBuf = None,
        /// Face mask (PGM or PNG) of the reference.
        face_mask_path: PathBuf => PathBuf = PathBuf::new(),
        /// Identity model (mixture oracle JSON).
        model_path: PathBuf => PathBuf = PathBuf::new(),
        /// Inner model of the shading stage; defaults to model_path.
        shading_model_path: Option<PathBuf> => PathBuf = None,
        /// Harmonization model; defaults to model_path.
        harmonizer_model_path: Option<PathBuf> => PathBuf = None,
        /// Run directory.
        out_dir: PathBuf => PathBuf = PathBuf::from("run"),
        /// Start index of the reference-like image (399 is timestep 400).
        t_ref_like: usize => usize = PipelineConfig::default().t_ref_like,
        /// Start index of the source-like image (699 is timestep 700).
        t_src_like: usize => usize = PipelineConfig::default().t_src_like,
        /// Low-pass blur sigma of the light map.
        sigma_low: f64 => f64 = FilterParams::default().sigma_low,
        /// Pixel-sampling stride of the light map.
        sample_stride: usize => usize = FilterParams::default().sample_stride,
        /// Blur sigma whose residual forms the HF-map.
        sigma_high: f64 => f64 = FilterParams::default().sigma_high,
        /// Offset added to the HF residual.
        hf_offset: f64 => f64 = FilterParams::default().hf_offset,
        /// Feather width of the paste-back mask, in pixels.
        feather_px: f64 => f64 = PipelineConfig::default().feather_px,
        /// Start index of the harmonization pass.
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
        /// DDIM step count per stage.
        ddim_steps: usize => usize = SamplerOptions::default().ddim_steps,
        /// Identity condition of the identity and shading models.
        identity_condition: Option<String> => String = None,
        /// Condition of the harmonization model.
        harmonize_condition: Option<String> => String = None,
        /// Light-map gate of the shading denoiser, in [0, 1].
        lambda_light: f64 => f64 = PipelineConfig::default().lambda_light,
        /// HF-map gate of the shading denoiser, in [0, 1].
        lambda_hf: f64 => f64 = PipelineConfig::default().lambda_hf,
        /// Strength of the control pull.
        pull: f64 => f64 = PipelineConfig::default().pull,
        /// Run seed; each stage uses its own stream.
        seed: u64 => u64 = 0,
    }
}

/// Files a run may write; all are removed before a run starts.
pub const RUN_FILES: [&str; 8] = [
    "00_ref_like.png",
    "01_src_like.png",
    "02_light.png",
    "03_hf.png",
    "04_stylized.png",
    "05_composite.png",
    "06_final.png",
    "run.json",
];

const STAGE_LOAD: &str = "load";

#[derive(Debug, Serialize)]
struct RunRecord<'a> {
    status: &'static str,
    failed_stage: Option<&'static str>,
    error: Option<String>,
    seed: u64,
    config: &'a PipelineRunConfig,
    models: BTreeMap<String, String>,
    hashes: BTreeMap<&'static str, String>,
    id_similarity: Option<f64>,
}

impl PipelineRunConfig {
    pub fn core(&self, guidance: GuidanceConfig) -> PipelineConfig {
        PipelineConfig {
            t_ref_like: self.t_ref_like,
            t_src_like: self.t_src_like,
            filter: FilterParams {
                sigma_low: self.sigma_low,
                sample_stride: self.sample_stride,
                sigma_high: self.sigma_high,
                hf_offset: self.hf_offset,
            },
            feather_px: self.feather_px,
            t_harmonize: self.t_harmonize,
            guidance,
            sampler: SamplerOptions {
                kind: self.sampler,
                ddim_steps: self.ddim_steps,
            },
            seed: self.seed,
            identity_condition: self.identity_condition.clone(),
            harmonize_condition: self.harmonize_condition.clone(),
            lambda_light: self.lambda_light,
            lambda_hf: self.lambda_hf,
            pull: self.pull,
        }
    }

    fn model_paths(&self) -> [&Path; 3] {
        let m = self.model_path.as_path();
        [
            m,
            self.shading_model_path.as_deref().unwrap_or(m),
            self.harmonizer_model_path.as_deref().unwrap_or(m),
        ]
    }
}

struct Loaded {
    source: Option<portrait_core::image::ImageGrid>,
    reference: portrait_core::image::ImageGrid,
    mask: portrait_core::image::Mask,
    guidance: GuidanceConfig,
    models: [GmmScoreModel; 3],
    hashes: BTreeMap<String, String>,
}

fn load_inputs(cfg: &PipelineRunConfig) -> Result<Loaded, CliError> {
    require_path("reference", &cfg.reference)?;
    require_path("face_mask_path", &cfg.face_mask_path)?;
    require_path("model_path", &cfg.model_path)?;
    let mut hashes = BTreeMap::new();
    let mut load_model = |p: &Path| -> Result<GmmScoreModel, CliError> {
        hashes.insert(p.display().to_string(), file_sha256(p)?);
        Ok(GmmScoreModel::load(p)?)
    };
    let [a, b, c] = cfg.model_paths();
    let models = [load_model(a)?, load_model(b)?, load_model(c)?];
    Ok(Loaded {
        source: cfg.source.as_deref().map(load_image).transpose()?,
        reference: load_image(&cfg.reference)?,
        mask: load_mask(&cfg.face_mask_path)?,
        guidance: guidance_keys!(cfg).build()?,
        models,
        hashes,
    })
}

fn stage_of(e: &CliError) -> &'static str {
    match e {
        CliError::Core(CoreError::Stage { stage, .. }) => stage,
        _ => STAGE_LOAD,
    }
}

/// Runs the pipeline into `out_dir`. `run.json` is written on success and on
/// failure; a failed run names its stage and leaves no images.
pub fn run(cfg: &PipelineRunConfig) -> Result<(), CliError> {
    create_dir(&cfg.out_dir)?;
    for name in RUN_FILES {
        let p = cfg.out_dir.join(name);
        if p.exists() {
            fs::remove_file(&p).map_err(|e| CliError::io(&p, e))?;
        }
    }
    let s = NoiseSchedule::default();
    let mut models = BTreeMap::new();
    let result = load_inputs(cfg).and_then(|inputs| {
        models = inputs.hashes.clone();
        let ds = inputs.models.each_ref().map(|m| m.as_denoiser(&s));
        let set = ModelSet {
            identity: &ds[0],
            shading: &ds[1],
            harmonizer: &ds[2],
        };
        let core = cfg.core(inputs.guidance);
        Ok(run_pipeline(inputs.source.as_ref(), &inputs.reference, &inputs.mask, &core, set, &s)?)
    });

    let mut record = RunRecord {
        status: "ok",
        failed_stage: None,
        error: None,
        seed: cfg.seed,
        config: cfg,
        models,
        hashes: BTreeMap::new(),
        id_similarity: None,
    };
    let outcome = match result {
        Ok(out) => {
            for (name, img) in out.named_images() {
                record.hashes.insert(name, write_image(img, &cfg.out_dir.join(name))?);
            }
            record.id_similarity = out.id_similarity;
            Ok(())
        }
        Err(e) => {
            record.status = "failed";
            record.failed_stage = Some(stage_of(&e));
            record.error = Some(e.to_string());
            Err(e)
        }
    };
    write_file(&cfg.out_dir.join("run.json"), canonical(&record).as_bytes())?;
    if outcome.is_ok() {
        println!("final {}", record.hashes["06_final.png"]);
        if let Some(sim) = record.id_similarity {
            println!("id_similarity {sim}");
        }
    }
    outcome
}
