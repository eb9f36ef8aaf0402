use std::path::PathBuf;

use portrait_core::freq::{extract_controls, FilterParams};
use portrait_core::image::load_image;

use crate::command_config;
use crate::config::canonical;
use crate::error::CliError;
use crate::util::{create_dir, require_path, write_file, write_image};

command_config! {
    /// Settings of `extract-maps`; `params.json` in the output directory is
    /// this struct and reloads with `--config`.
    ExtractMapsConfig / ExtractMapsArgs {
        /// Reference-like image; its light map is extracted.
        ref_like: PathBuf => PathBuf = PathBuf::new(),
        /// Source-like image; its HF-map is extracted.
        src_like: PathBuf => PathBuf = PathBuf::new(),
        /// Output directory for light.png, hf.png and params.json.
        out_dir: PathBuf => PathBuf = PathBuf::from("maps"),
        /// Low-pass blur sigma of the light map, in pixels.
        sigma_low: f64 => f64 = FilterParams::default().sigma_low,
        /// Pixel-sampling stride of the light map.
        sample_stride: usize => usize = FilterParams::default().sample_stride,
        /// Blur sigma whose residual forms the HF-map.
        sigma_high: f64 => f64 = FilterParams::default().sigma_high,
        /// Offset added to the HF residual before it is written.
        hf_offset: f64 => f64 = FilterParams::default().hf_offset,
        /// Recorded in params.json; extraction itself draws no randomness.
        seed: u64 => u64 = 0,
    }
}

impl ExtractMapsConfig {
    pub fn filter(&self) -> FilterParams {
        FilterParams {
            sigma_low: self.sigma_low,
            sample_stride: self.sample_stride,
            sigma_high: self.sigma_high,
            hf_offset: self.hf_offset,
        }
    }
}

pub fn run(cfg: &ExtractMapsConfig) -> Result<(), CliError> {
    require_path("ref_like", &cfg.ref_like)?;
    require_path("src_like", &cfg.src_like)?;
    let filter = cfg.filter();
    filter.validate()?;
    let ref_like = load_image(&cfg.ref_like)?;
    let src_like = load_image(&cfg.src_like)?;
    let controls = extract_controls(&ref_like, &src_like, &filter)?;

    create_dir(&cfg.out_dir)?;
    let light = write_image(&controls.light_map, &cfg.out_dir.join("light.png"))?;
    let hf = write_image(&controls.hf_map, &cfg.out_dir.join("hf.png"))?;
    write_file(&cfg.out_dir.join("params.json"), canonical(cfg).as_bytes())?;
    println!("light.png {light}");
    println!("hf.png {hf}");
    Ok(())
}
