use std::fs;
use std::path::{Path, PathBuf};

use portrait_core::guidance::{Decay, GuidanceConfig};
use portrait_core::image::{encode_image, load_mask, ImageGrid};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Hash of the little-endian `f64` bytes.
pub fn sha256_f64(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    format!("{:x}", h.finalize())
}

pub fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Encodes by extension, writes, and returns the sha256 of the bytes.
pub fn write_image(img: &ImageGrid, path: &Path) -> Result<String, CliError> {
    let bytes = encode_image(img, path)?;
    write_file(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn file_sha256(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn require_path(field: &str, p: &Path) -> Result<(), CliError> {
    if p.as_os_str().is_empty() {
        return Err(CliError::validation(field, "must be set"));
    }
    Ok(())
}

/// The guidance keys shared by `sample`, `pipeline` and `harmonize`.
pub struct GuidanceKeys<'a> {
    pub w_cfg: f64,
    pub w_concept: f64,
    pub concept_s: &'a Option<String>,
    pub concept_sbar: &'a Option<String>,
    pub mask_path: &'a Option<PathBuf>,
    pub momentum_beta: f64,
    pub decay: Decay,
    pub literal_eq4: bool,
}

impl GuidanceKeys<'_> {
    pub fn build(&self) -> Result<GuidanceConfig, CliError> {
        let mask = self.mask_path.as_deref().map(load_mask).transpose()?;
        let g = GuidanceConfig {
            w_cfg: self.w_cfg,
            w_concept: self.w_concept,
            concept_s: self.concept_s.clone(),
            concept_sbar: self.concept_sbar.clone(),
            mask,
            momentum_beta: self.momentum_beta,
            decay: self.decay,
            literal_eq4: self.literal_eq4,
        };
        g.validate()?;
        Ok(g)
    }
}

/// Expands the guidance keys of a config struct into [`GuidanceKeys`].
#[macro_export]
macro_rules! guidance_keys {
    ($cfg:expr) => {
        $crate::util::GuidanceKeys {
            w_cfg: $cfg.w_cfg,
            w_concept: $cfg.w_concept,
            concept_s: &$cfg.concept_s,
            concept_sbar: &$cfg.concept_sbar,
            mask_path: &$cfg.mask_path,
            momentum_beta: $cfg.momentum_beta,
            decay: $cfg.decay,
            literal_eq4: $cfg.literal_eq4,
        }
    };
}
